"""Online and offline kernel regression, target shift, target correction and
iterative correction for streaming and continual learning."""

from .correction import (
    CorrectionStep,
    CorrectionTracker,
    IterativeCorrector,
    corrected_targets,
    correction_one_step,
    eval_block_loss,
    iterative_correction,
    iterative_correction_bcg_oracle,
    iterative_targets,
)
from .errors import (
    ConfigError,
    DegenerateDecayError,
    DegenerateSchurError,
    DimensionError,
    ExplicitFeaturesRequired,
    NumericalError,
    StorageGuardError,
    TargetCorrError,
)
from .kernels import RBF, ExplicitFeature, Precomputed, RandomFeatureTanh, directional_mask, eval_kernel, gram
from .regression import (
    HyperParams,
    OrderedDataset,
    minibatch_closed_form,
    offline_predict,
    online_closed_form,
    sgd_run,
)
from .shift import ShiftTracker, TargetMatrix, effective_targets, online_residual, shift_one_step

__version__ = "0.1.0"
