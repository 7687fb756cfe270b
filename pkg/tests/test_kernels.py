import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from targetcorr.errors import DimensionError, ExplicitFeaturesRequired, TargetCorrError
from targetcorr.kernels import (
    RBF,
    GramBundle,
    Precomputed,
    RandomFeatureTanh,
    decay_diag,
    directional_mask,
    eval_kernel,
    gram,
    indices,
    is_psd,
    kernel_from_descriptor,
    linear_kernel,
    load_matrix,
    restricted_mask,
    save_matrix,
)


class TestEvalKernel:
    def test_rbf_zero_distance(self):
        assert eval_kernel(RBF(0.1), np.array([0.3]), np.array([0.3])) == 1.0

    def test_rbf_scalar_value(self):
        assert eval_kernel(RBF(0.1), np.array([0.0]), np.array([0.1])) == pytest.approx(np.exp(-0.1), abs=1e-15)
        assert eval_kernel(RBF(0.1), np.array([0.0]), np.array([0.1])) == pytest.approx(0.904837, abs=1e-6)

    def test_tanh_zero_projection(self):
        k = RandomFeatureTanh(np.zeros((5, 2)))
        assert eval_kernel(k, np.array([1.0, -2.0]), np.array([0.5, 3.0])) == 0.0

    def test_tanh_matches_formula(self, rng):
        J = rng.standard_normal((7, 2))
        x, y = rng.standard_normal(2), rng.standard_normal(2)
        expected = np.tanh(J @ x) @ np.tanh(J @ y)
        assert eval_kernel(RandomFeatureTanh(J), x, y) == pytest.approx(expected, abs=1e-14)

    def test_dimension_mismatch_names_dimension(self):
        with pytest.raises(DimensionError) as info:
            eval_kernel(RBF(0.1), np.zeros(2), np.zeros(3))
        assert info.value.dimension == "d_x"

    def test_kernel_expected_dimension(self):
        with pytest.raises(DimensionError, match="d_x=3"):
            eval_kernel(RandomFeatureTanh(np.ones((4, 2))), np.zeros(3), np.zeros(3))

    def test_bandwidth_must_be_positive(self):
        with pytest.raises(TargetCorrError):
            RBF(0.0)


class TestGram:
    def test_single_point(self):
        np.testing.assert_array_equal(gram(RBF(0.1), np.array([[0.4]])), [[1.0]])

    def test_two_points(self):
        K = gram(RBF(0.1), np.array([[0.0, 0.1]]))
        e = np.exp(-0.1)
        np.testing.assert_allclose(K, [[1, e], [e, 1]], rtol=0, atol=1e-15)

    def test_matches_elementwise_evaluation(self, rng):
        X, X2 = rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
        k = RBF(0.7)
        K = gram(k, X, X2)
        for i in range(5):
            for j in range(4):
                assert K[i, j] == pytest.approx(eval_kernel(k, X[:, i], X2[:, j]), abs=1e-15)

    def test_empty_side_rejected(self):
        with pytest.raises(DimensionError):
            gram(RBF(0.1), np.zeros((1, 0)))

    @pytest.mark.parametrize("kind", ["rbf", "tanh", "linear"])
    def test_symmetric_psd(self, rng, kind):
        X = rng.standard_normal((2, 30))
        k = {"rbf": RBF(0.5), "tanh": RandomFeatureTanh(rng.standard_normal((50, 2))), "linear": linear_kernel()}[kind]
        K = gram(k, X)
        np.testing.assert_allclose(K, K.T, rtol=0, atol=1e-12)
        assert is_psd(K)

    def test_features_required(self):
        with pytest.raises(ExplicitFeaturesRequired):
            RBF(0.1).features(np.zeros((1, 2)))


class TestPrecomputed:
    def test_index_rows(self, rng):
        A = rng.standard_normal((6, 6))
        k = Precomputed(A @ A.T)
        np.testing.assert_array_equal(gram(k, indices(2, 1), indices(3, 3)), (A @ A.T)[1:3, 3:6])

    def test_rejects_unseen_points(self):
        k = Precomputed(np.eye(3))
        with pytest.raises(TargetCorrError, match="outside its stored Gram"):
            gram(k, indices(1, 0), np.array([[5]]))
        with pytest.raises(TargetCorrError, match="outside its stored Gram"):
            gram(k, np.array([[0.5]]))


class TestDirectionalMask:
    def test_strict_upper(self):
        K = np.array([[1.0, 0.3], [0.3, 1.0]])
        np.testing.assert_array_equal(directional_mask(K, 1), [[0, 0.3], [0, 0]])

    def test_single_block_is_zero(self, rng):
        K = rng.standard_normal((5, 5))
        np.testing.assert_array_equal(directional_mask(K, 5), np.zeros((5, 5)))

    def test_block_two_on_four(self):
        K = np.arange(16.0).reshape(4, 4) + 1
        M = directional_mask(K, 2)
        expected = np.zeros((4, 4))
        expected[:2, 2:] = K[:2, 2:]
        np.testing.assert_array_equal(M, expected)

    def test_trailing_partial_block(self):
        K = np.ones((5, 5))
        M = directional_mask(K, 2)
        # blocks {0,1}, {2,3}, {4}
        assert M[3, 4] == 1 and M[4, 4] == 0 and M[2, 3] == 0 and M[1, 4] == 1

    @pytest.mark.parametrize("b", [0, 6])
    def test_block_out_of_range(self, b):
        with pytest.raises(TargetCorrError):
            directional_mask(np.eye(5), b)

    @given(st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_strict_decomposition(self, n, seed):
        A = np.random.default_rng(seed).standard_normal((n, n))
        K = A + A.T
        U = directional_mask(K, 1)
        np.testing.assert_array_equal(U + U.T + np.diag(np.diag(K)), K)

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_idempotent(self, n, b, seed):
        b = min(b, n)
        K = np.random.default_rng(seed).standard_normal((n, n))
        M = directional_mask(K, b)
        np.testing.assert_array_equal(directional_mask(M, b), M)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_coarser_blocks_subset(self, b, mult, seed):
        n = 16
        K = np.random.default_rng(seed).uniform(0.5, 1.0, (n, n))
        fine, coarse = directional_mask(K, b), directional_mask(K, min(b * mult, n))
        assert np.all((coarse != 0) <= (fine != 0))

    def test_restricted_mask_matches_global(self, rng):
        K = rng.standard_normal((12, 12))
        full = directional_mask(K, 4)
        np.testing.assert_array_equal(restricted_mask(K[4:8, 4:8], 4, 4), full[4:8, 4:8])
        np.testing.assert_array_equal(restricted_mask(K[6:10, 6:10], 4, 6), full[6:10, 6:10])


class TestDecayDiag:
    def test_no_ridge_all_ones(self):
        np.testing.assert_array_equal(decay_diag(4, 0.3, 0.0).diag, np.ones(4))

    def test_values(self):
        np.testing.assert_allclose(decay_diag(3, 0.5, 1.0).diag, [0.25, 0.5, 1.0])

    def test_zero_base(self):
        np.testing.assert_array_equal(decay_diag(2, 0.5, 2.0).diag, [0.0, 1.0])

    def test_needs_positive_length(self):
        with pytest.raises(TargetCorrError):
            decay_diag(0, 0.1, 0.1)


class TestGramBundle:
    def test_fields(self, rng):
        X = rng.standard_normal((2, 6))
        gb = GramBundle.build(RBF(1.0), X, 2)
        np.testing.assert_array_equal(gb.K_directional, directional_mask(gb.K, 2))
        assert gb.block_size == 2 and is_psd(gb.K)


class TestSerialization:
    @pytest.mark.parametrize("suffix", [".csv", ".npy"])
    def test_matrix_round_trip(self, tmp_path, rng, suffix):
        M = rng.standard_normal((4, 3))
        path = tmp_path / f"m{suffix}"
        save_matrix(path, M)
        np.testing.assert_array_equal(load_matrix(path), M)

    def test_csv_header(self, tmp_path):
        save_matrix(tmp_path / "m.csv", np.zeros((2, 5)))
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "2,5"

    def test_descriptor_round_trip(self, rng):
        for k in (RBF(0.3, 2), RandomFeatureTanh(rng.standard_normal((3, 2))), linear_kernel(2)):
            k2 = kernel_from_descriptor(k.descriptor())
            X = rng.standard_normal((2, 4))
            np.testing.assert_array_equal(gram(k, X), gram(k2, X))
