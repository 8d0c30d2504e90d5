import numpy as np
import pytest

from tempbal.esd import NonFiniteMatrixError, compute_esd, orient, orient_array
from tempbal.weight_store import LayerTensor


def test_orient_already_wide():
    layer = LayerTensor("fc", (10, 72), np.zeros(720))
    mat = orient(layer)
    assert (mat.n, mat.m, mat.transposed) == (10, 72, False)


def test_orient_transposes_tall():
    layer = LayerTensor("fc", (72, 10), np.arange(720.0))
    mat = orient(layer)
    assert (mat.n, mat.m, mat.transposed) == (10, 72, True)
    assert np.array_equal(mat.values, np.arange(720.0).reshape(72, 10).T)


def test_orient_conv_reshape_matches_index_oracle():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=72)
    layer = LayerTensor("conv", (4, 2, 3, 3), vals)
    mat = orient(layer)
    assert (mat.n, mat.m) == (4, 18)

    # oracle: place each tensor element by explicit row-major index arithmetic
    oracle = np.zeros((4, 18))
    tensor = vals.reshape(4, 2, 3, 3)
    for o in range(4):
        for c in range(2):
            for ki in range(3):
                for kj in range(3):
                    oracle[o, c * 9 + ki * 3 + kj] = tensor[o, c, ki, kj]
    assert np.array_equal(mat.values, oracle)

    lam = compute_esd(mat).eigenvalues
    lam_oracle = np.sort(np.linalg.eigvalsh(oracle @ oracle.T))
    assert np.allclose(lam, np.maximum(lam_oracle, 0.0), rtol=1e-9, atol=1e-12)


def test_orient_rejects_bad_rank():
    with pytest.raises(ValueError):
        orient_array(np.zeros(5), "vec")
    with pytest.raises(ValueError):
        orient_array(np.zeros((2, 2, 2)), "cube")
    with pytest.raises(ValueError):
        orient_array(np.zeros((0, 3)), "empty")


def test_diagonal_esd():
    mat = orient_array(np.array([[3.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), "diag")
    lam = compute_esd(mat).eigenvalues
    assert np.allclose(lam, [1.0, 9.0], rtol=0, atol=1e-12)


def test_zero_matrix_esd():
    lam = compute_esd(orient_array(np.zeros((2, 5)), "zero")).eigenvalues
    assert np.array_equal(lam, [0.0, 0.0])


def test_gram_oracle_random():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(8, 12))
    lam = compute_esd(orient_array(w, "w")).eigenvalues
    oracle = np.sort(np.linalg.eigvalsh(w @ w.T))
    assert np.all(np.abs(lam - oracle) <= 1e-9 * np.maximum(np.abs(oracle), 1e-30))


def test_scale_equivariance():
    rng = np.random.default_rng(12)
    w = rng.normal(size=(6, 9))
    c = 3.7
    lam = compute_esd(orient_array(w, "w")).eigenvalues
    lam_scaled = compute_esd(orient_array(c * w, "cw")).eigenvalues
    assert np.allclose(lam_scaled, c * c * lam, rtol=1e-9)


def test_orientation_invariance():
    rng = np.random.default_rng(13)
    w = rng.normal(size=(5, 14))
    lam = compute_esd(orient_array(w, "w")).eigenvalues
    lam_t = compute_esd(orient_array(w.T, "wt")).eigenvalues
    assert np.allclose(lam, lam_t, rtol=1e-9)


def test_sum_identity_frobenius():
    rng = np.random.default_rng(14)
    for _ in range(20):
        w = rng.normal(size=(int(rng.integers(2, 20)), int(rng.integers(20, 40))))
        lam = compute_esd(orient_array(w, "w")).eigenvalues
        assert np.isclose(lam.sum(), np.linalg.norm(w) ** 2, rtol=1e-9)


def test_non_finite_rejected():
    w = np.ones((3, 4))
    w[1, 2] = np.nan
    with pytest.raises(NonFiniteMatrixError):
        compute_esd(orient_array(w, "bad"))


def test_esd_ascending_and_nonnegative():
    rng = np.random.default_rng(15)
    esd = compute_esd(orient_array(rng.normal(size=(20, 30)), "w"))
    lam = esd.eigenvalues
    assert np.all(np.diff(lam) >= 0)
    assert lam[0] >= 0
    assert esd.lambda_max == lam[-1]
