"""The numba kernels and their numpy twins must agree."""

import numpy as np
import pytest

from geoworld import _kernels as K

pytestmark = pytest.mark.skipif(K.numba is None, reason="numba not installed")


def _setup(seed, n=7, m=5):
    rng = np.random.default_rng(seed)
    moduli = np.array([2 * np.pi, 1.0, 3.5, 1.0])
    circ = np.array([True, False, True, False])
    A = rng.uniform(-10, 10, size=(n, 4))
    B = rng.uniform(-10, 10, size=(m, 4))
    return A, B, moduli, circ


@pytest.mark.parametrize("seed", range(5))
def test_wrap_and_signed_diff_parity(seed):
    A, B, moduli, circ = _setup(seed, 6, 6)
    np.testing.assert_allclose(K.wrap_columns_nb(A, moduli, circ), K.wrap_columns_np(A, moduli, circ), atol=1e-12)
    np.testing.assert_allclose(K.signed_diff_nb(A, B, moduli, circ), K.signed_diff_np(A, B, moduli, circ), atol=1e-12)


@pytest.mark.parametrize("metric", [1, 2])
@pytest.mark.parametrize("seed", range(5))
def test_pairwise_parity(metric, seed):
    A, B, moduli, circ = _setup(seed)
    D_nb = K.pairwise_distance_nb(A, B, moduli, circ, metric)
    D_np = K.pairwise_distance_np(A, B, moduli, circ, metric)
    np.testing.assert_allclose(D_nb, D_np, atol=1e-12)
    G = np.random.default_rng(seed + 100).normal(size=D_np.shape)
    for got, want in zip(
        K.pairwise_distance_grad_nb(A, B, moduli, circ, metric, G, D_nb),
        K.pairwise_distance_grad_np(A, B, moduli, circ, metric, G, D_np),
    ):
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_rank_parity():
    rng = np.random.default_rng(0)
    D = rng.integers(0, 4, size=(50, 9)).astype(float)
    t = rng.integers(0, 9, size=50)
    np.testing.assert_array_equal(K.rank_of_true_nb(D, t), K.rank_of_true_np(D, t))


def test_backend_flag_is_reported():
    assert K.BACKEND in ("numba", "numpy")
