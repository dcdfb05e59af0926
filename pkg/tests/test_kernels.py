"""The compiled and numpy kernels must agree."""
import numpy as np
import pytest

from domainsmooth import kernels
from domainsmooth.numkit import make_rng

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS


@needs_both
def test_hamming_parity():
    rng = make_rng(0)
    q = rng.integers(0, 2**63, size=(7, 3), dtype=np.uint64)
    g = rng.integers(0, 2**63, size=(11, 3), dtype=np.uint64)
    np.testing.assert_array_equal(
        BACKENDS["cython"].hamming_distances(q, g), BACKENDS["python"].hamming_distances(q, g)
    )


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_hamming_known(name):
    q = np.array([[0b1011]], dtype=np.uint64)
    g = np.array([[0b1011], [0b0000], [0b0100]], dtype=np.uint64)
    np.testing.assert_array_equal(BACKENDS[name].hamming_distances(q, g), [[0, 3, 4]])


@needs_both
def test_jacobi_parity_singular_values():
    rng = make_rng(1)
    m = rng.standard_normal((12, 12))
    out = {}
    for name, mod in BACKENDS.items():
        cols, v = np.ascontiguousarray(m.T), np.eye(12)
        assert mod.jacobi_sweeps(cols, v, 1e-12, 100) > 0
        out[name] = np.sort(np.linalg.norm(cols, axis=1))
    np.testing.assert_allclose(out["cython"], out["python"], rtol=1e-12)


@needs_both
def test_bank_update_parity():
    rng = make_rng(2)
    k, dim, ncat = 3, 5, 4
    states = {}
    for name, mod in BACKENDS.items():
        r = make_rng(2)
        vecs = np.zeros((ncat, k, dim))
        cnt = np.zeros((ncat, k), dtype=np.int64)
        sizes = np.zeros(ncat, dtype=np.int64)
        nxt = 0
        for _ in range(30):
            ske = r.standard_normal((6, dim))
            img = r.standard_normal((6, dim))
            ys = r.integers(0, ncat, 6)
            yi = r.integers(0, ncat, 6)
            nxt = mod.bank_update_batch(vecs, cnt, sizes, nxt, ske, ys, img, yi)
        states[name] = (vecs, cnt, sizes, nxt)
    a, b = states["cython"], states["python"]
    assert a[3] == b[3]
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[0], b[0])
    del rng
