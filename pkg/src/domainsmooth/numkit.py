"""Small dense numeric helpers shared by the rest of the package.

All arithmetic is float64. Randomness comes from ``numpy.random.Generator``
backed by PCG64, so a seed reproduces every draw within one installation.
"""
from __future__ import annotations

import numpy as np

from . import kernels

RNG_ALGORITHM = "numpy.PCG64"

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


class NumericError(ArithmeticError):
    """Raised when a numeric kernel hits a degenerate or non-finite case."""


class ConvergenceError(NumericError):
    pass


def make_rng(seed: int | None) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(u @ u)
    nv = np.sqrt(v @ v)
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine of a zero-norm vector is undefined")
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (rows / norms, norms). Zero rows raise ``NumericError``."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if (norms == 0.0).any():
        raise NumericError("cannot normalize a zero row")
    return x / norms[:, None], norms


def log_softmax_row(x, tau: float = 1.0) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(x, dtype=np.float64) / tau
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise stable log-softmax of a 2-D array."""
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _complete_basis(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # Gram-Schmidt the standard basis against the valid columns to fill the rest
    n = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if valid[j]]
    out = u.copy()
    e = 0
    for j in range(u.shape[1]):
        if valid[j]:
            continue
        while True:
            cand = np.zeros(n)
            cand[e % n] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.sqrt(cand @ cand)
            if nrm > 1e-6:
                break
        cand /= nrm
        basis.append(cand)
        out[:, j] = cand
    return out


def svd_small(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a small square matrix by one-sided Jacobi rotations.

    Returns ``(U, s, V)`` with ``M = U @ diag(s) @ V.T`` and ``s`` descending.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"svd_small needs a square matrix, got shape {m.shape}")
    if m.shape[0] > 512:
        raise ValueError("svd_small is limited to dimension 512")
    if not np.isfinite(m).all():
        raise NumericError("svd_small input contains non-finite values")
    n = m.shape[0]
    cols = np.ascontiguousarray(m.T)
    vcols = np.eye(n)
    sweeps = kernels.jacobi_sweeps(cols, vcols, SVD_TOL, SVD_MAX_SWEEPS)
    if sweeps < 0:
        raise ConvergenceError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps")

    s = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    cols = cols[order]
    v = vcols[order].T.copy()
    valid = s > n * np.finfo(np.float64).eps * max(s[0] if n else 0.0, 1e-300)
    u = np.zeros((n, n))
    u[:, valid] = (cols[valid] / s[valid, None]).T
    if not valid.all():
        u = _complete_basis(u, valid)
    return u, s, v


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
