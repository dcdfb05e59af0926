import sys

import numpy as np
import pytest

from domainsmooth import kernels
from domainsmooth.numkit import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    mod = kernels.backends()[request.param]
    for name in ("jacobi_sweeps", "hamming_distances", "bank_update_batch"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def num_grad(f, x, h=1e-5, entries=None):
    """Central differences of scalar ``f`` at ``x`` (perturbed in place, then restored).

    ``entries`` limits the probe to those flat indices; the rest stay zero.
    """
    g = np.zeros_like(x)
    probe = np.ndindex(x.shape) if entries is None else (np.unravel_index(i, x.shape) for i in entries)
    for idx in probe:
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        dn = f(x)
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def probe_entries(rng, size, limit=24):
    """All flat indices for small arrays, a seeded sample of ``limit`` otherwise."""
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def small_problem(seed, m=None, d_in=None):
    """Random tiny params and a fully populated training batch."""
    from domainsmooth.model import Batch, init_params, init_teacher, teacher_predict

    rng = make_rng(seed)
    m = m or int(rng.integers(2, 5))
    d_in = d_in or int(rng.integers(3, 17))
    n_seen, n_teacher = 3, 4
    params = init_params(rng, d_in, n_seen, n_teacher, hidden=8, d_emb=6, proj_hidden=8)
    # nonzero biases so every code path carries signal
    params = params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))
    y = rng.integers(0, n_seen, m)
    x_img = rng.standard_normal((m, d_in))
    x_ske = rng.standard_normal((m, d_in))
    views = np.concatenate([x + 0.1 * rng.standard_normal(x.shape) for x in (x_img, x_img, x_ske, x_ske)])
    teacher = init_teacher(rng, d_in, n_teacher, 2.0)
    protos = rng.standard_normal((m, 6))
    mask = rng.random(m) < 0.75
    mask[0] = True
    batch = Batch(
        x_img=x_img,
        x_ske=x_ske,
        y_img=y,
        y_ske=y,
        views=views,
        view_labels=np.tile(y, 4),
        cls_targets=np.concatenate([y, y]),
        teacher_probs=teacher_predict(teacher, np.concatenate([x_img, x_ske])),
        protos=protos,
        proto_mask=mask,
        tau=0.07,
    )
    return params, batch


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
