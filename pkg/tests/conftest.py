"""Shared fixtures and the finite-difference gradient oracle."""

import os

# Pin BLAS to one thread before numpy loads: keeps timings stable and makes
# float64 reductions bit-reproducible across machines.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from msn import tensor as T

FD_STEP = 1e-5
FD_RTOL = 1e-4


def fd_gradcheck(build, params, step=FD_STEP, rtol=FD_RTOL):
    """Compare analytic gradients against central finite differences.

    `build` maps a list of numpy arrays to a scalar loss Tensor, constructing
    the whole graph from scratch each call (so detached quantities inside it
    are recomputed from the perturbed values unless `build` freezes them).
    `params` is the list of starting arrays.  Asserts every coordinate of
    every gradient agrees within `rtol` under the robust relative error
    |a - n| / max(|a|, |n|, 1e-8).
    """
    leaves = [T.Tensor(p.copy(), requires_grad=True) for p in params]
    loss = build(leaves)
    loss.backward()
    analytic = [lf.grad.copy() if lf.grad is not None else np.zeros_like(lf.data)
                for lf in leaves]

    for k, p in enumerate(params):
        numeric = np.zeros_like(p)
        flat = numeric.reshape(-1)
        base = [q.copy() for q in params]
        for i in range(p.size):
            for sign in (+1.0, -1.0):
                base[k].reshape(-1)[i] = p.reshape(-1)[i] + sign * step
                val = build([T.Tensor(q, requires_grad=False) for q in base]).item()
                flat[i] += sign * val / (2.0 * step)
            base[k].reshape(-1)[i] = p.reshape(-1)[i]
        a, n = analytic[k], numeric
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        rel = np.abs(a - n) / denom
        assert rel.max() < rtol, (
            f"param {k}: max rel grad error {rel.max():.3e} at "
            f"{np.unravel_index(rel.argmax(), rel.shape)} "
            f"(analytic {a.reshape(-1)[rel.argmax()]:.6e}, "
            f"numeric {n.reshape(-1)[rel.argmax()]:.6e})")
    return analytic


@pytest.fixture
def rng():
    return np.random.default_rng(0)
