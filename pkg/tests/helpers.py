"""Shared test oracles: finite differences and tolerance helpers."""

import numpy as np

from vitprune.tensor import Tensor


def fd_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def assert_close_rel(actual: np.ndarray, expected: np.ndarray, rtol: float = 1e-4,
                     floor: float = 1e-6):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
    rel = np.abs(actual - expected) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst <= rtol, f"relative error {worst:.3e} exceeds {rtol:.1e}"


def zero_mask_model(model, graph, gids):
    """Return a copy of ``model`` with every slice of the given groups set
    to zero (the W * M formulation of removal)."""
    masked = model.copy()
    for gid in gids:
        group = graph.group_for(gid)
        for unit in group.units:
            for s in unit.slices:
                arr = masked.params[s.key].data
                index = [slice(None)] * arr.ndim
                index[s.axis] = slice(s.start, s.stop)
                arr[tuple(index)] = 0.0
    return masked


def grad_check(build, x0: np.ndarray, rtol: float = 1e-4, step: float = 1e-5):
    """Check tape gradients of ``build(Tensor) -> scalar Tensor`` against
    central finite differences of the same computation run gradient-free."""
    leaf = Tensor(x0.copy(), requires_grad=True)
    loss = build(leaf)
    loss.backward()
    ad = leaf.grad.copy()

    def scalar(arr):
        return float(build(Tensor(arr)).data)

    fd = fd_grad(scalar, x0.copy(), step=step)
    assert_close_rel(ad, fd, rtol=rtol)
    return ad, fd
