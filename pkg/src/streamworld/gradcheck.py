"""Finite-difference gradient oracle, independent of the tape.

Used by tests to corroborate every differentiable op: central differences in
fp64 against the analytic gradients returned by Tape.backward.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def fd_gradient(f, x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of scalar-valued f at leaf x.

    f is called with no arguments and must read x.data; if `indices` is given
    only those flat entries are probed (others are returned as NaN-free 0).
    """
    x.data = np.asarray(x.data)  # numpy scalars have no mutable view
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    idxs = range(flat.size) if indices is None else indices
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def check_gradients(build_loss, leaves: dict[str, Tensor], h: float = 1e-5,
                    rtol: float = 1e-4, max_entries: int | None = None,
                    rng=None) -> dict[str, float]:
    """Compare analytic and finite-difference gradients for each leaf.

    build_loss() runs a fresh forward and returns the scalar loss Tensor;
    it must be a pure function of the leaves' current data.
    Returns the relative error per leaf and raises AssertionError beyond rtol.
    """
    with Tape() as tape:
        loss = build_loss()
        analytic = tape.backward(loss)
    errors = {}
    for name, leaf in leaves.items():
        a = analytic[leaf].reshape(-1)
        if max_entries is not None and leaf.size > max_entries:
            if rng is None:
                raise ValueError("rng required when sampling entries")
            idxs = sorted(set(int(i) for i in rng.integers(0, leaf.size, size=max_entries)))
        else:
            idxs = list(range(leaf.size))
        fd = fd_gradient(lambda: build_loss().item(), leaf, h=h, indices=idxs).reshape(-1)
        diff = np.linalg.norm(a[idxs] - fd[idxs])
        ref = max(np.linalg.norm(fd[idxs]), 1e-8)
        rel = diff / ref
        errors[name] = rel
        assert rel < rtol, f"gradient mismatch for '{name}': rel err {rel:.3e} >= {rtol}"
    return errors
