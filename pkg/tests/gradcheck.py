"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from neurovol.tensor import Tape, Tensor, ops


def numeric_grad(f, arrays, idx, h=1e-6):
    """d f / d arrays[idx] by central differences; ``f`` maps arrays -> float."""
    base = arrays[idx]
    g = np.zeros_like(base, dtype=np.float64)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        mi = it.multi_index
        orig = base[mi]
        base[mi] = orig + h
        fp = f(arrays)
        base[mi] = orig - h
        fm = f(arrays)
        base[mi] = orig
        g[mi] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, arrays, seed=0, h=1e-6, diff=None):
    """Max relative error between tape and finite-difference gradients.

    ``op`` maps Tensors to a Tensor; the scalar probed is ``sum(op(...) * R)``
    for a fixed random ``R`` so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    diff = range(len(arrays)) if diff is None else diff
    probe = op(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed + 1000).standard_normal(probe.shape)

    def scalar(arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = ops.sum(ops.mul(op(*ts), weights))
    grads = tape.backward(loss, ts)
    worst = 0.0
    for i in diff:
        worst = max(worst, rel_error(grads[i], numeric_grad(scalar, arrays, i, h)))
    return worst
