"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import record_patterns
from .tensor import Tensor


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, index, step: float = 1e-3) -> float:
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    orig = x[index].copy()
    x[index] = orig + step
    fp = f()
    x[index] = orig - step
    fm = f()
    x[index] = orig
    return (fp - fm) / (2.0 * step)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``fn`` maps the inputs to a tensor. Non-scalar outputs are contracted with
    a fixed random projection so that every output entry contributes. With
    ``max_entries`` only that many randomly chosen entries per input are probed.

    Entries whose gradient is below ``1e-3`` of the tensor's largest analytic
    gradient are compared against that scale instead of their own magnitude;
    otherwise the O(step**2) truncation error dominates near-zero entries.
    """
    rng = rng if rng is not None else np.random.default_rng(20240917)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    proj = np.ones(out.shape) if out.size == 1 else rng.standard_normal(out.shape)
    (out * proj.astype(out.dtype)).sum().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        return float(np.sum(fn(*inputs).data * proj, dtype=np.float64))

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
        for k in flat:
            idx = np.unravel_index(k, t.shape)
            n = numeric_grad(value, t.data, idx, step)
            floor = max(1e-3 * float(np.abs(a).max()), 1e-8)
            worst = max(worst, float(relative_error(a[idx], n, floor)))
    return worst


def check_sampled_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    num_samples: int = 20,
    step: float = 1e-3,
    rng: np.random.Generator | None = None,
    max_draws: int = 1000,
) -> tuple[float, int]:
    """Max relative error over ``num_samples`` parameter entries drawn across ``params``.

    ``loss_fn`` takes no arguments and returns a scalar built from the
    parameters. Entries are drawn uniformly over all parameter values. A draw
    whose ``+-step`` interval changes any ReLU or max-pool pattern is replaced,
    since the loss has no derivative for central differences to approximate
    there. Returns ``(worst error, number of replaced draws)``. The floor is
    ``1e-3`` of the largest analytic gradient over all parameters.
    """
    rng = rng if rng is not None else np.random.default_rng(20240917)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with record_patterns() as base:
        loss_fn().backward()
    base = list(base)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    floor = max(1e-3 * max(float(np.abs(a).max()) for a in analytic), 1e-8)
    sizes = np.array([p.size for p in params])
    bounds = np.cumsum(sizes)

    def probe(x: np.ndarray, idx, delta: float) -> float | None:
        orig = x[idx].copy()
        x[idx] = orig + delta
        try:
            with record_patterns() as log:
                v = float(loss_fn().data)
        finally:
            x[idx] = orig
        return v if log == base else None

    worst, replaced, checked, tried = 0.0, 0, 0, set()
    while checked < num_samples:
        if len(tried) >= min(max_draws, int(sizes.sum())):
            raise RuntimeError(f"only {checked} of {num_samples} entries lie away from kinks")
        k = int(rng.integers(int(sizes.sum())))
        if k in tried:
            continue
        tried.add(k)
        i = int(np.searchsorted(bounds, k, side="right"))
        idx = np.unravel_index(int(k - (bounds[i - 1] if i else 0)), params[i].shape)
        fp, fm = probe(params[i].data, idx, step), probe(params[i].data, idx, -step)
        if fp is None or fm is None:
            replaced += 1
            continue
        n = (fp - fm) / (2.0 * step)
        worst = max(worst, float(relative_error(analytic[i][idx], n, floor)))
        checked += 1
    return worst, replaced
