"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

THRESHOLD_64 = 1e-4
THRESHOLD_32 = 1e-2


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_gradcheck(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    dtype=np.float64,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """Max elementwise relative error between tape gradients and central differences.

    ``op`` maps Tensors to a Tensor; non-scalar outputs are reduced with a fixed
    random projection so every output element contributes.  ``max_checks`` caps
    the coordinates probed per input (chosen at random) for large parameter sets.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    projection: list[np.ndarray] = []

    def scalar(vals: list[np.ndarray], track: bool):
        ts = [Tensor(v, requires_grad=track, dtype=dtype) for v in vals]
        if track:
            with Tape() as tape:
                out = op(*ts)
        else:
            tape = None
            out = op(*ts)
        if not projection:
            projection.append(rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape))
        return ts, out, tape

    ts, out, tape = scalar(arrays, True)
    tape.backward(out, projection[0].astype(dtype))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def value(vals):
        _, o, _ = scalar(vals, False)
        return float(np.sum(o.data * projection[0]))

    worst = 0.0
    for k, base in enumerate(arrays):
        flat_idx = np.arange(base.size)
        if max_checks is not None and base.size > max_checks:
            flat_idx = rng.choice(base.size, size=max_checks, replace=False)
        for idx in flat_idx:
            pos = [a.copy() for a in arrays]
            neg = [a.copy() for a in arrays]
            pos[k].reshape(-1)[idx] += step
            neg[k].reshape(-1)[idx] -= step
            numeric = (value(pos) - value(neg)) / (2 * step)
            err = relative_error(np.array(analytic[k].reshape(-1)[idx]), np.array(numeric))
            worst = max(worst, float(err))
    return worst


def parameter_gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_checks: int | None = 8,
    seed: int = 0,
    threshold: float = THRESHOLD_64,
) -> tuple[dict[int, float], int]:
    """Check a composed model in place: perturb each parameter's storage and re-run ``loss_fn``.

    Parameters should already be in 64-bit.  Returns the worst relative error per
    parameter index and the number of probes skipped as kinks: a probe whose
    central difference misses the threshold and also disagrees with the estimate
    at ``step / 10`` straddles a ReLU or max-pool switch, where the
    finite-difference oracle is undefined.  A wrong backward pass on a smooth
    coordinate still fails, because both estimates agree with each other there.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def central(flat, i, h) -> float:
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        return (up - down) / (2 * h)

    def rel(a, b) -> float:
        return float(relative_error(np.array(a), np.array(b)))

    worst, kinks = {}, 0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        err = 0.0
        for i in idx:
            a = analytic[k].reshape(-1)[i]
            e = rel(a, central(flat, i, step))
            if e > threshold:
                fine = central(flat, i, step / 10)
                if rel(central(flat, i, step), fine) > threshold:
                    kinks += 1
                    continue
            err = max(err, e)
        worst[k] = err
    return worst, kinks
