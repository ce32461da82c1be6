"""Central finite-difference checking of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .tensor import GradTape, Tensor, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple  # (input index, flat coordinate, analytic, numeric)
    n_skipped: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], n_coords: int = 100,
              h: float = 1e-3, seed: int = 0, denom_floor: float = 1e-8,
              check: Sequence[bool] = None, skip_kinks: bool = False) -> GradCheckResult:
    """Compare tape gradients of a scalar ``fn`` with central differences.

    ``fn`` receives one float64 :class:`Tensor` per entry of ``inputs`` and must
    return a scalar tensor. At least ``n_coords`` coordinates (spread over the
    checked inputs, all of them if fewer exist) are perturbed by ``±h``.
    The error for a coordinate is ``|analytic - numeric| / (|analytic| + denom_floor)``.

    With ``skip_kinks`` a coordinate whose ``±h`` stencil straddles a point of
    non-differentiability (e.g. a maxpool argmax switch) is detected by
    disagreement between the central differences at ``h`` and ``h/2`` and
    replaced by another coordinate; the count is reported as ``n_skipped``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    check = [True] * len(arrays) if check is None else list(check)
    tensors = [Tensor(a, requires_grad=c, dtype=np.float64) for a, c in zip(arrays, check)]
    with GradTape() as tape:
        loss = fn(*tensors)
    grads = backward(loss, tape, wrt=[t for t, c in zip(tensors, check) if c])

    rng = np.random.default_rng(seed)
    pool: List[tuple] = [(i, j) for i, a in enumerate(arrays) if check[i] for j in range(a.size)]
    order = rng.permutation(len(pool))

    def evaluate(i, j, delta):
        shifted = [a.copy() for a in arrays]
        shifted[i].reshape(-1)[j] += delta
        return fn(*[Tensor(s, dtype=np.float64) for s in shifted]).item()

    def central(i, j, step):
        return (evaluate(i, j, step) - evaluate(i, j, -step)) / (2 * step)

    worst, max_err, used, skipped = (None, None, 0.0, 0.0), 0.0, 0, 0
    for p in order:
        if used >= n_coords:
            break
        i, j = pool[p]
        numeric = central(i, j, h)
        if skip_kinks:
            half = central(i, j, h / 2)
            if abs(numeric - half) > 1e-5 * (abs(half) + 1e-6):
                skipped += 1
                continue
        used += 1
        analytic = float(grads[tensors[i]].reshape(-1)[j])
        err = abs(analytic - numeric) / (abs(analytic) + denom_floor)
        if err >= max_err:
            max_err, worst = err, (i, j, analytic, numeric)
    return GradCheckResult(max_err, used, worst, skipped)
