"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward, mul, sum_

EPS = 1e-4
ATOL = 1e-3
RTOL = 1e-2


@dataclass
class GradcheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    checked: int
    failures: int
    kinks: int = 0  # failures whose stencil straddles a non-differentiable point


    @property
    def passed(self) -> bool:
        return self.failures == 0


def _scalarize(out: Tensor, weights: dict) -> Tensor:
    if out.size == 1:
        return sum_(out)
    # fixed random projection so every output entry contributes to the check
    w = weights.get("w")
    if w is None or w.shape != out.shape:
        w = np.random.default_rng(1234).normal(size=out.shape)
        weights["w"] = w
    return sum_(mul(out, Tensor(w)))


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor] | Mapping[str, Tensor],
    name: str = "",
    eps: float = EPS,
    atol: float = ATOL,
    rtol: float = RTOL,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    corrupt: float = 0.0,
) -> GradcheckResult:
    """Compare backprop gradients of ``fn()`` with central differences.

    ``fn`` must rebuild its graph from the current ``params[i].data`` on every
    call. Non-scalar outputs are reduced with a fixed random projection. With
    ``max_entries`` set, that many coordinates per parameter are sampled
    instead of checking all of them. ``corrupt`` adds a constant to every
    analytic gradient (negative-control hook).

    Failing entries are also classified: if the two one-sided differences
    disagree while the analytic value matches one of them, the stencil
    crossed a kink (relu, max) and the entry is counted in ``kinks``. Such
    entries still count as failures.
    """
    if isinstance(params, Mapping):
        params = list(params.values())
    rng = rng or np.random.default_rng(0)
    weights: dict = {}

    for p in params:
        p.grad = None
    loss = _scalarize(fn(), weights)
    f0 = loss.item()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad + corrupt for p in params]

    max_abs = 0.0
    max_rel = 0.0
    checked = 0
    failures = 0
    kinks = 0
    for p, ga in zip(params, analytic):
        flat_size = p.size
        if max_entries is not None and flat_size > max_entries:
            picks = rng.choice(flat_size, size=max_entries, replace=False)
        else:
            picks = range(flat_size)
        original = p.data
        for flat in picks:
            idx = np.unravel_index(int(flat), p.shape)
            plus = original.copy()
            plus[idx] += eps
            p.data = plus
            f_plus = _scalarize(fn(), weights).item()
            minus = original.copy()
            minus[idx] -= eps
            p.data = minus
            f_minus = _scalarize(fn(), weights).item()
            p.data = original
            numeric = (f_plus - f_minus) / (2 * eps)
            err = abs(ga[idx] - numeric)
            # relative to |numeric|, floored at atol so near-zero grads stay readable
            rel = err / max(abs(numeric), atol)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, rel)
            checked += 1
            if err > max(atol, rtol * abs(numeric)):
                failures += 1
                right, left = (f_plus - f0) / eps, (f0 - f_minus) / eps
                tol = max(atol, rtol * abs(ga[idx]))
                if abs(right - left) > tol and min(abs(ga[idx] - right), abs(ga[idx] - left)) <= tol:
                    kinks += 1
    for p in params:
        p.grad = None
    return GradcheckResult(name, max_abs, max_rel, checked, failures, kinks)
