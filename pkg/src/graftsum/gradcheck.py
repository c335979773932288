"""Finite-difference verification of analytic gradients.

Central differences at 64-bit precision against whatever backward() produced.
A comparison passes when |analytic - numeric| <= atol + rtol * max(|a|, |n|),
which behaves as a relative test away from zero and an absolute one near it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckResult:
    checked: int = 0
    failures: list = field(default_factory=list)
    worst_abs_diff: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "pass" if self.ok else "FAIL"
        return (
            f"gradcheck {status}: {self.checked} entries, "
            f"{len(self.failures)} failures, worst |a-n|={self.worst_abs_diff:.3e}"
        )


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Compare backward() gradients of `build_loss()` against central differences.

    `build_loss` must re-run the forward pass from the current parameter
    values. When `max_entries` is set, that many randomly chosen entries are
    probed per parameter instead of all of them.
    """
    if T.default_dtype() != np.float64:
        raise RuntimeError("gradient checks require the float64 tensor mode")
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            raise RuntimeError("a checked parameter received no gradient")
        analytic.append(p.grad.copy())

    result = GradCheckResult()
    with T.no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_entries is not None and n > max_entries:
                idxs = rng.choice(n, size=max_entries, replace=False)
            else:
                idxs = np.arange(n)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = build_loss().item()
                flat[i] = orig - eps
                f_minus = build_loss().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                ana = float(a.reshape(-1)[i])
                diff = abs(ana - numeric)
                result.checked += 1
                result.worst_abs_diff = max(result.worst_abs_diff, diff)
                if diff > atol + rtol * max(abs(ana), abs(numeric)):
                    result.failures.append((int(i), ana, numeric, diff))
    return result


def assert_gradients_match(build_loss, params, **kwargs) -> GradCheckResult:
    res = check_gradients(build_loss, params, **kwargs)
    if not res.ok:
        first = res.failures[0]
        raise AssertionError(
            f"{res.summary()}; first failure: entry {first[0]} analytic={first[1]:.6e} "
            f"numeric={first[2]:.6e}"
        )
    return res
