"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failed: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return not self.failed and self.worst < tol


def check_gradients(
    fn: Callable[..., Tensor],
    point: Sequence,
    step: float = 1e-4,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against (f(x+s) - f(x-s)) / 2s in float64.

    ``fn`` receives one float64 Tensor per entry of ``point`` and returns a
    scalar Tensor. Relative error per entry is |a - n| / max(|a|, |n|, 1e-8).
    When ``max_entries`` is set, at most that many entries per parameter are
    probed, chosen by a seeded generator.
    """
    if not step > 0:
        raise ContractError(f"step must be positive, got {step}")
    leaves = [
        Tensor(np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64),
               requires_grad=True, dtype=np.float64)
        for p in point
    ]
    names = list(names) if names is not None else [f"p{i}" for i in range(len(leaves))]
    report = GradCheckReport()

    root = fn(*leaves)
    if not np.all(np.isfinite(root.data)):
        report.failed.extend(names)
        report.max_rel_error.update({n: float("inf") for n in names})
        return report
    analytic = backward(root, leaves)
    rng = np.random.default_rng(seed)

    for name, leaf in zip(names, leaves):
        flat = leaf.data.reshape(-1)
        ga = analytic[leaf].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn(*leaves).data)
                flat[i] = orig - step
                fm = float(fn(*leaves).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    worst = float("inf")
                    break
                denom = max(abs(ga[i]), abs(num), 1e-8)
                worst = max(worst, abs(ga[i] - num) / denom)
        report.max_rel_error[name] = worst
        if not np.isfinite(worst):
            report.failed.append(name)
    return report
