"""Central finite-difference verification of parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import engine as E
from .network import Trace, backward


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        return self.abs_error / denom if denom > 0 else 0.0


@dataclass
class GradCheckReport:
    tolerance: float
    abs_floor: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    def deviation(self, e: GradCheckEntry) -> float:
        # entries inside the absolute floor count as exact
        return 0.0 if e.abs_error <= self.abs_floor else e.rel_error

    @property
    def max_deviation(self) -> float:
        return max((self.deviation(e) for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def worst(self, k: int = 5) -> list[GradCheckEntry]:
        return sorted(self.entries, key=lambda e: (self.deviation(e), e.abs_error), reverse=True)[:k]

    def summary(self) -> str:
        lines = [f"status={'pass' if self.passed else 'fail'}",
                 f"checked={len(self.entries)}",
                 f"max_rel_deviation={self.max_deviation:.3e}",
                 f"max_abs_error={max((e.abs_error for e in self.entries), default=0.0):.3e}",
                 f"abs_floor={self.abs_floor:.1e}",
                 f"tolerance={self.tolerance:.1e}"]
        for e in self.worst():
            lines.append(f"worst {e.name}{list(e.index)} analytic={e.analytic:.6e} "
                         f"numeric={e.numeric:.6e} rel={e.rel_error:.2e}")
        return "\n".join(lines)


LossBuilder = Callable[[dict], tuple[Trace, E.Tensor]]


def grad_check(params: dict[str, np.ndarray], loss_builder: LossBuilder,
               tolerance: float = 1e-3, n_samples: int = 200, step: float = 1e-6,
               abs_floor: float = 1e-6, seed: int = 0,
               grad_override: Callable[[dict], dict] | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled parameter entries.

    ``loss_builder(params)`` must run a forward pass and return ``(trace, scalar loss)``.
    ``grad_override`` post-processes the analytic gradients (test fixtures use it to
    inject corruption).  Parameters are sampled proportionally to their size, with at
    least one entry from every array.
    """
    trace, loss = loss_builder(params)
    grads = backward(trace, loss)
    if grad_override is not None:
        grads = grad_override(grads)

    rng = np.random.default_rng(seed)
    names = sorted(params)
    picks = [(n, tuple(int(i) for i in np.unravel_index(rng.integers(params[n].size), params[n].shape)))
             for n in names]
    sizes = np.array([params[n].size for n in names], dtype=float)
    extra = max(0, n_samples - len(picks))
    for k in rng.choice(len(names), size=extra, p=sizes / sizes.sum()):
        n = names[k]
        picks.append((n, tuple(int(i) for i in np.unravel_index(rng.integers(params[n].size), params[n].shape))))

    report = GradCheckReport(tolerance, abs_floor)
    for name, idx in picks:
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + step
        f_plus = float(loss_builder(params)[1].data)
        arr[idx] = orig - step
        f_minus = float(loss_builder(params)[1].data)
        arr[idx] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        report.entries.append(GradCheckEntry(name, idx, float(grads[name][idx]), numeric))
    return report
