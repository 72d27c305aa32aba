"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError
from .tensor import Parameter, Tensor

BuildFn = Callable[[int], tuple[dict[str, Parameter], Callable[[], Tensor]]]


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / denom


def _unit(u: np.ndarray) -> np.ndarray:
    return u / np.linalg.norm(u)


def randomize(params, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Move parameters away from their near-degenerate initialization.

    Small initial weights make attention nearly uniform and most gradients
    tiny, which hides errors under finite-difference noise.
    """
    for p in params:
        fan = p.size // p.shape[0] if p.ndim >= 2 else 1
        p.assign(p.data + rng.normal(0.0, scale / np.sqrt(fan), p.shape))


def grad_check(
    build_fn: BuildFn,
    seed: int = 0,
    eps: float = 1e-3,
    mode: str = "direction",
    probes: int = 2,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``build_fn(seed)`` returns ``(named_parameters, loss_fn)``; ``loss_fn`` must
    rebuild the forward pass from the current parameter values on every call.

    ``mode="direction"`` perturbs each whole parameter along ``probes`` random
    unit-norm directions u and compares <grad, u> with the central difference;
    every entry participates, so isolated near-zero coordinates cannot hide
    or fake an error. ``mode="coordinate"`` probes every scalar separately.
    """
    if mode not in ("direction", "coordinate"):
        raise ValueError(f"unknown mode {mode!r}")
    params, loss_fn = build_fn(seed)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("gradient check loss is not finite")
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in params.items():
        base = p.data.copy()
        if mode == "coordinate":
            directions = (np.eye(p.size)[i].reshape(p.shape) for i in range(p.size))
            count = p.size
        else:
            directions = (_unit(rng.standard_normal(p.shape)) for _ in range(probes))
            count = probes
        worst = 0.0
        for u in directions:
            plus, minus = base + eps * u, base - eps * u
            p.data[...] = plus
            up = loss_fn().item()
            p.data[...] = minus
            down = loss_fn().item()
            p.data[...] = base
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}")
            numeric = (up - down) / (2 * eps)
            # use the step actually stored; rounding of base + eps*u is not negligible
            step = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(float(np.sum(analytic[name] * step)), numeric))
        report.errors[name] = worst
        report.checked[name] = count
    return report
