"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore
from .tensor import no_grad


class NondeterministicModelError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    sizes: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def failing(self, tol: float) -> list[tuple[str, float]]:
        bad = [(n, e) for n, e in self.max_rel_err.items() if not e < tol]
        return sorted(bad, key=lambda x: -x[1])

    def coverage(self, store: ParameterStore) -> float:
        names = store.names()
        return sum(n in self.max_rel_err for n in names) / max(len(names), 1)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale


def _pick_indices(grad: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    n = grad.size
    if n <= budget:
        return np.arange(n)
    # half the budget on the largest analytic entries, half uniformly
    top = np.argsort(-np.abs(grad.ravel()), kind="stable")[: budget // 2]
    rest = np.setdiff1d(np.arange(n), top)
    extra = rng.choice(rest, size=budget - top.size, replace=False)
    return np.sort(np.concatenate([top, extra]))


def grad_check(model_fn, params: ParameterStore, h: float = 1e-5, max_per_param: int = 12,
               floor: float = 1e-7, seed: int = 0, names: list[str] | None = None
               ) -> GradCheckReport:
    """Compare backprop gradients of ``model_fn(params)`` against central differences.

    ``model_fn`` must return a scalar Tensor. Tensors larger than
    ``max_per_param`` are subsampled deterministically from ``seed``. The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    loss = model_fn(params)
    f0 = float(loss.data)
    loss.backward()
    with no_grad():
        again = float(model_fn(params).data)
    if again != f0:
        raise NondeterministicModelError(
            f"model_fn returned {f0!r} then {again!r} for identical parameters"
        )
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name in names or params.names():
        p = params[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        idx = _pick_indices(analytic, max_per_param, rng)
        flat = p.data.reshape(-1)
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(model_fn(params).data)
                flat[i] = orig - h
                fm = float(model_fn(params).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                worst = max(worst, relative_error(analytic.reshape(-1)[i], numeric, floor))
        report.max_rel_err[name] = worst
        report.checked[name] = int(idx.size)
        report.sizes[name] = int(p.size)
    params.zero_grad()
    return report
