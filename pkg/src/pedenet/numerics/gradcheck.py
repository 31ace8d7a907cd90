"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from pedenet.numerics.layers import record_activation_signs
from pedenet.numerics.tensor import Tensor


@dataclass
class GradCheckReport:
    max_error: float = 0.0
    n_checked: int = 0
    # coordinates whose +-eps stencil changes some leaky_relu input sign
    n_kinked: int = 0
    worst: tuple[str, int, float, float] | None = None  # (param, index, analytic, numeric)
    errors: dict[str, float] = field(default_factory=dict)


Objective = Callable[[], Union[Tensor, Sequence[Tensor]]]


def _evaluate(f: Objective) -> tuple[Tensor, np.ndarray]:
    """Run ``f``; return the summed objective and the per-term values."""
    out = f()
    terms = list(out) if isinstance(out, (list, tuple)) else [out]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, np.array([float(t.data) for t in terms])


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_report(
    f: Objective,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_samples: int | None = 50,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare backprop gradients with central differences on sampled coordinates.

    The error of a coordinate is |analytic - numeric| / (|analytic| + eps).
    ``f`` recomputes the objective from the current contents of ``params``;
    it may return a scalar Tensor or a sequence of scalar terms whose sum is
    the objective. Terms are differenced separately and then added, so a
    large term that does not depend on a coordinate cannot swamp the small
    change of another term through rounding of the sum. The
    parameters are perturbed in place and restored. ``n_samples`` coordinates
    are drawn per tensor (all of them when None or when the tensor is
    smaller). With ``skip_kinks`` a coordinate is excluded from the maximum
    when the activation sign patterns at x-eps, x and x+eps are not all
    equal, since the function is then not differentiable along the stencil.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with record_activation_signs() as base_signs:
        out, _ = _evaluate(f)
    out.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if n_samples is None or flat.size <= n_samples:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with record_activation_signs() as plus_signs:
                fp = _evaluate(f)[1]
            flat[i] = orig - eps
            with record_activation_signs() as minus_signs:
                fm = _evaluate(f)[1]
            flat[i] = orig
            if skip_kinks and not (_same_pattern(base_signs, plus_signs) and _same_pattern(base_signs, minus_signs)):
                report.n_kinked += 1
                continue
            numeric = float(np.sum((fp - fm) / (2.0 * eps)))
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + eps)
            report.n_checked += 1
            worst_here = max(worst_here, err)
            if err >= report.max_error:
                report.max_error = err
                report.worst = (name, int(i), float(a_flat[i]), numeric)
        report.errors[name] = worst_here
    return report


def finite_difference_check(
    f: Objective,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_samples: int | None = 50,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> float:
    """Max over sampled coordinates of |analytic - numeric| / (|analytic| + eps)."""
    return finite_difference_report(f, params, eps, n_samples, rng, skip_kinks).max_error
