"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pedenet.errors import PreconditionError
from pedenet.numerics.tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, grads: dict[str, np.ndarray] | None = None) -> AdamState:
    """Apply one in-place Adam update to every tensor in ``params``.

    Gradients default to each tensor's ``.grad``; a missing gradient is a
    caller bug, so it raises rather than silently skipping the parameter.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise PreconditionError(f"no gradient for parameters: {', '.join(missing[:5])}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (state.learning_rate / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        p.data -= step.astype(p.dtype, copy=False)
    return state
