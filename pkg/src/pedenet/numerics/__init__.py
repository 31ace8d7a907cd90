"""Tensor library with reverse-mode gradients, layers, Adam and Gaussian linear algebra."""
from pedenet.numerics.gradcheck import GradCheckReport, finite_difference_check, finite_difference_report
from pedenet.numerics.layers import (
    Conv,
    Dense,
    MLP,
    conv2d,
    leaky_relu,
    linear,
    log_softmax,
    record_activation_signs,
    softmax,
)
from pedenet.numerics.linalg import cholesky_logdet_and_solve
from pedenet.numerics.optim import AdamState, adam_step
from pedenet.numerics.tensor import (
    Tensor,
    as_tensor,
    cast,
    clamp_min,
    concatenate,
    diagonal,
    logsumexp,
    matmul,
    no_grad,
    stack,
)

__all__ = [
    "AdamState",
    "Conv",
    "Dense",
    "MLP",
    "Tensor",
    "adam_step",
    "as_tensor",
    "cast",
    "cholesky_logdet_and_solve",
    "clamp_min",
    "concatenate",
    "conv2d",
    "diagonal",
    "GradCheckReport",
    "finite_difference_check",
    "finite_difference_report",
    "leaky_relu",
    "linear",
    "log_softmax",
    "logsumexp",
    "matmul",
    "no_grad",
    "record_activation_signs",
    "softmax",
    "stack",
]
