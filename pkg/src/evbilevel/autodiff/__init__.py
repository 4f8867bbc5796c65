from .gradcheck import fd_gradient, max_relative_error, value_and_grad
from .optim import AdamState, adam_step, cosine_lr, sgd_step
from .params import ParamFormatError, ParamSet, load_params, save_params, zeros_like
from .tensor import (
    PRIMITIVES,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    apply_primitive,
    as_tensor,
)

__all__ = [
    "AdamState",
    "DomainError",
    "PRIMITIVES",
    "ParamFormatError",
    "ParamSet",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "apply_primitive",
    "as_tensor",
    "backward",
    "cosine_lr",
    "fd_gradient",
    "load_params",
    "max_relative_error",
    "save_params",
    "sgd_step",
    "value_and_grad",
    "zeros_like",
]


def backward(loss: Tensor) -> dict:
    """Gradients of ``loss`` for every leaf watched on its tape."""
    if loss.tape is None:
        raise ValueError("loss is not connected to any tape")
    return loss.tape.backward(loss)
