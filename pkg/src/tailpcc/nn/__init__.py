from . import autograd
from .autograd import Tensor, no_grad, DimensionError
from .layers import Parameter, Module, Linear, MLP
from .optim import Adam, AdamState, lr_schedule
from .gradcheck import gradcheck, GradCheckResult

__all__ = [
    "autograd", "Tensor", "no_grad", "DimensionError", "Parameter", "Module", "Linear", "MLP",
    "Adam", "AdamState", "lr_schedule", "gradcheck", "GradCheckResult",
]
