from . import ops
from .gradcheck import grad_check
from .tensor import GraphConsumedError, Tensor, backward, is_grad_enabled, no_grad

__all__ = ["GraphConsumedError", "Tensor", "backward", "grad_check", "is_grad_enabled",
           "no_grad", "ops"]
