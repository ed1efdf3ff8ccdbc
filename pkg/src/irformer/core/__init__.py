from irformer.core.tensor import Parameter, Tensor, as_tensor, no_grad
from irformer.core.optim import SGD, SgdState
from irformer.core.checkpoint import load_checkpoint, save_checkpoint
from irformer.core import ops

__all__ = ["Tensor", "Parameter", "as_tensor", "no_grad", "SGD", "SgdState",
           "save_checkpoint", "load_checkpoint", "ops"]
