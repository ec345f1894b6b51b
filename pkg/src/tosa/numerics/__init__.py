"""Float64 tensors with reverse-mode gradients, plus a finite-difference oracle."""

from .gradcheck import GradCheckReport, GradCheckUsageError, check_gradients, numerical_gradient
from .ops import *  # noqa: F401,F403
from .ops import ConfigError, InputError
from .tensor import DTYPE, GradTape, NumericsError, ShapeError, TapeError, Tensor, active_tape, as_tensor, no_grad
