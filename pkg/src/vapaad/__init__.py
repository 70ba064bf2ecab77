"""Next-frame video prediction with ConvLSTM, self-attention and an adversarial instructor.

Everything runs on numpy; the convolution, attention and rotation kernels
are compiled with numba when it is importable.  Set ``VAPAAD_DISABLE_NUMBA=1``
to force the pure-numpy path.
"""

from .model import (InstructorModel, VapaadConfig, VapaadModel, build, build_instructor, forward,
                    instructor_score, parameter_count, rollout)
from .tensor import Tensor, default_dtype, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "default_dtype", "no_grad", "VapaadConfig", "VapaadModel", "InstructorModel",
           "build", "build_instructor", "forward", "rollout", "instructor_score", "parameter_count"]
