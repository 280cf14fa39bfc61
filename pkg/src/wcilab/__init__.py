"""Weight-Curvature Index laboratory.

Second-order autodiff, adversarial training and the PAC-Bayes quantities
built from layer weight norms and Hessian traces, at desk scale.
"""

from .autodiff import Batch, ParamVector
from .models import Model, ModelSpec, build

__version__ = "0.1.0"

__all__ = ["Batch", "Model", "ModelSpec", "ParamVector", "build", "__version__"]
