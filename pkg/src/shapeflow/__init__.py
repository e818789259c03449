"""shapeflow: desk-scale 3D shape synthesis.

A set-latent VAE over truncated signed distance fields, a rectified-flow
generator with gated linear attention, and zero-order inference-time search
with a normal-map verifier — all on a minimal numpy autodiff engine, with
numba-accelerated geometry kernels.
"""

__version__ = "0.1.0"

from . import autodiff
from .autodiff import Tensor

__all__ = ["autodiff", "Tensor", "__version__"]
