"""Simulated fanbeam CT lung nodule detection pipeline.

From-scratch reverse-mode autodiff, a matched differentiable projector
pair, filtered backprojection, an unrolled primal-dual reconstruction
network, a 3D CNN patch detector, and the training/evaluation harness
tying them together.
"""

__version__ = "0.1.0"

from .geometry import (FanbeamGeometry, ImageGrid, MU_WATER, Sinogram, Volume,
                       hu_to_mu, mu_to_hu)
from .projector import back_project, forward_project, geometry_for_grid
from .fbp import fbp
from .noise import add_poisson_noise
from .phantom import Annotation, PhantomSpec, generate_phantom
from .config import RunConfig

__all__ = [
    "FanbeamGeometry", "ImageGrid", "MU_WATER", "Sinogram", "Volume",
    "hu_to_mu", "mu_to_hu", "back_project", "forward_project",
    "geometry_for_grid", "fbp", "add_poisson_noise", "Annotation",
    "PhantomSpec", "generate_phantom", "RunConfig", "__version__",
]
