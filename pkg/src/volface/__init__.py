"""One-shot volumetric face avatars on procedural synthetic scenes.

A source image is encoded into a canonical tri-plane neural volume, a
compensation network restores image-specific detail, a blendshape-conditioned
backward deformation field warps target-space points into the canonical
volume, and an emission-absorption renderer plus a learned 2x upsampler
produce the reenacted view. Training is staged with exact freezing
contracts, and everything is verifiable: finite-difference gradient checks,
analytic ground truth, bitwise-reproducible runs.
"""

__version__ = "0.1.0"

from .pipeline import AvatarModel, ModelConfig, build_model, load_model
from .synthdata import DatasetConfig, generate_dataset, load_dataset

__all__ = ["AvatarModel", "ModelConfig", "build_model", "load_model",
           "DatasetConfig", "generate_dataset", "load_dataset", "__version__"]
