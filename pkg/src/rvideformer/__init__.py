"""Raw video denoising transformer with structural re-parameterization."""

from .model import RViDeformer, build_model, fuse_model, preset

__all__ = ["RViDeformer", "build_model", "fuse_model", "preset"]
__version__ = "0.1.0"
