"""Volumetric OCT retinal layer segmentation with diffusion maps."""

from .volume import PhantomSpec, Volume, generate_phantom, read_volume, write_volume
from .segmentation import PipelineConfig, segment

__version__ = "0.1.0"

__all__ = [
    "PhantomSpec", "Volume", "generate_phantom", "read_volume", "write_volume",
    "PipelineConfig", "segment", "__version__",
]
