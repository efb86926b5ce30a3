"""Mini-Splatting on a CPU tile rasterizer: densification, simplification and compression of 3D Gaussians."""

from .core import Camera, GaussianSet
from .raster import RenderOptions, RenderOutputs, render
from .pipeline import TrainConfig, run_pipeline
from .scene import SceneBundle, generate_synthetic, load_scene, save_scene

__all__ = ["Camera", "GaussianSet", "RenderOptions", "RenderOutputs", "render", "TrainConfig",
           "run_pipeline", "SceneBundle", "generate_synthetic", "load_scene", "save_scene"]
__version__ = "0.1.0"
