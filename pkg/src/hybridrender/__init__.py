"""Differentiable deferred rendering with Monte Carlo and spherical-Gaussian shading."""
from .assets import EquirectImage, Mesh, RenderConfig, Scene, icosphere, load_hdr, load_obj, parse_scene, write_image
from .brdf import BrdfParams
from .kernels import BACKEND as KERNEL_BACKEND
from .raster import Camera, GBuffer, rasterize
from .sgalg import SgEnvLight, SgLobe, fit_env_sg
from .shade import RenderOutput, render

__version__ = "0.1.0"

__all__ = [
    "BrdfParams", "Camera", "EquirectImage", "GBuffer", "KERNEL_BACKEND", "Mesh", "RenderConfig", "RenderOutput",
    "Scene", "SgEnvLight", "SgLobe", "fit_env_sg", "icosphere", "load_hdr", "load_obj", "parse_scene", "rasterize",
    "render", "write_image",
]
