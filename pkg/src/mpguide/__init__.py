"""Manifold path guiding for specular chains."""

from ._backend import BACKEND, available_backends, get_backend
from .scene import Scene, SceneError, bundled_scene, load_scene, scene_from_dict

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Scene", "SceneError", "available_backends", "bundled_scene",
    "get_backend", "load_scene", "scene_from_dict",
]
