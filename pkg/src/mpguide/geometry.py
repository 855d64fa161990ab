"""Analytic shapes: ray intersection, local frames and scattering operators.

Directions are stored along propagation: an incident direction points from
the previous vertex toward the surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._backend import get_backend


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: Optional[float] = None  # None means the scene epsilon
    t_max: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")

    def at(self, t):
        return self.origin + t * self.direction


@dataclass(frozen=True)
class SurfaceInteraction:
    position: np.ndarray
    shape_id: int
    normal: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    params: tuple  # (u, v) on quads, (theta, phi) on spheres
    shape_operator: np.ndarray  # 2x2 in the (tangent_u, tangent_v) basis
    t: float = 0.0


def orthonormal_basis(n):
    """Branchless frame (t1, t2) with t1 x t2 = n for a unit normal n."""
    t1, t2 = get_backend("python").onb(tuple(map(float, n)))
    return np.array(t1), np.array(t2)


def surface_params(shape, p) -> tuple:
    d = np.asarray(p, float) - shape.center
    if shape.kind == "quad":
        return float(d @ shape.u_axis), float(d @ shape.v_axis)
    d = d / shape.radius
    return math.acos(max(-1.0, min(1.0, d[2]))), math.atan2(d[1], d[0])


def point_from_params(shape, params) -> np.ndarray:
    a, b = params
    if shape.kind == "quad":
        return shape.center + a * shape.u_axis + b * shape.v_axis
    st = math.sin(a)
    return shape.center + shape.radius * np.array([st * math.cos(b), st * math.sin(b), math.cos(a)])


def shape_operator(shape) -> np.ndarray:
    """Derivative of the unit normal in the tangent basis: 0 for quads, I/r for spheres."""
    if shape.kind == "quad":
        return np.zeros((2, 2))
    return np.eye(2) / shape.radius


def interaction_at(scene, shape_id: int, p, t: float = 0.0) -> SurfaceInteraction:
    """Local geometry of ``shape_id`` at the surface point ``p``."""
    shape = scene.shapes[shape_id]
    p = np.asarray(p, dtype=float)
    if shape.kind == "quad":
        n = shape.normal
        tu, tv = shape.u_axis, shape.v_axis
    else:
        n = (p - shape.center) / shape.radius
        n = n / np.linalg.norm(n)
        tu, tv = orthonormal_basis(n)
    return SurfaceInteraction(p, shape_id, n, tu, tv, surface_params(shape, p),
                              shape_operator(shape), t)


def intersect(ray: Ray, scene, specular_only: bool = False, backend=None) -> Optional[SurfaceInteraction]:
    """Nearest hit with t in (t_min, t_max), or None on a miss.

    With ``specular_only`` the diffuse and glossy shapes are transparent.
    """
    mod = get_backend(backend)
    tmin = scene.eps if ray.t_min is None else ray.t_min
    t, sid = mod.intersect(scene.kernel(backend), tuple(ray.origin.tolist()),
                           tuple(ray.direction.tolist()), float(tmin), float(ray.t_max),
                           bool(specular_only))
    if sid < 0:
        return None
    return interaction_at(scene, sid, ray.at(t), t)


def reflect(w_in, n) -> np.ndarray:
    w_in = np.asarray(w_in, float)
    n = np.asarray(n, float)
    return w_in - 2.0 * np.dot(w_in, n) * n


def refract(w_in, n, eta: float) -> Optional[np.ndarray]:
    """Refract through a surface of relative index ``eta`` (inside over outside).

    The side is taken from the sign of w_in . n: a negative value means the
    ray arrives from the outside.  Returns None on total internal reflection.
    """
    if eta <= 0.0:
        raise ValueError("relative index must be positive")
    w_in = np.asarray(w_in, float)
    n = np.asarray(n, float)
    c = float(np.dot(w_in, n))
    if c < 0.0:
        ratio, nn, cos_i = 1.0 / eta, n, -c
    else:
        ratio, nn, cos_i = eta, -n, c
    k = 1.0 - ratio * ratio * (1.0 - cos_i * cos_i)
    if k < 0.0:
        return None
    out = ratio * w_in + (ratio * cos_i - math.sqrt(k)) * nn
    return out / np.linalg.norm(out)


def fresnel_dielectric(cos_i: float, eta_i: float, eta_t: float) -> float:
    """Unpolarised Fresnel reflectance from medium eta_i into eta_t (1 under TIR)."""
    return get_backend("python").fresnel(float(cos_i), float(eta_i), float(eta_t))
