"""Scene description, TOML loader, visibility and emitter sampling.

A scene file has the sections ``[camera]``, ``[integrator]`` (optional),
``[[materials]]``, ``[[shapes]]`` and ``[[emitters]]``.  See
``scenes/schema_example.toml`` for an annotated example.  All lengths are in
scene units (meters); radiance and intensity are linear RGB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _layout as L
from ._backend import get_backend

Vec3 = tuple[float, float, float]


class SceneError(ValueError):
    """Raised for unreadable or invalid scene descriptions."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraSpec(_Strict):
    position: Vec3
    look_at: Vec3
    up: Vec3 = (0.0, 1.0, 0.0)
    fov: float = Field(40.0, gt=0.0, lt=180.0, description="vertical field of view in degrees")
    resolution: tuple[int, int] = (64, 64)

    @model_validator(mode="after")
    def _check(self):
        if min(self.resolution) < 1:
            raise ValueError("camera resolution must be positive")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(fwd) == 0.0:
            raise ValueError("camera look_at equals position")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12:
            raise ValueError("camera up is parallel to the view direction")
        return self


class IntegratorSpec(_Strict):
    spp: int = Field(64, ge=1)
    train_fraction: float = Field(0.3, ge=0.0, lt=1.0)
    mode: Literal["mpg", "sms-uniform", "pt", "oracle-probe"] = "mpg"
    seed: int = 0
    max_depth: int = Field(15, ge=1)
    rr_start: int = Field(5, ge=1)
    rr_gamma: float = Field(0.95, gt=0.0, le=1.0)
    alpha: float = Field(0.5, gt=0.0, le=1.0)
    max_iterations: int = Field(20, ge=1)
    tol: float = Field(1e-6, gt=0.0)
    step_clamp: float = Field(0.5, gt=0.0)
    beta0: float = Field(1.0, gt=0.0, le=1.0)
    growth: float = Field(2.0, ge=1.0)
    k_max: int = Field(10_000, ge=1)
    retries: int = Field(4, ge=1)
    kappa_min: float = Field(10.0, gt=0.0)
    kappa_max: float = Field(1e6, gt=0.0)
    filter_epsilon: float = Field(0.1, ge=0.0, lt=0.5)
    product: bool = False
    selective: bool = False


class MaterialSpec(_Strict):
    name: str
    type: Literal["diffuse", "glossy", "dielectric", "conductor"]
    ior: Optional[float] = None
    albedo: Optional[Vec3] = None
    reflectance: Optional[Vec3] = None
    roughness: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.type == "dielectric":
            if self.ior is None or not (1.0 < self.ior <= 3.0):
                raise ValueError("dielectric IOR out of range (1, 3]")
        elif self.ior is not None:
            raise ValueError(f"ior is only valid for dielectrics, not {self.type}")
        if self.type in ("diffuse", "glossy"):
            if self.albedo is None:
                raise ValueError(f"{self.type} material needs an albedo")
            if any(not (0.0 <= a <= 1.0) for a in self.albedo):
                raise ValueError("albedo components must lie in [0, 1]")
        elif self.albedo is not None:
            raise ValueError("albedo is only valid for diffuse and glossy materials")
        if self.type == "glossy":
            if self.roughness is None or not (0.0 < self.roughness <= 1.0):
                raise ValueError("glossy roughness out of range (0, 1]")
        elif self.roughness is not None:
            raise ValueError("roughness is only valid for glossy materials")
        if self.type == "conductor":
            refl = self.reflectance if self.reflectance is not None else (1.0, 1.0, 1.0)
            if any(not (0.0 <= r <= 1.0) for r in refl):
                raise ValueError("reflectance components must lie in [0, 1]")
        elif self.reflectance is not None:
            raise ValueError("reflectance is only valid for conductors")
        return self


class QuadSpec(_Strict):
    type: Literal["quad"]
    material: str
    center: Vec3
    u_axis: Vec3
    v_axis: Vec3
    half_size: tuple[float, float]

    @model_validator(mode="after")
    def _check(self):
        if min(self.half_size) <= 0.0:
            raise ValueError("quad extents must be positive")
        _check_axes(self.u_axis, self.v_axis)
        return self


class SphereSpec(_Strict):
    type: Literal["sphere"]
    material: str
    center: Vec3
    radius: float

    @model_validator(mode="after")
    def _check(self):
        if self.radius <= 0.0:
            raise ValueError("sphere radius must be positive")
        return self


class SlabSpec(_Strict):
    """Two parallel quads with outward normals, ``thickness`` apart."""

    type: Literal["slab"]
    material: str
    center: Vec3
    u_axis: Vec3
    v_axis: Vec3
    half_size: tuple[float, float]
    thickness: float

    @model_validator(mode="after")
    def _check(self):
        if min(self.half_size) <= 0.0:
            raise ValueError("slab extents must be positive")
        if self.thickness <= 0.0:
            raise ValueError("slab thickness must be positive")
        _check_axes(self.u_axis, self.v_axis)
        return self


class PointLightSpec(_Strict):
    type: Literal["point"]
    position: Vec3
    intensity: Vec3

    @model_validator(mode="after")
    def _check(self):
        if min(self.intensity) < 0.0:
            raise ValueError("intensity components must be non-negative")
        return self


class SphereLightSpec(_Strict):
    type: Literal["sphere"]
    center: Vec3
    radius: float
    radiance: Vec3

    @model_validator(mode="after")
    def _check(self):
        if self.radius <= 0.0:
            raise ValueError("area light radius must be positive")
        if min(self.radiance) < 0.0:
            raise ValueError("radiance components must be non-negative")
        return self


ShapeSpec = Annotated[Union[QuadSpec, SphereSpec, SlabSpec], Field(discriminator="type")]
EmitterSpec = Annotated[Union[PointLightSpec, SphereLightSpec], Field(discriminator="type")]


class SceneSpec(_Strict):
    camera: CameraSpec
    integrator: IntegratorSpec = IntegratorSpec()
    materials: list[MaterialSpec]
    shapes: list[ShapeSpec]
    emitters: list[EmitterSpec] = []

    @model_validator(mode="after")
    def _check(self):
        names = [m.name for m in self.materials]
        if len(set(names)) != len(names):
            raise ValueError("duplicate material names")
        for s in self.shapes:
            if s.material not in names:
                raise ValueError(f"shape references unknown material {s.material!r}")
        if not self.shapes:
            raise ValueError("scene has no shapes")
        return self


def _check_axes(u, v):
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("quad axes must be non-zero")
    if abs(np.dot(u, v)) > 1e-9 * nu * nv:
        raise ValueError("quad axes must be orthogonal")


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# runtime scene

@dataclass(frozen=True)
class Shape:
    kind: str  # "quad" | "sphere"
    material: int
    center: np.ndarray
    u_axis: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_axis: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_size: tuple = (0.0, 0.0)
    radius: float = 0.0

    @property
    def normal(self):
        return np.cross(self.u_axis, self.v_axis)

    @property
    def area(self):
        if self.kind == "quad":
            return 4.0 * self.half_size[0] * self.half_size[1]
        return 4.0 * math.pi * self.radius ** 2

    def bounds(self):
        if self.kind == "sphere":
            return self.center - self.radius, self.center + self.radius
        corners = [self.center + su * self.half_size[0] * self.u_axis + sv * self.half_size[1] * self.v_axis
                   for su in (-1, 1) for sv in (-1, 1)]
        return np.min(corners, axis=0), np.max(corners, axis=0)


@dataclass(frozen=True)
class Material:
    name: str
    kind: str
    ior: float = 1.0
    color: tuple = (1.0, 1.0, 1.0)
    roughness: float = 0.0

    @property
    def specular(self):
        return self.kind in ("dielectric", "conductor")


@dataclass(frozen=True)
class Emitter:
    kind: str  # "point" | "sphere"
    position: np.ndarray
    radius: float
    emission: tuple  # intensity for points, radiance for spheres


class Scene:
    """Immutable scene with packed arrays for the kernels."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.camera = spec.camera
        self.settings = spec.integrator
        mat_index = {m.name: i for i, m in enumerate(spec.materials)}
        self.materials = []
        for m in spec.materials:
            if m.type == "dielectric":
                self.materials.append(Material(m.name, m.type, ior=m.ior))
            elif m.type == "conductor":
                self.materials.append(Material(m.name, m.type, color=tuple(m.reflectance or (1.0, 1.0, 1.0))))
            else:
                self.materials.append(Material(m.name, m.type, color=tuple(m.albedo),
                                               roughness=m.roughness or 0.0))
        shapes = []
        for s in spec.shapes:
            mid = mat_index[s.material]
            if s.type == "sphere":
                shapes.append(Shape("sphere", mid, np.asarray(s.center, float), radius=float(s.radius)))
                continue
            u = _unit(s.u_axis)
            v = _unit(s.v_axis)
            c = np.asarray(s.center, float)
            if s.type == "quad":
                shapes.append(Shape("quad", mid, c, u, v, tuple(s.half_size)))
            else:
                n = np.cross(u, v)
                h = 0.5 * s.thickness
                shapes.append(Shape("quad", mid, c + h * n, u, v, tuple(s.half_size)))
                shapes.append(Shape("quad", mid, c - h * n, u, -v, tuple(s.half_size)))
        self.shapes = tuple(shapes)
        self.emitters = tuple(
            Emitter("point", np.asarray(e.position, float), 0.0, tuple(e.intensity)) if e.type == "point"
            else Emitter("sphere", np.asarray(e.center, float), float(e.radius), tuple(e.radiance))
            for e in spec.emitters)

        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for s in self.shapes:
            a, b = s.bounds()
            lo, hi = np.minimum(lo, a), np.maximum(hi, b)
        for e in self.emitters:
            lo = np.minimum(lo, e.position - e.radius)
            hi = np.maximum(hi, e.position + e.radius)
        self.bounds = (lo, hi)
        self.scale = float(np.linalg.norm(hi - lo))
        self.eps = 1e-4 * self.scale

        self.shape_array = self._pack_shapes()
        self.material_array = self._pack_materials()
        self.emitter_array = self._pack_emitters()
        self.specular_ids = np.array([i for i, s in enumerate(self.shapes)
                                      if self.materials[s.material].specular], dtype=np.int64)
        areas = np.array([self.shapes[i].area for i in self.specular_ids])
        self.specular_area = float(areas.sum())
        cdf = np.cumsum(areas) / self.specular_area if len(areas) else np.zeros(0)
        if len(cdf):
            cdf[-1] = 1.0
        self.specular_cdf = cdf
        self._kernels = {}

    # -- packing ----------------------------------------------------------
    def _pack_shapes(self):
        arr = np.zeros((len(self.shapes), L.SH_WIDTH))
        for i, s in enumerate(self.shapes):
            row = arr[i]
            row[L.SH_MAT] = s.material
            row[L.SH_C:L.SH_C + 3] = s.center
            row[L.SH_AREA] = s.area
            if s.kind == "quad":
                row[L.SH_KIND] = L.KIND_QUAD
                row[L.SH_EU:L.SH_EU + 3] = s.u_axis
                row[L.SH_EV:L.SH_EV + 3] = s.v_axis
                row[L.SH_HU], row[L.SH_HV] = s.half_size
                row[L.SH_N:L.SH_N + 3] = s.normal
            else:
                row[L.SH_KIND] = L.KIND_SPHERE
                row[L.SH_RAD] = s.radius
                row[L.SH_CURV] = 1.0 / s.radius
        return arr

    def _pack_materials(self):
        arr = np.zeros((len(self.materials), L.MT_WIDTH))
        cls = {"diffuse": L.DIFFUSE, "glossy": L.GLOSSY, "dielectric": L.DIELECTRIC,
               "conductor": L.CONDUCTOR}
        for i, m in enumerate(self.materials):
            arr[i, L.MT_CLASS] = cls[m.kind]
            arr[i, L.MT_IOR] = m.ior
            arr[i, L.MT_COL:L.MT_COL + 3] = m.color
            arr[i, L.MT_ROUGH] = m.roughness
        return arr

    def _pack_emitters(self):
        arr = np.zeros((len(self.emitters), L.EM_WIDTH))
        for i, e in enumerate(self.emitters):
            arr[i, L.EM_KIND] = L.EMIT_POINT if e.kind == "point" else L.EMIT_SPHERE
            arr[i, L.EM_POS:L.EM_POS + 3] = e.position
            arr[i, L.EM_RAD] = e.radius
            arr[i, L.EM_LE:L.EM_LE + 3] = e.emission
        return arr

    def kernel(self, backend=None):
        """Kernel-side scene object for ``backend`` (default: the active one)."""
        mod = get_backend(backend)
        key = mod.BACKEND
        if key not in self._kernels:
            self._kernels[key] = mod.KScene(self.shape_array, self.material_array, self.emitter_array,
                                            self.specular_ids, self.specular_cdf, self.scale)
        return self._kernels[key]

    # -- queries ----------------------------------------------------------
    def visible(self, a, b, backend=None) -> bool:
        """True iff the open segment (a, b), shrunk by eps at both ends, is unblocked.

        Area emitters count as occluders as well as shapes.
        """
        mod = get_backend(backend)
        return not mod.occluded(self.kernel(backend), tuple(map(float, a)), tuple(map(float, b)))

    def sample_emitter(self, rng: np.random.Generator, backend=None):
        """Uniform emitter choice, then uniform area sampling on sphere lights.

        Returns (point, emitter id, pdf) where pdf is the choice probability
        times the area density (discrete 1/count for point lights).
        """
        if not self.emitters:
            raise SceneError("scene has no emitters")
        mod = get_backend(backend)
        eid, p, pdf = mod.sample_emitter(self.kernel(backend), rng)
        return np.array(p), eid, pdf

    @property
    def has_specular(self):
        return len(self.specular_ids) > 0

    def describe(self):
        return (f"{len(self.shapes)} shapes, {len(self.materials)} materials, "
                f"{len(self.emitters)} emitters, scale {self.scale:.4g}")


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def scene_from_dict(data: dict) -> Scene:
    try:
        spec = SceneSpec.model_validate(data)
    except ValidationError as err:
        raise SceneError(_format_validation(err)) from None
    return Scene(spec)


def load_scene(path) -> Scene:
    """Parse and validate a TOML scene file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise SceneError(f"cannot read scene {path}: {err.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise SceneError(f"{path}: {err}") from None
    try:
        return scene_from_dict(data)
    except SceneError as err:
        raise SceneError(f"{path}: {err}") from None


def bundled_scene(name: str) -> Scene:
    """Load one of the scenes shipped in ``mpguide/scenes``."""
    here = Path(__file__).parent / "scenes"
    return load_scene(here / (name if name.endswith(".toml") else name + ".toml"))
