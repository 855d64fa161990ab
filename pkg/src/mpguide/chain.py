"""Specular chains: deduction, constraint residuals and sub-path throughput.

A chain x_1..x_n connects a non-specular receiver x_D to an emitter point x_L
through purely specular vertices.  Its type string uses ``R`` for reflection
and ``T`` for refraction; the bit form used by the kernels stores vertex i in
bit i with T = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _layout as L
from ._backend import get_backend
from .params import build_params, for_backend

N_MAX = L.N_MAX
_DEDUCE_REASONS = {L.DEDUCE_MISS: "miss", L.DEDUCE_TIR: "total-internal-reflection",
                   L.DEDUCE_MISMATCH: "type-mismatch"}


def parse_types(tau) -> tuple:
    """'RT' -> (0, 1); integer sequences pass through."""
    if isinstance(tau, str):
        if not tau or any(c not in "RT" for c in tau):
            raise ValueError(f"type string must be a non-empty word over R/T, got {tau!r}")
        out = tuple(0 if c == "R" else 1 for c in tau)
    else:
        out = tuple(int(t) for t in tau)
        if not out or any(t not in (0, 1) for t in out):
            raise ValueError("type codes must be 0 (R) or 1 (T)")
    if len(out) > N_MAX:
        raise ValueError(f"chain length {len(out)} exceeds {N_MAX}")
    return out


def format_types(types) -> str:
    return "".join("RT"[t] for t in types)


def types_to_bits(types) -> int:
    bits = 0
    for i, t in enumerate(types):
        bits |= int(t) << i
    return bits


def bits_to_types(bits: int, n: int) -> tuple:
    return tuple((bits >> i) & 1 for i in range(n))


@dataclass(frozen=True)
class SpecularChain:
    shape_ids: tuple
    points: np.ndarray  # (n, 3)
    types: tuple  # 0 = R, 1 = T

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "shape_ids", tuple(int(s) for s in self.shape_ids))
        object.__setattr__(self, "types", parse_types(self.types))
        if not (len(self.shape_ids) == len(pts) == len(self.types)):
            raise ValueError("shape ids, points and types must have equal length")

    @property
    def n(self) -> int:
        return len(self.types)

    @property
    def type_string(self) -> str:
        return format_types(self.types)

    @property
    def bits(self) -> int:
        return types_to_bits(self.types)

    def point_tuples(self):
        return [tuple(p) for p in self.points.tolist()]

    def first_direction(self, x_d) -> np.ndarray:
        d = self.points[0] - np.asarray(x_d, float)
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class DeductionFailure:
    reason: str  # "miss" | "total-internal-reflection" | "type-mismatch"

    def __bool__(self):
        return False


@dataclass(frozen=True)
class Configuration:
    """A receiver point with its normal and an emitter point."""

    x_d: np.ndarray
    n_d: np.ndarray
    x_l: np.ndarray
    emitter: int = 0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for name in ("x_d", "n_d", "x_l"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = np.linalg.norm(self.n_d)
        object.__setattr__(self, "n_d", self.n_d / n)

    def kernel_args(self):
        return tuple(self.x_d.tolist()), tuple(self.n_d.tolist()), tuple(self.x_l.tolist())


def _t3(v):
    return tuple(float(x) for x in v)


def deduce_chain(x_d, omega_d, tau, scene, backend=None):
    """Trace |tau| specular vertices from x_D along omega_D.

    Returns a SpecularChain or a falsy DeductionFailure.
    """
    types = parse_types(tau)
    omega = np.asarray(omega_d, dtype=float)
    if abs(np.linalg.norm(omega) - 1.0) > 1e-9:
        raise ValueError("omega_d must be unit length")
    mod = get_backend(backend)
    st, sids, pts, tys, _ = mod.deduce(scene.kernel(backend), _t3(x_d), _t3(omega), list(types),
                                      len(types), None)
    if st != L.DEDUCE_OK:
        return DeductionFailure(_DEDUCE_REASONS[st])
    return SpecularChain(tuple(sids), np.array(pts), tuple(tys))


def vertex_frames(chain: SpecularChain, scene, backend=None):
    mod = get_backend(backend)
    ks = scene.kernel(backend)
    return [mod.shape_frame(ks, s, p) for s, p in zip(chain.shape_ids, chain.point_tuples())]


def constraint_residual(chain: SpecularChain, x_d, x_l, scene, backend=None) -> np.ndarray:
    """Per-vertex tangential components of the normalised generalised half-vector.

    With wi, wo the unit directions from x_i toward its two neighbours, the
    half-vector is wi + wo for reflection and -(eta_i wi + eta_o wo) for
    refraction, where the indices follow the side wi lies on.  Raises
    ValueError for coincident neighbouring vertices.
    """
    mod = get_backend(backend)
    res, _ = mod.spec_residual(scene.kernel(backend), list(chain.shape_ids), chain.point_tuples(),
                               vertex_frames(chain, scene, backend), list(chain.types),
                               _t3(x_d), _t3(x_l))
    if res is None:
        raise ValueError("degenerate chain: coincident vertices")
    return np.array(res)


def sidedness_ok(chain: SpecularChain, x_d, x_l, scene) -> bool:
    """Reflections keep both neighbours on one side, refractions separate them."""
    mod = get_backend()
    res, ok = mod.spec_residual(scene.kernel(), list(chain.shape_ids), chain.point_tuples(),
                                vertex_frames(chain, scene), list(chain.types), _t3(x_d), _t3(x_l))
    return res is not None and ok


def is_admissible(chain, x_d, x_l, scene, tol: float = 1e-6) -> bool:
    try:
        r = constraint_residual(chain, x_d, x_l, scene)
    except ValueError:
        return False
    return bool(np.max(np.abs(r)) < tol) and sidedness_ok(chain, x_d, x_l, scene)


def specular_kappa(chain: SpecularChain, x_d, scene, backend=None) -> np.ndarray:
    """Product of Fresnel terms (dielectrics) and reflectances (conductors)."""
    mod = get_backend(backend)
    return np.array(mod.kappa(scene.kernel(backend), list(chain.shape_ids), chain.point_tuples(),
                              list(chain.types), _t3(x_d)))


class GGTError(RuntimeError):
    """The chain could not be re-converged for the finite-difference Jacobian."""


def _throughput_raw(chain, config: Configuration, scene, backend=None, delta=None):
    mod = get_backend(backend)
    prm = build_params(scene)
    if delta is not None:
        prm[L.P_FD_DELTA] = delta
    xd, nd, xl = config.kernel_args()
    st, T, G, pts = mod.throughput(scene.kernel(backend), list(chain.shape_ids), chain.point_tuples(),
                                   list(chain.types), xd, nd, xl, int(config.emitter),
                                   for_backend(prm, mod))
    if st != 0:
        raise GGTError("re-convergence failed while differentiating the chain")
    return np.array(T), G, SpecularChain(chain.shape_ids, np.array(pts), chain.types)


def ggt(chain: SpecularChain, config: Configuration, scene, delta: Optional[float] = None,
        backend=None) -> float:
    """Generalised geometric term cos(theta_D) |d omega_D / d A_L| V.

    The Jacobian is measured by central differences: x_L is moved by
    +-delta along two tangent directions of the emitter (for point lights, of
    the plane orthogonal to the last segment), the chain is re-converged, and
    the area spanned by the first-direction derivatives is taken.  Zero when
    any segment is blocked or the geometry faces away.
    """
    return _throughput_raw(chain, config, scene, backend, delta)[1]


def throughput(chain: SpecularChain, config: Configuration, scene, backend=None) -> np.ndarray:
    """kappa * G * L_o as RGB (intensity replaces radiance for point lights)."""
    return _throughput_raw(chain, config, scene, backend)[0]


def direct_ggt(x_d, n_d, x_l, n_l) -> float:
    """Unoccluded geometry term of a direct connection: cos_D cos_L / d^2."""
    d = np.asarray(x_l, float) - np.asarray(x_d, float)
    dist2 = float(d @ d)
    w = d / np.sqrt(dist2)
    return max(0.0, float(np.dot(n_d, w))) * max(0.0, float(-np.dot(n_l, w))) / dist2
