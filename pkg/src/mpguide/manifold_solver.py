"""Damped Newton walk on the manifold of admissible specular chains."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _layout as L
from ._backend import get_backend
from .chain import SpecularChain, vertex_frames
from .params import build_params, for_backend


class WalkStatus(IntEnum):
    ADMISSIBLE = L.ADMISSIBLE
    NOT_CONVERGED = L.NOT_CONVERGED
    ESCAPED = L.ESCAPED


@dataclass(frozen=True)
class WalkOptions:
    max_iterations: int = 20
    tol: float = 1e-6
    beta0: float = 1.0
    growth: float = 2.0
    step_clamp: float = 0.5  # fraction of the shape size
    beta_min: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.growth < 1.0:
            raise ValueError("growth must be at least 1")
        if not self.step_clamp > 0.0:
            raise ValueError("step_clamp must be positive")

    @classmethod
    def from_settings(cls, settings):
        return cls(settings.max_iterations, settings.tol, settings.beta0, settings.growth,
                   settings.step_clamp)

    def as_overrides(self):
        return dict(max_iterations=self.max_iterations, tol=self.tol, beta0=self.beta0,
                    growth=self.growth, step_clamp=self.step_clamp, beta_min=self.beta_min)


@dataclass(frozen=True)
class WalkResult:
    status: WalkStatus
    chain: SpecularChain
    iterations: int

    @property
    def admissible(self) -> bool:
        return self.status == WalkStatus.ADMISSIBLE


def walk(seed: SpecularChain, x_d, x_l, scene, options: WalkOptions | None = None,
         backend=None) -> WalkResult:
    """Move ``seed`` onto a chain satisfying all half-vector constraints.

    Each iteration solves J dx = -C for tangent offsets of every vertex,
    shrinks the step so no vertex moves more than ``step_clamp`` times its
    shape size, and backtracks by halving beta until the constraint norm
    drops.  Accepted steps grow beta by ``growth`` (capped at 1).  A quad
    vertex leaving its extents ends the walk as ESCAPED.
    """
    opts = options or WalkOptions.from_settings(scene.settings)
    mod = get_backend(backend)
    prm = build_params(scene, **opts.as_overrides())
    st, pts, it = mod.walk(scene.kernel(backend), list(seed.shape_ids), seed.point_tuples(),
                           list(seed.types), tuple(map(float, x_d)), tuple(map(float, x_l)),
                           for_backend(prm, mod), float(opts.tol))
    return WalkResult(WalkStatus(st), SpecularChain(seed.shape_ids, np.array(pts), seed.types), it)


def same_chain(a: SpecularChain, b: SpecularChain, delta: float) -> bool:
    """Equal type strings and every vertex pair closer than ``delta``."""
    return bool(get_backend().same_chain(a.point_tuples(), list(a.types), b.point_tuples(),
                                         list(b.types), float(delta)))


def _system(chain, x_d, x_l, scene, want_jac):
    py = get_backend("python")
    ks = scene.kernel("python")
    frames = vertex_frames(chain, scene, "python")
    return py.newton_system(ks, list(chain.shape_ids), chain.point_tuples(), frames,
                            list(chain.types), tuple(map(float, x_d)), tuple(map(float, x_l)),
                            want_jac)


def constraint(chain: SpecularChain, x_d, x_l, scene) -> np.ndarray:
    """The function driven to zero by the walk.

    Reflection vertices use the slope form t.(a/(a.n) + b/(b.n)) with a, b the
    vectors to the neighbours; refraction vertices the half-vector residual.
    """
    F, _ = _system(chain, x_d, x_l, scene, False)
    if F is None:
        raise ValueError("degenerate chain")
    return np.array(F)


def jacobian(chain: SpecularChain, x_d, x_l, scene, mode: str = "analytic",
             h: float | None = None) -> np.ndarray:
    """2n x 2n block-tridiagonal Jacobian of ``constraint`` in tangent offsets.

    ``mode="fd"`` uses central differences with step ``h`` (default 1e-6 of
    the scene size), which is intended for verification.
    """
    if mode == "analytic":
        _, J = _system(chain, x_d, x_l, scene, True)
        if J is None:
            raise ValueError("degenerate chain")
        return np.array(J)
    if mode != "fd":
        raise ValueError("mode must be 'analytic' or 'fd'")
    step = 1e-6 * scene.scale if h is None else h
    J = get_backend("python").fd_jacobian(scene.kernel("python"), list(chain.shape_ids),
                                          chain.point_tuples(), list(chain.types),
                                          tuple(map(float, x_d)), tuple(map(float, x_l)), step)
    return np.array(J)


def walk_iterates(seed: SpecularChain, x_d, x_l, scene, iterations: int,
                  options: WalkOptions | None = None, backend=None) -> list:
    """Chains after 0, 1, ..., ``iterations`` Newton steps (for convergence studies).

    The walk is deterministic, so each entry reruns it with a larger
    iteration cap and a tolerance that never triggers.  The list stops early
    if the walk escapes or stalls.
    """
    base = options or WalkOptions.from_settings(scene.settings)
    out = [seed]
    for k in range(1, iterations + 1):
        opts = WalkOptions(k, 1e-300, base.beta0, base.growth, base.step_clamp, base.beta_min)
        res = walk(seed, x_d, x_l, scene, opts, backend)
        if res.status == WalkStatus.ESCAPED or res.iterations < k:
            break
        out.append(res.chain)
    return out
