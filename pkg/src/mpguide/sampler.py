"""Seed-chain importance sampling and the chain estimator.

Seeds come from a one-sample mixture of the initializer (uniform first vertex
on the specular surfaces, Russian-roulette length law) and the learned leaf
distribution, blended with weight alpha.  A found chain contributes
T * k / P(n), where k counts independent trials, with n held fixed, until the
same chain is found again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _layout as L
from . import _pycore as py
from ._backend import get_backend
from .chain import Configuration, SpecularChain
from .params import build_params, for_backend


@dataclass(frozen=True)
class SeedDraw:
    n: int
    types: tuple  # empty when the deduction failed before any vertex
    omega: np.ndarray
    component: str  # "initializer" | "learned"
    p_length: float  # blended P(n)
    p_direction: float  # blended density of (omega, tau) given n, per steradian
    chain: Optional[SpecularChain]  # None when the deduction failed

    @property
    def ok(self) -> bool:
        return self.chain is not None


@dataclass(frozen=True)
class ChainEstimate:
    chain: SpecularChain
    throughput: np.ndarray
    trials: int
    p_length: float

    @property
    def recip(self) -> float:
        return self.trials / self.p_length

    @property
    def contribution(self) -> np.ndarray:
        return self.throughput * self.recip


def p0_length(n: int, scene) -> float:
    prm = build_params(scene)
    return float(prm[L.P_P0 + n]) if 1 <= n <= L.N_MAX else 0.0


def _specular_hits(scene, x_d, omega):
    """All (t, shape id) where the ray meets a specular surface, in order."""
    ks = scene.kernel("python")
    o = tuple(map(float, x_d))
    d = tuple(map(float, omega))
    hits = []
    for sid in scene.specular_ids:
        sh = ks.shapes[int(sid)]
        t = py._hit_shape(sh, o, d, ks.eps, math.inf)
        while t > 0.0:
            hits.append((t, int(sid)))
            if sh[L.SH_KIND] == L.KIND_QUAD:
                break
            t = py._hit_shape(sh, o, d, t * (1.0 + 1e-12) + 1e-12, math.inf)
    return sorted(hits)


def initializer_direction_pdf(scene, x_d, omega) -> float:
    """Solid-angle density of omega = normalize(x_1 - x_D), x_1 uniform by area.

    Every specular surface point on the ray contributes d^2 / (A |cos|).
    """
    if not scene.has_specular:
        return 0.0
    ks = scene.kernel("python")
    omega = np.asarray(omega, dtype=float)
    total = 0.0
    for t, sid in _specular_hits(scene, x_d, omega):
        p = np.asarray(x_d, float) + t * omega
        nrm = np.array(py._normalize(py.shape_normal(ks, sid, tuple(p))))
        c = abs(float(nrm @ omega))
        if c > 0.0:
            total += t * t / (scene.specular_area * c)
    return total


def _type_probability(scene, chain: SpecularChain) -> float:
    """Probability the initializer assigns to the chain's type string (1/2 per dielectric)."""
    p = 1.0
    for sid in chain.shape_ids:
        if scene.materials[scene.shapes[sid].material].kind == "dielectric":
            p *= 0.5
    return p


def _guide_parts(guide, x_d, x_l):
    if guide is None:
        return None, -1
    return guide, guide.leaf(x_d, x_l)


def seed_density(scene, guide, config: Configuration, n: int, chain: SpecularChain,
                 alpha: float | None = None) -> tuple:
    """Blended (P(n), p(omega, tau | n)) of a seed chain under the sampler."""
    a = scene.settings.alpha if alpha is None else alpha
    omega = chain.first_direction(config.x_d)
    p0n = p0_length(n, scene)
    p0d = initializer_direction_pdf(scene, config.x_d, omega) * _type_probability(scene, chain)
    g, leaf = _guide_parts(guide, config.x_d, config.x_l)
    if g is None:
        return p0n, p0d
    dist = g.distributions[leaf]
    if dist.empty:
        return p0n, p0d
    p_n = a * p0n + (1.0 - a) * dist.p_n[n]
    if dist.p_n[n] <= 0.0:
        return p_n, p0d
    bits = chain.bits
    pt = dist.tau_probability(n, bits)
    pe = pt * dist.mixture_pdf(n, bits, omega) if pt > 0.0 else 0.0
    return p_n, a * p0d + (1.0 - a) * pe


def _draw(scene, guide, config, rng, n, prm, backend):
    mod = get_backend(backend)
    g, leaf = _guide_parts(guide, config.x_d, config.x_l)
    kg = g.kernel(backend) if g is not None else None
    if n is None:
        n, _ = mod.sample_length(kg, leaf, for_backend(prm, mod), rng)
    st, comp, sids, pts, tys, w = mod.draw_seed(scene.kernel(backend), kg, leaf,
                                               tuple(config.x_d.tolist()), int(n),
                                               for_backend(prm, mod), rng)
    chain = SpecularChain(sids, np.array(pts), tys) if st == L.DEDUCE_OK else None
    if chain is not None:
        p_n, p_d = seed_density(scene, guide, config, n, chain, prm[L.P_ALPHA])
    else:
        p_n, p_d = float(mod.length_probability(kg, leaf, int(n), for_backend(prm, mod))), 0.0
    return SeedDraw(int(n), tuple(tys), np.array(w), ("initializer", "learned")[comp], p_n, p_d, chain)


def sample_initial(config: Configuration, scene, rng: np.random.Generator, n: int | None = None,
                   backend=None) -> SeedDraw:
    """Initializer draw: n from the length law, x_1 uniform by area, types by coin flips."""
    if not scene.has_specular:
        raise ValueError("scene has no specular surfaces")
    return _draw(scene, None, config, rng, n, build_params(scene), backend)


def sample_seed(config: Configuration, guide, scene, rng: np.random.Generator,
                n: int | None = None, backend=None) -> SeedDraw:
    """Defensive mixture draw; the returned densities blend both components."""
    if not scene.has_specular:
        raise ValueError("scene has no specular surfaces")
    return _draw(scene, guide, config, rng, n, build_params(scene, mode="mpg"), backend)


def sample_admissible(config: Configuration, scene, rng: np.random.Generator, guide=None,
                      mode: str = "mpg", stats: np.ndarray | None = None,
                      backend=None) -> Optional[ChainEstimate]:
    """One draw of the chain estimator; None is the zero-contribution outcome."""
    mod = get_backend(backend)
    prm = build_params(scene, mode=mode, alpha=1.0 if mode == "sms-uniform" else None)
    g = guide if mode == "mpg" else None
    kg = g.kernel(backend) if g is not None else None
    leaf = g.leaf(config.x_d, config.x_l) if g is not None else -1
    st = np.zeros(L.ST_WIDTH) if stats is None else stats
    xd, nd, xl = config.kernel_args()
    r = mod.estimate(scene.kernel(backend), kg, leaf, xd, nd, xl, int(config.emitter),
                     for_backend(prm, mod), rng, st)
    if r is None:
        return None
    _, T, k, pn, n, sids, pts, tys = r
    return ChainEstimate(SpecularChain(sids, np.array(pts), tys), np.array(T), int(k), float(pn))


def selective_active(guide, config: Configuration) -> bool:
    """False for an empty guide or a leaf holding only filtered copies."""
    if guide is None:
        return False
    return guide.selective_active(config.x_d, config.x_l)


def count_trials(trial: Callable[[], bool], k_max: int = 10_000) -> tuple:
    """Run independent trials until one succeeds.

    Returns (k, truncated).  E[k] = 1/p for per-trial success probability p,
    so k is an unbiased estimate of the reciprocal probability unless the cap
    is reached.
    """
    k = 0
    while k < k_max:
        k += 1
        if trial():
            return k, False
    return k, True


def estimate_resampled_length(config: Configuration, scene, rng, guide=None, mode: str = "mpg"):
    """Estimator variant that redraws n in every trial and divides by nothing.

    Used to check that holding n fixed and dividing by P(n) is equivalent.
    Returns the RGB contribution (zeros when no chain is found).
    """
    prm = build_params(scene, mode=mode, alpha=1.0 if mode == "sms-uniform" else None).tolist()
    ks = scene.kernel("python")
    g = guide if mode == "mpg" else None
    kg = g.kernel("python") if g is not None else None
    leaf = g.leaf(config.x_d, config.x_l) if g is not None else -1
    xd, nd, xl = config.kernel_args()
    stats = [0.0] * L.ST_WIDTH
    n, _ = py.sample_length(kg, leaf, prm, rng)
    found = py._attempt(ks, kg, leaf, xd, xl, n, prm, rng, stats)
    if found is None:
        return np.zeros(3)
    sids, pts, tys = found
    st, T, _, pts = py.throughput(ks, sids, pts, tys, xd, nd, xl, int(config.emitter), prm)
    if st != 0 or max(T) <= 0.0:
        return np.zeros(3)

    def trial():
        m, _ = py.sample_length(kg, leaf, prm, rng)
        r = py._attempt(ks, kg, leaf, xd, xl, m, prm, rng, stats)
        return r is not None and py.same_chain(r[1], r[2], pts, tys, prm[L.P_DELTA_SAME])

    k, _ = count_trials(trial, int(prm[L.P_KMAX]))
    return np.array(T) * k


def _batch_args(config, scene, guide, mode, backend, alpha=None):
    mod = get_backend(backend)
    if mode == "sms-uniform":
        alpha = 1.0
    prm = build_params(scene, mode=mode, alpha=alpha)
    g = guide if mode == "mpg" else None
    kg = g.kernel(backend) if g is not None else None
    leaf = g.leaf(config.x_d, config.x_l) if g is not None else -1
    stats = np.zeros(L.ST_WIDTH) if mod.BACKEND == "compiled" else [0.0] * L.ST_WIDTH
    return mod, for_backend(prm, mod), kg, leaf, stats


def estimate_batch(config: Configuration, scene, rng: np.random.Generator, count: int,
                   guide=None, mode: str = "mpg", backend=None) -> tuple:
    """``count`` independent chain estimates at one configuration.

    Returns (contributions of shape (count, 3), stats counters).
    """
    mod, prm, kg, leaf, stats = _batch_args(config, scene, guide, mode, backend)
    xd, nd, xl = config.kernel_args()
    contribs, _ = mod.estimate_many(scene.kernel(backend), kg, leaf, xd, nd, xl,
                                    int(config.emitter), prm, rng, stats, int(count))
    return np.asarray(contribs, dtype=float).reshape(-1, 3), np.asarray(stats, dtype=float)


def find_batch(config: Configuration, scene, rng: np.random.Generator, count: int,
               guide=None, mode: str = "mpg", alpha: float | None = None,
               backend=None) -> list:
    """First-attempt chains of ``count`` draws as (n, type bits, first vertex)."""
    mod, prm, kg, leaf, stats = _batch_args(config, scene, guide, mode, backend, alpha)
    xd, _, xl = config.kernel_args()
    return [(int(n), int(b), np.asarray(p, float))
            for n, b, p in mod.find_many(scene.kernel(backend), kg, leaf, xd, xl, prm, rng,
                                         stats, int(count))]
