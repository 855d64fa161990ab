"""Progressive training and rendering around a unidirectional path tracer.

Every non-specular vertex of a camera path gets ordinary next-event
estimation plus one chain connection to a separately sampled emitter point.
Emitter hits reached through specular vertices after a non-specular one are
left to the chain estimator (and counted by the path tracer only in ``pt``
mode or where selective activation switched the estimator off).
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _layout as L
from ._backend import get_backend
from .guiding import GuideModel, RecordBuffer
from .params import build_params, for_backend

TILE = 8
RENDER_ITERATION = 10_000  # RNG stream id of the render pass


@dataclass(frozen=True)
class TrainSchedule:
    """Sample budget split into doubling training iterations and a render pass."""

    total_spp: int
    fraction: float = 0.3

    def __post_init__(self):
        if self.total_spp < 1:
            raise ValueError("spp must be at least 1")
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError("train fraction must lie in [0, 1)")

    @property
    def training_spp(self) -> int:
        return int(math.floor(self.total_spp * self.fraction + 1e-9))

    @property
    def render_spp(self) -> int:
        return self.total_spp - self.training_spp

    @property
    def iterations(self) -> list:
        """Sizes double; once an iteration ends with at least half the training
        budget spent, it is extended to the end of the training budget."""
        budget = self.training_spp
        sizes, spent, size = [], 0, 1
        while spent < budget:
            it = min(size, budget - spent)
            spent += it
            if 2 * spent >= budget:
                it += budget - spent
                spent = budget
            sizes.append(it)
            size *= 2
        return sizes


class Film:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.sum = np.zeros((height, width, 3))
        self.chain_sum = np.zeros((height, width, 3))
        self.count = np.zeros((height, width), dtype=np.int64)

    def splat(self, pixels, rgb, chain_rgb, spp):
        px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        self.sum[px[:, 1], px[:, 0]] += rgb
        self.chain_sum[px[:, 1], px[:, 0]] += chain_rgb
        self.count[px[:, 1], px[:, 0]] += spp

    def image(self) -> np.ndarray:
        c = np.maximum(self.count, 1)[..., None]
        return self.sum / c

    def chain_image(self) -> np.ndarray:
        c = np.maximum(self.count, 1)[..., None]
        return self.chain_sum / c


def camera_vector(scene) -> np.ndarray:
    cam = scene.camera
    pos = np.asarray(cam.position, float)
    fwd = np.asarray(cam.look_at, float) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(cam.up, float))
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    w, h = cam.resolution
    return np.concatenate([pos, fwd, right, up,
                           [math.tan(math.radians(cam.fov) * 0.5), w / h, float(w), float(h)]])


def tiles(width: int, height: int):
    out = []
    for ty in range(0, height, TILE):
        for tx in range(0, width, TILE):
            out.append([(x, y) for y in range(ty, min(ty + TILE, height))
                        for x in range(tx, min(tx + TILE, width))])
    return out


def pixel_rng(seed: int, iteration: int, pixel: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, pixel]))


def default_threads() -> int:
    env = os.environ.get("MPGUIDE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class RunStats:
    counters: np.ndarray = field(default_factory=lambda: np.zeros(L.ST_WIDTH))
    training_spp: int = 0
    render_spp: int = 0
    iterations: list = field(default_factory=list)
    samples_per_iteration: list = field(default_factory=list)
    leaves: int = 0
    train_seconds: float = 0.0
    render_seconds: float = 0.0
    render_counters: np.ndarray = field(default_factory=lambda: np.zeros(L.ST_WIDTH))

    def report(self, extra: Optional[dict] = None) -> str:
        c = self.counters
        rc = self.render_counters
        walks = c[L.ST_WALKS]
        q = rc[L.ST_ACT_QUERIES]
        spec = rc[L.ST_SPEC_TIME]
        items = dict(extra or {})
        items.update({
            "training_spp": self.training_spp,
            "render_spp": self.render_spp,
            "training_iterations": " ".join(map(str, self.iterations)) or "none",
            "subpath_samples": self.samples_per_iteration[-1] if self.samples_per_iteration else 0,
            "subpath_samples_per_iteration": " ".join(map(str, self.samples_per_iteration)) or "none",
            "guide_leaves": self.leaves,
            "paths": int(c[L.ST_PATHS]),
            "chain_estimates": int(c[L.ST_ESTIMATES]),
            "chains_found": int(c[L.ST_FOUND]),
            "walks_attempted": int(walks),
            "walks_converged": int(c[L.ST_WALKS_OK]),
            "walk_success_rate": f"{(c[L.ST_WALKS_OK] / walks if walks else 0.0):.6f}",
            "walks_escaped": int(c[L.ST_ESCAPED]),
            "deduction_failures": int(c[L.ST_DEDUCE_FAIL]),
            "learned_draws": int(c[L.ST_LEARNED]),
            "ggt_failures": int(c[L.ST_GGT_FAIL]),
            "trials": int(c[L.ST_TRIALS]),
            "truncations": int(c[L.ST_TRUNCATED]),
            "activation_queries": int(q),
            "activation_rate": f"{(rc[L.ST_ACT_ACTIVE] / q if q else 1.0):.6f}",
            "train_seconds": f"{self.train_seconds:.3f}",
            "render_seconds": f"{self.render_seconds:.3f}",
            "specular_sampling_seconds": f"{spec:.3f}",
            "guide_seconds": f"{rc[L.ST_GUIDE_TIME]:.3f}",
            "guide_share_of_specular": f"{(rc[L.ST_GUIDE_TIME] / spec if spec > 0 else 0.0):.6f}",
            "specular_share_of_render": f"{(spec / self.render_seconds if self.render_seconds > 0 else 0.0):.6f}",
        })
        return "".join(f"{k}: {v}\n" for k, v in items.items())


def _render_pass(scene, guide, prm, spp, iteration, seed, threads, film=None, buffers=None,
                 backend=None):
    """One pass of ``spp`` samples per pixel over all tiles.

    Tiles are independent (per-pixel RNG streams), and their results are
    merged in tile order, so the output does not depend on ``threads``.
    """
    mod = get_backend(backend)
    ks = scene.kernel(backend)
    kg = guide.kernel(backend) if guide is not None else None
    cam = camera_vector(scene)
    w, h = scene.camera.resolution
    p = for_backend(prm, mod)
    cam_arg = cam if mod.BACKEND == "compiled" else cam.tolist()

    def work(tile):
        idx = [y * w + x for x, y in tile]
        rngs = [pixel_rng(seed, iteration, i) for i in idx]
        stats = np.zeros(L.ST_WIDTH)
        if mod.BACKEND == "compiled":
            out, outc, rec = mod.render_pixels(ks, kg, cam_arg, tile, rngs, spp, p, stats)
        else:
            sl = [0.0] * L.ST_WIDTH
            out, outc, rec = mod.render_pixels(ks, kg, cam_arg, tile, rngs, spp, p, sl)
            stats[:] = sl
        return tile, np.asarray(out, float), np.asarray(outc, float), \
            np.asarray(rec, float).reshape(-1, L.REC_WIDTH), stats

    tl = tiles(w, h)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, tl))
    else:
        results = [work(t) for t in tl]
    total = np.zeros(L.ST_WIDTH)
    for tile, out, outc, rec, stats in results:
        if film is not None:
            film.splat(tile, out, outc, spp)
        if buffers is not None:
            buf = RecordBuffer()
            buf.extend_rows(rec)
            buffers.append(buf)
        total += stats
    return total


def _settings(scene, overrides):
    s = scene.settings
    return s.model_copy(update=overrides) if overrides else s


def train(scene, schedule: TrainSchedule, seed: int = 0, threads: int = 1, product=None,
          settings=None, backend=None, stats: RunStats | None = None) -> GuideModel:
    """Doubling training iterations; each rebuild uses only the last iteration's samples."""
    s = settings or scene.settings
    guide = None
    st = stats if stats is not None else RunStats()
    if not scene.has_specular or not scene.emitters:
        st.iterations = []
        return GuideModel.empty(scene.bounds)
    prm = build_params(scene, s, mode="mpg", training=True, selective=False)
    for i, spp in enumerate(schedule.iterations):
        buffers = []  # one per tile, merged in tile order
        t0 = time.perf_counter()
        st.counters += _render_pass(scene, guide, prm, spp, i, seed, threads, None, buffers, backend)
        recs = RecordBuffer.merge(buffers)
        guide = GuideModel.from_scene(scene, recs, s, product=s.product if product is None else product)
        st.train_seconds += time.perf_counter() - t0
        st.iterations.append(spp)
        st.samples_per_iteration.append(len(recs))
    return guide if guide is not None else GuideModel.empty(scene.bounds)


def render(scene, guide, spp: int, seed: int = 0, threads: int = 1, mode: str = "mpg",
           selective=None, settings=None, backend=None, stats: RunStats | None = None,
           timing: bool = True) -> Film:
    """Final pass; training samples are never accumulated into the film."""
    s = settings or scene.settings
    sel = s.selective if selective is None else selective
    alpha = 1.0 if mode == "sms-uniform" else None
    prm = build_params(scene, s, mode=mode, selective=sel and mode == "mpg", timing=timing,
                       alpha=alpha)
    w, h = scene.camera.resolution
    film = Film(w, h)
    st = stats if stats is not None else RunStats()
    g = guide if mode == "mpg" else None
    t0 = time.perf_counter()
    counters = _render_pass(scene, g, prm, spp, RENDER_ITERATION, seed, threads, film, None, backend)
    st.render_seconds += time.perf_counter() - t0
    st.counters += counters
    st.render_counters += counters
    st.render_spp += spp
    return film


@dataclass
class RunResult:
    film: Film
    guide: Optional[GuideModel]
    stats: RunStats


def run(scene, spp: int | None = None, mode: str | None = None, seed: int | None = None,
        threads: int | None = None, train_fraction: float | None = None, product=None,
        selective=None, backend=None) -> RunResult:
    """Train (mpg only) and render with the scene's settings, overridden as given."""
    s = scene.settings
    overrides = {k: v for k, v in dict(spp=spp, mode=mode, seed=seed, train_fraction=train_fraction,
                                        product=product, selective=selective).items()
                 if v is not None}
    s = _settings(scene, overrides)
    nthreads = default_threads() if threads is None else threads
    stats = RunStats()
    if s.mode == "oracle-probe":
        from .oracle import probe_film
        t0 = time.perf_counter()
        film = probe_film(scene, backend=backend)
        stats.render_seconds = time.perf_counter() - t0
        return RunResult(film, None, stats)
    if s.mode == "mpg":
        sched = TrainSchedule(s.spp, s.train_fraction)
        stats.training_spp = sched.training_spp
        guide = train(scene, sched, s.seed, nthreads, s.product, s, backend, stats)
        stats.leaves = guide.tree.leaf_count
        film = render(scene, guide, sched.render_spp, s.seed, nthreads, "mpg", s.selective, s,
                      backend, stats)
        return RunResult(film, guide, stats)
    film = render(scene, None, s.spp, s.seed, nthreads, s.mode, False, s, backend, stats)
    return RunResult(film, None, stats)


def train_probe(scene, config, iterations, seed: int = 0, product=None, backend=None):
    """Guide trained on a single configuration with ``iterations`` estimate counts.

    Each iteration runs the given number of estimates at ``config`` with the
    previous guide and rebuilds from their records.  Returns (guide, records
    of the last iteration).
    """
    mod = get_backend(backend)
    s = scene.settings
    prm = build_params(scene, mode="mpg", training=True)
    ks = scene.kernel(backend)
    xd, nd, xl = config.kernel_args()
    guide = None
    recs = None
    for i, count in enumerate(iterations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 77]))
        kg = guide.kernel(backend) if guide is not None else None
        leaf = guide.leaf(config.x_d, config.x_l) if guide is not None else -1
        stats = np.zeros(L.ST_WIDTH) if mod.BACKEND == "compiled" else [0.0] * L.ST_WIDTH
        _, rows = mod.estimate_many(ks, kg, leaf, xd, nd, xl, int(config.emitter),
                                    for_backend(prm, mod), rng, stats, int(count))
        buf = RecordBuffer()
        buf.extend_rows(np.asarray(rows, float).reshape(-1, L.REC_WIDTH))
        recs = buf.array()
        guide = GuideModel.from_scene(scene, recs, s, product=s.product if product is None else product)
    return guide, recs
