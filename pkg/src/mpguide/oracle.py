"""Brute-force ground truth: admissible-chain enumeration and basin maps.

Seeds are placed at the cell centres of a regular grid over the surface
parameters of every specular shape, traced with deduce_chain for each type
string and walked to convergence.  Results are deduplicated with same_chain.
Completeness is checked heuristically: doubling the grid resolution must not
change the number of chains.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _layout as L
from ._backend import get_backend
from .chain import Configuration, GGTError, SpecularChain, format_types, parse_types, throughput
from .params import build_params, for_backend


class OracleError(RuntimeError):
    pass


def type_strings(scene, max_length: int = 4) -> list:
    """All R/T words up to ``max_length``; only R words without dielectrics."""
    has_dielectric = any(m.kind == "dielectric" for m in scene.materials)
    alphabet = "RT" if has_dielectric else "R"
    return ["".join(p) for n in range(1, max_length + 1) for p in itertools.product(alphabet, repeat=n)]


@dataclass(frozen=True)
class BasinMap:
    """Per-cell label of the chain a seed converges to (-1: none)."""

    shape_id: int
    types: tuple
    labels: np.ndarray  # (res, res)
    chains: list  # SpecularChain per label

    @property
    def resolution(self) -> int:
        return self.labels.shape[0]

    def fractions(self) -> np.ndarray:
        counts = np.bincount(self.labels[self.labels >= 0].ravel(), minlength=len(self.chains))
        return counts / self.labels.size


def basin_map(config: Configuration, scene, tau, shape_id: int, resolution: int = 64,
              backend=None) -> BasinMap:
    mod = get_backend(backend)
    types = parse_types(tau)
    prm = build_params(scene)
    labels, chains = mod.basin_grid(scene.kernel(backend), tuple(config.x_d.tolist()),
                                    tuple(config.x_l.tolist()), int(shape_id), int(resolution),
                                    list(types), for_backend(prm, mod), float(scene.settings.tol))
    out = [SpecularChain(sids, np.array(pts), types) for sids, pts in chains]
    return BasinMap(int(shape_id), types, np.array(labels).reshape(resolution, resolution), out)


def _dedup(chains, delta):
    mod = get_backend()
    unique = []
    for c in chains:
        if not any(mod.same_chain(u.point_tuples(), list(u.types), c.point_tuples(), list(c.types), delta)
                   for u in unique):
            unique.append(c)
    return unique


def _collect(config, scene, taus, resolution, backend):
    delta = 1e-4 * scene.scale
    found = []
    for tau in taus:
        for sid in scene.specular_ids:
            found.extend(basin_map(config, scene, tau, int(sid), resolution, backend).chains)
    return _dedup(found, delta)


def enumerate_admissible(config: Configuration, scene, tau_set=None, grid_resolution: int = 64,
                         check_doubling: bool = True, backend=None) -> list:
    """All admissible chains found from grid seeds, with their throughputs.

    Returns a list of (SpecularChain, RGB throughput).  Raises OracleError
    when the chain count changes between ``grid_resolution`` and twice it.
    """
    if grid_resolution < 64 and check_doubling:
        raise ValueError("grid resolution must be at least 64")
    taus = type_strings(scene) if tau_set is None else [format_types(parse_types(t)) for t in tau_set]
    chains = _collect(config, scene, taus, grid_resolution, backend)
    if check_doubling:
        finer = _collect(config, scene, taus, 2 * grid_resolution, backend)
        if len(finer) != len(chains):
            raise OracleError(f"resolution insufficient: {len(chains)} chains at {grid_resolution}, "
                              f"{len(finer)} at {2 * grid_resolution}")
    out = []
    for c in chains:
        try:
            T = throughput(c, config, scene, backend)
        except GGTError as err:
            raise OracleError(f"throughput evaluation failed for {c.type_string}") from err
        out.append((c, T))
    return out


def reference_throughput(config: Configuration, scene, tau_set=None, grid_resolution: int = 64,
                         check_doubling: bool = True, backend=None) -> np.ndarray:
    """Sum of throughputs over every enumerated admissible chain."""
    total = np.zeros(3)
    for _, T in enumerate_admissible(config, scene, tau_set, grid_resolution, check_doubling, backend):
        total += T
    return total


def format_chains(entries) -> str:
    """Structured-text listing of (chain, T) pairs."""
    lines = [f"chains: {len(entries)}"]
    for i, (c, T) in enumerate(entries):
        pts = "; ".join(" ".join(f"{v:.9g}" for v in p) for p in c.points)
        lines.append(f"chain {i}: type={c.type_string} shapes={list(c.shape_ids)} "
                     f"T=[{T[0]:.9g} {T[1]:.9g} {T[2]:.9g}] points=[{pts}]")
    return "\n".join(lines)


def basin_image(bmap: BasinMap) -> np.ndarray:
    """Labels as an RGB float image (label + 1 in every channel, 0 = no chain)."""
    v = (bmap.labels + 1).astype(np.float32)
    return np.repeat(v[..., None], 3, axis=2)


def _probe_point(scene, emitter: int, x_d) -> np.ndarray:
    e = scene.emitters[emitter]
    if e.kind == "point":
        return e.position.copy()
    d = np.asarray(x_d, float) - e.position
    return e.position + e.radius * d / np.linalg.norm(d)


def probe_film(scene, grid_resolution: int = 16, max_length: int = 2, backend=None):
    """Chain-throughput map seen from the camera.

    For the first non-specular surface hit in each pixel centre, sums the
    throughput of every admissible chain (up to ``max_length`` vertices) to
    each emitter's probe point: the light position for point lights, and the
    sphere point facing the receiver for area lights.
    """
    from .geometry import Ray, intersect
    from .integrator import Film, camera_vector

    w, h = scene.camera.resolution
    cam = camera_vector(scene)
    film = Film(w, h)
    taus = type_strings(scene, max_length)
    rgb = np.zeros((h, w, 3))
    for py in range(h):
        for px in range(w):
            sx = (2.0 * (px + 0.5) / w - 1.0) * cam[12] * cam[13]
            sy = (1.0 - 2.0 * (py + 0.5) / h) * cam[12]
            d = cam[3:6] + sx * cam[6:9] + sy * cam[9:12]
            hit = intersect(Ray(cam[0:3], d / np.linalg.norm(d)), scene, backend=backend)
            if hit is None or scene.materials[scene.shapes[hit.shape_id].material].specular:
                continue
            nd = hit.normal if hit.normal @ d < 0.0 else -hit.normal
            for e in range(len(scene.emitters)):
                cfg = Configuration(hit.position, nd, _probe_point(scene, e, hit.position), e)
                for c in _collect(cfg, scene, taus, grid_resolution, backend):
                    try:
                        rgb[py, px] += throughput(c, cfg, scene, backend)
                    except GGTError:
                        pass
    film.sum[:] = rgb
    film.count[:] = 1
    return film
