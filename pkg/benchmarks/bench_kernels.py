"""Compiled vs pure-Python kernels on the same workloads.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Both backends produce identical numbers; only wall time differs.
"""

import argparse
import time
from importlib.resources import files

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from mpguide import available_backends, bundled_scene, scene_from_dict
from mpguide.chain import Configuration, deduce_chain
from mpguide.integrator import run, train_probe
from mpguide.manifold_solver import walk
from mpguide.sampler import estimate_batch


def _scene(name, resolution):
    data = tomllib.loads(files("mpguide.scenes").joinpath(f"{name}.toml").read_text())
    data["camera"]["resolution"] = list(resolution)
    return scene_from_dict(data)


def _walks(backend):
    s = bundled_scene("slab")
    rng = np.random.default_rng(0)
    x_d = np.array([0.4, -0.3, -2.0])
    e = s.emitters[0]
    x_l = e.position + e.radius * np.array([0.0, 0.0, -1.0])
    seeds = []
    while len(seeds) < 200:
        w = x_l - x_d + rng.normal(scale=0.5, size=3)
        c = deduce_chain(x_d, w / np.linalg.norm(w), "TT", s)
        if c:
            seeds.append(c)
    for c in seeds:
        walk(c, x_d, x_l, s, backend=backend)
    return len(seeds)


def _estimates(backend):
    s = bundled_scene("ghost_slab")
    cfg = Configuration([0.5, 0.2, 2.5], [0.0, 0.0, -1.0], [1.0, 0.0, 1.1])
    guide, _ = train_probe(s, cfg, [200, 400], seed=0, backend=backend)
    estimate_batch(cfg, s, np.random.default_rng(1), 2000, guide, backend=backend)
    return 2000


def _render(backend):
    s = _scene("slab", (16, 16))
    run(s, spp=16, seed=0, threads=1, backend=backend)
    return 16 * 16 * 16


WORKLOADS = [("200 manifold walks", _walks), ("2000 chain estimates", _estimates),
             ("16x16 mpg render, 16 spp", _render)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = available_backends()
    print(f"{'workload':28s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for label, fn in WORKLOADS:
        times = []
        for b in backends:
            best = np.inf
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                fn(b)
                best = min(best, time.perf_counter() - t0)
            times.append(best)
        speed = f"{times[-1] / times[0]:9.1f}x" if len(times) > 1 else "        -"
        print(f"{label:28s}" + "".join(f"{t:11.3f}s" for t in times) + speed)


if __name__ == "__main__":
    main()
