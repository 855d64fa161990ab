"""Command-line front-end: ``mpguide --scene slab.toml --spp 64 -o out.pfm``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ._backend import BACKEND
from .imageio import write_image
from .integrator import default_threads, run
from .scene import SceneError, bundled_scene, load_scene

MODES = ("mpg", "sms-uniform", "pt", "oracle-probe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


@dataclass(frozen=True)
class RunConfig:
    scene: str
    output: str
    spp: Optional[int] = None
    train_fraction: Optional[float] = None
    mode: Optional[str] = None
    seed: Optional[int] = None
    threads: Optional[int] = None
    product: Optional[bool] = None
    selective: Optional[bool] = None
    png: bool = False

    def __post_init__(self):
        if self.spp is not None and self.spp < 1:
            raise ValueError("--spp must be at least 1")
        if self.train_fraction is not None and not 0.0 <= self.train_fraction < 1.0:
            raise ValueError("--train-fraction must lie in [0, 1)")
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.threads is not None and self.threads < 1:
            raise ValueError("--threads must be at least 1")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpguide", description="Render caustics with manifold path guiding.")
    p.add_argument("--scene", required=True,
                   help="scene file (.toml) or the name of a bundled scene")
    p.add_argument("-o", "--output", required=True, help="output PFM path")
    p.add_argument("--spp", type=int, help="total samples per pixel, training included")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int,
                   help="worker threads (default: MPGUIDE_THREADS or the CPU count)")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--product", action=argparse.BooleanOptionalAction, default=None,
                   help="product importance sampling with the receiver BSDF")
    p.add_argument("--selective", action=argparse.BooleanOptionalAction, default=None,
                   help="skip chain sampling where the guide has no real samples")
    p.add_argument("--png", action="store_true", help="also write a tone-mapped PNG")
    return p


def parse_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    try:
        return RunConfig(ns.scene, ns.output, ns.spp, ns.train_fraction, ns.mode, ns.seed,
                         ns.threads, ns.product, ns.selective, ns.png)
    except ValueError as err:
        print(f"mpguide: error: {err}", file=sys.stderr)
        raise SystemExit(1)


def _load(name: str):
    path = Path(name)
    if path.exists() or path.suffix == ".toml":
        return load_scene(path)
    return bundled_scene(name)


def stats_path(output) -> Path:
    out = Path(output)
    return out.with_name(out.stem + ".stats.txt")


def execute(cfg: RunConfig) -> int:
    try:
        scene = _load(cfg.scene)
    except SceneError as err:
        print(f"mpguide: scene error: {err}", file=sys.stderr)
        return 1
    threads = cfg.threads if cfg.threads is not None else default_threads()
    try:
        result = run(scene, cfg.spp, cfg.mode, cfg.seed, threads, cfg.train_fraction, cfg.product,
                     cfg.selective)
    except (AssertionError, ArithmeticError, RuntimeError) as err:
        print(f"mpguide: internal error: {err}", file=sys.stderr)
        return 2
    img = result.film.image()
    if not (img == img).all() or (img < 0).any():
        print("mpguide: internal error: film holds NaN or negative values", file=sys.stderr)
        return 2
    s = scene.settings.model_copy(update={k: v for k, v in dict(
        spp=cfg.spp, mode=cfg.mode, seed=cfg.seed, train_fraction=cfg.train_fraction,
        product=cfg.product, selective=cfg.selective).items() if v is not None})
    extra = {"scene": cfg.scene, "mode": s.mode, "spp": s.spp, "seed": s.seed,
             "train_fraction": s.train_fraction, "product": s.product, "selective": s.selective,
             "threads": threads, "resolution": "{} {}".format(*scene.camera.resolution)}
    extra["backend"] = BACKEND
    try:
        write_image(result.film, cfg.output, cfg.png)
        stats_path(cfg.output).write_text(result.stats.report(extra))
    except OSError as err:
        print(f"mpguide: cannot write output: {err}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
    except SystemExit as ex:
        return int(ex.code or 0)
    return execute(cfg)


if __name__ == "__main__":
    sys.exit(main())
