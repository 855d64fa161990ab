"""Per-leaf seed distributions: length and type tables plus vMF mixtures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .._layout import N_MAX
from .records import decode_code, oct_decode
from .vmf import VMFMixture


@dataclass
class SeedDistribution:
    """P_e(n), P_e(tau | n) and one direction mixture per (n, tau)."""

    p_n: np.ndarray  # index n, length N_MAX + 1
    p_tau: dict = field(default_factory=dict)  # n -> [(bits, prob)] sorted by bits
    mixtures: dict = field(default_factory=dict)  # (n, bits) -> VMFMixture

    @property
    def empty(self) -> bool:
        return not self.p_n.any()

    def tau_probability(self, n: int, bits: int) -> float:
        return dict(self.p_tau.get(n, [])).get(bits, 0.0)

    def mixture_pdf(self, n: int, bits: int, omega) -> float:
        return self.mixtures[(n, bits)].pdf(omega)

    def mixture_sample(self, n: int, bits: int, rng):
        return self.mixtures[(n, bits)].sample(rng)

    def describe(self) -> str:
        parts = [f"P(n={n})={p:.6g}" for n, p in enumerate(self.p_n) if p > 0.0]
        for n, rows in sorted(self.p_tau.items()):
            for bits, p in rows:
                mix = self.mixtures[(n, bits)]
                tau = "".join("RT"[(bits >> i) & 1] for i in range(n))
                parts.append(f"P({tau}|{n})={p:.6g} lobes={len(mix)} "
                             f"kappa=[{mix.kappa.min():.4g},{mix.kappa.max():.4g}]")
        return "; ".join(parts) if parts else "empty"


def great_circle_nearest(dirs: np.ndarray) -> np.ndarray:
    """Angle to the nearest other direction for each unit vector (inf if alone)."""
    if len(dirs) < 2:
        return np.full(len(dirs), np.inf)
    chord, _ = cKDTree(dirs).query(dirs, k=2)
    c = np.minimum(chord[:, 1], 2.0)
    return 2.0 * np.arcsin(0.5 * c)


def footprint_kappa(dirs, kappa_min=10.0, kappa_max=1e6) -> np.ndarray:
    """kappa = sigma^-2 from nearest-neighbour angles, clamped.

    A class with one direction has no footprint and gets ``kappa_min``.
    """
    sigma = great_circle_nearest(np.asarray(dirs, dtype=np.float64))
    with np.errstate(divide="ignore"):
        k = np.where(np.isinf(sigma), kappa_min, 1.0 / (sigma * sigma))
    return np.clip(k, kappa_min, kappa_max)


def sample_weights(records, product: bool = False) -> np.ndarray:
    """Throughput times reciprocal probability, optionally times rho / max rho."""
    w = records["throughput"].astype(np.float64) * records["recip"].astype(np.float64)
    if product and len(records):
        rho = records["bsdf"].astype(np.float64)
        top = rho.max()
        if top > 0.0:
            w = w * (rho / top)
    return w


def fit(records, kappa_min: float = 10.0, kappa_max: float = 1e6, product: bool = False,
        directions=None) -> SeedDistribution:
    """Fit the factorised seed distribution to one leaf's samples (copies included)."""
    p_n = np.zeros(N_MAX + 1)
    if records is None or len(records) == 0:
        return SeedDistribution(p_n)
    w = sample_weights(records, product)
    total = w.sum()
    if not total > 0.0:
        return SeedDistribution(p_n)
    n_arr, bits_arr, _ = decode_code(records["code"])
    dirs = oct_decode(records["dir"]) if directions is None else np.asarray(directions, float)
    dist = SeedDistribution(p_n)
    for n in np.unique(n_arr):
        sel_n = n_arr == n
        wn = w[sel_n].sum()
        if not wn > 0.0:
            continue
        p_n[n] = wn / total
        rows = []
        for bits in np.unique(bits_arr[sel_n]):
            sel = sel_n & (bits_arr == bits)
            ws = w[sel]
            if not ws.sum() > 0.0:
                continue
            rows.append((int(bits), float(ws.sum() / wn)))
            kap = footprint_kappa(dirs[sel], kappa_min, kappa_max)
            dist.mixtures[(int(n), int(bits))] = VMFMixture(dirs[sel], kap, ws)
        dist.p_tau[int(n)] = rows
    return dist
