"""A trained guide: tree plus fitted leaf distributions, packed for the kernels."""

from __future__ import annotations

import numpy as np

from .._backend import get_backend
from .._layout import N_MAX
from .fit import SeedDistribution, fit
from .records import RECORD_DTYPE
from .stree import GuidingTree, rebuild


class GuideModel:
    def __init__(self, tree: GuidingTree, distributions: list):
        self.tree = tree
        self.distributions = distributions
        self._kernels = {}

    @classmethod
    def build(cls, records, bounds, *, epsilon=0.1, kappa_min=10.0, kappa_max=1e6,
              product=False) -> "GuideModel":
        tree = rebuild(records, bounds, epsilon)
        dists = [fit(tree.leaf_records(i), kappa_min, kappa_max, product)
                 for i in range(tree.leaf_count)]
        return cls(tree, dists)

    @classmethod
    def from_scene(cls, scene, records, settings=None, product=None) -> "GuideModel":
        s = settings or scene.settings
        return cls.build(records, scene.bounds, epsilon=s.filter_epsilon, kappa_min=s.kappa_min,
                         kappa_max=s.kappa_max, product=s.product if product is None else product)

    @classmethod
    def empty(cls, bounds) -> "GuideModel":
        return cls.build(np.zeros(0, dtype=RECORD_DTYPE), bounds)

    @property
    def sample_count(self) -> int:
        return self.tree.size

    def leaf(self, x_d, x_l) -> int:
        return self.tree.query(x_d, x_l)

    def distribution(self, x_d, x_l) -> SeedDistribution:
        return self.distributions[self.leaf(x_d, x_l)]

    def selective_active(self, x_d, x_l) -> bool:
        return self.tree.selective_active(x_d, x_l)

    def arrays(self):
        """Flat arrays in KGuide argument order."""
        t = self.tree
        leaf_pn = np.zeros((t.leaf_count, N_MAX + 1))
        leaf_tau_start, leaf_tau_count = [], []
        tau_n, tau_bits, tau_prob, tau_lobe_start, tau_lobe_count = [], [], [], [], []
        lobe_mu, lobe_kappa, lobe_cdf = [], [], []
        for i, d in enumerate(self.distributions):
            leaf_pn[i] = d.p_n
            leaf_tau_start.append(len(tau_n))
            for n in sorted(d.p_tau):
                for bits, p in d.p_tau[n]:
                    mix = d.mixtures[(n, bits)]
                    tau_n.append(n)
                    tau_bits.append(bits)
                    tau_prob.append(p)
                    tau_lobe_start.append(len(lobe_kappa))
                    tau_lobe_count.append(len(mix))
                    lobe_mu.extend(mix.mu.tolist())
                    lobe_kappa.extend(mix.kappa.tolist())
                    lobe_cdf.extend(mix.cdf.tolist())
            leaf_tau_count.append(len(tau_n) - leaf_tau_start[-1])
        lobe_mu = np.array(lobe_mu, dtype=np.float64).reshape(-1, 3)
        return (t.node_axis, t.node_split, t.node_left, t.node_right, t.node_leaf,
                t.lo, t.inv_ext, t.real_counts(), leaf_pn,
                np.array(leaf_tau_start, dtype=np.int64), np.array(leaf_tau_count, dtype=np.int64),
                np.array(tau_n, dtype=np.int64), np.array(tau_bits, dtype=np.int64),
                np.array(tau_prob, dtype=np.float64), np.array(tau_lobe_start, dtype=np.int64),
                np.array(tau_lobe_count, dtype=np.int64), lobe_mu,
                np.array(lobe_kappa, dtype=np.float64), np.array(lobe_cdf, dtype=np.float64))

    def kernel(self, backend=None):
        mod = get_backend(backend)
        if mod.BACKEND not in self._kernels:
            self._kernels[mod.BACKEND] = mod.KGuide(*self.arrays())
        return self._kernels[mod.BACKEND]

    def dump(self) -> str:
        lines = [self.tree.dump()]
        for i, d in enumerate(self.distributions):
            lines.append(f"fit {i}: {d.describe()}")
        return "\n".join(lines)
