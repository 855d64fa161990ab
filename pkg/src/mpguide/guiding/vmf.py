"""von Mises-Fisher lobes and mixtures on the unit sphere."""

from __future__ import annotations

import math

import numpy as np

KAPPA_UNIFORM = 1e-8


def _frames(n):
    """Vectorised branchless tangent frames, identical to the kernels' onb."""
    sign = np.copysign(1.0, n[..., 2])
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t1 = np.stack([1.0 + sign * n[..., 0] * n[..., 0] * a, sign * b, -sign * n[..., 0]], axis=-1)
    t2 = np.stack([b, sign + n[..., 1] * n[..., 1] * a, -n[..., 1]], axis=-1)
    return t1, t2


def vmf_pdf(omega, mu, kappa):
    """Density of a vMF lobe, evaluated in the overflow-free form.

    kappa / (2 pi (1 - exp(-2 kappa))) * exp(kappa (mu.omega - 1)); the
    uniform density 1/(4 pi) is returned for kappa below 1e-8.
    """
    omega = np.asarray(omega, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    c = np.sum(omega * mu, axis=-1)
    small = kappa < KAPPA_UNIFORM
    k = np.where(small, 1.0, kappa)
    val = k / (2.0 * np.pi * -np.expm1(-2.0 * k)) * np.exp(k * (c - 1.0))
    return np.where(small, 1.0 / (4.0 * np.pi), val)


def vmf_log_pdf(omega, mu, kappa):
    omega = np.asarray(omega, dtype=np.float64)
    c = np.sum(omega * np.asarray(mu, dtype=np.float64), axis=-1)
    kappa = np.asarray(kappa, dtype=np.float64)
    small = kappa < KAPPA_UNIFORM
    k = np.where(small, 1.0, kappa)
    val = np.log(k) - np.log(2.0 * np.pi) - np.log(-np.expm1(-2.0 * k)) + k * (c - 1.0)
    return np.where(small, -np.log(4.0 * np.pi), val)


def sample_vmf(mu, kappa, u1, u2):
    """Inverse-CDF sample about ``mu`` from two uniforms (arrays broadcast)."""
    mu = np.asarray(mu, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    small = kappa < KAPPA_UNIFORM
    k = np.where(small, 1.0, kappa)
    w = 1.0 + np.log(np.exp(-2.0 * k) + u1 * -np.expm1(-2.0 * k)) / k
    w = np.clip(np.where(small, 1.0 - 2.0 * u1, w), -1.0, 1.0)
    s = np.sqrt(np.maximum(0.0, 1.0 - w * w))
    phi = 2.0 * np.pi * u2
    t1, t2 = _frames(mu)
    w, s, phi = w[..., None], s[..., None], phi[..., None]
    out = w * mu + s * np.cos(phi) * t1 + s * np.sin(phi) * t2
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def mean_resultant_length(kappa: float) -> float:
    """E[mu . omega] = coth(kappa) - 1/kappa."""
    return 1.0 / math.tanh(kappa) - 1.0 / kappa


class VMFMixture:
    def __init__(self, mu, kappa, weights):
        self.mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        self.kappa = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
        w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        if not (len(self.mu) == len(self.kappa) == len(w)) or len(w) == 0:
            raise ValueError("mixture needs matching, non-empty lobe arrays")
        if np.any(w < 0.0) or w.sum() <= 0.0:
            raise ValueError("lobe weights must be non-negative with a positive sum")
        self.weights = w / w.sum()
        self.cdf = np.cumsum(self.weights)
        self.cdf[-1] = 1.0

    def __len__(self):
        return len(self.weights)

    def pdf(self, omega):
        omega = np.asarray(omega, dtype=np.float64)
        one = omega.ndim == 1
        om = np.atleast_2d(omega)
        c = om @ self.mu.T  # (N, lobes)
        small = self.kappa < KAPPA_UNIFORM
        k = np.where(small, 1.0, self.kappa)
        norm = k / (2.0 * np.pi * -np.expm1(-2.0 * k))
        v = np.where(small, 1.0 / (4.0 * np.pi), norm * np.exp(k * (c - 1.0)))
        out = v @ self.weights
        return float(out[0]) if one else out

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Lobe by weight, then a lobe sample; returns (directions, pdf)."""
        m = 1 if size is None else int(size)
        lobe = np.searchsorted(self.cdf, rng.random(m), side="right")
        lobe = np.minimum(lobe, len(self.cdf) - 1)
        u1 = rng.random(m)
        u2 = rng.random(m)
        d = sample_vmf(self.mu[lobe], self.kappa[lobe], u1, u2)
        pdf = self.pdf(d)
        if size is None:
            return d[0], float(pdf[0])
        return d, pdf
