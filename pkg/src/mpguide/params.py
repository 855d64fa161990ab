"""Packing of solver and integrator settings into the kernel parameter vector."""

from __future__ import annotations

import numpy as np

from . import _layout as L

MODES = {"pt": L.MODE_PT, "sms-uniform": L.MODE_SMS, "mpg": L.MODE_MPG, "oracle-probe": L.MODE_PT}


def p0_table(rr_start: int = 5, gamma: float = 0.95, n_max: int = L.N_MAX) -> np.ndarray:
    """Initial chain-length law: 1 up to ``rr_start``, then ``gamma`` per extra vertex.

    Index n holds P0(n); index 0 is unused and zero.
    """
    n = np.arange(1, n_max + 1)
    w = np.where(n <= rr_start, 1.0, gamma ** np.maximum(n - rr_start, 0))
    out = np.zeros(n_max + 1)
    out[1:] = w / w.sum()
    return out


def build_params(scene, settings=None, *, mode=None, training=False, timing=False,
                 selective=None, alpha=None, **overrides) -> np.ndarray:
    """Kernel parameter vector for ``scene`` with the given integrator settings.

    ``overrides`` may replace any walk option by name (max_iterations, tol,
    beta0, growth, step_clamp, beta_min, k_max, retries).
    """
    s = settings if settings is not None else scene.settings
    opts = {
        "max_iterations": s.max_iterations, "tol": s.tol, "beta0": s.beta0, "growth": s.growth,
        "step_clamp": s.step_clamp, "beta_min": 1e-6, "k_max": s.k_max, "retries": s.retries,
    }
    unknown = set(overrides) - set(opts)
    if unknown:
        raise TypeError(f"unknown parameter overrides: {sorted(unknown)}")
    opts.update(overrides)
    prm = np.zeros(L.PRM_WIDTH)
    prm[L.P_MAX_ITER] = opts["max_iterations"]
    prm[L.P_TOL] = opts["tol"]
    prm[L.P_BETA0] = opts["beta0"]
    prm[L.P_GROWTH] = opts["growth"]
    prm[L.P_CLAMP] = opts["step_clamp"]
    prm[L.P_BETA_MIN] = opts["beta_min"]
    prm[L.P_KMAX] = opts["k_max"]
    prm[L.P_RETRIES] = opts["retries"]
    prm[L.P_DELTA_SAME] = 1e-4 * scene.scale
    prm[L.P_FD_DELTA] = 1e-4 * scene.scale
    prm[L.P_TOL_POLISH] = 1e-11
    prm[L.P_ALPHA] = s.alpha if alpha is None else alpha
    prm[L.P_RR_START] = s.rr_start
    prm[L.P_RR_GAMMA] = s.rr_gamma
    prm[L.P_MAX_DEPTH] = s.max_depth
    prm[L.P_NMAX] = L.N_MAX
    prm[L.P_TIMING] = 1.0 if timing else 0.0
    prm[L.P_MODE] = MODES[mode or s.mode]
    prm[L.P_SELECTIVE] = 1.0 if (s.selective if selective is None else selective) else 0.0
    prm[L.P_TRAINING] = 1.0 if training else 0.0
    prm[L.P_P0:L.P_P0 + L.N_MAX + 1] = p0_table(s.rr_start, s.rr_gamma)
    return prm


def for_backend(prm: np.ndarray, mod):
    """The pure-Python kernels are fastest on plain lists."""
    return prm.tolist() if mod.BACKEND == "python" else prm
