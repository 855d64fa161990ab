import copy
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from mpguide import available_backends
from mpguide.guiding import VMFMixture
from mpguide.scene import bundled_scene, scene_from_dict

SCENE_DIR = Path(__file__).resolve().parents[1] / "src" / "mpguide" / "scenes"
BACKENDS = available_backends()


def scene_dict(name: str) -> dict:
    return tomllib.loads((SCENE_DIR / f"{name}.toml").read_text())


def small_scene(name: str, resolution=(8, 8), **integrator):
    """A bundled scene at a reduced resolution, with integrator overrides."""
    data = copy.deepcopy(scene_dict(name))
    data["camera"]["resolution"] = list(resolution)
    data.setdefault("integrator", {}).update(integrator)
    return scene_from_dict(data)


def mirror_dict(emitter=None, half=2.0, reflectance=(0.9, 0.9, 0.9)) -> dict:
    """Mirror quad at z=0 seen from above, with a diffuse receiver and one light."""
    return {
        "camera": {"position": [0.0, -4.0, 2.0], "look_at": [0.0, 0.0, 0.0],
                   "up": [0.0, 0.0, 1.0], "resolution": [4, 4]},
        "materials": [
            {"name": "mirror", "type": "conductor", "reflectance": list(reflectance)},
            {"name": "wall", "type": "diffuse", "albedo": [0.5, 0.5, 0.5]},
        ],
        "shapes": [
            {"type": "quad", "material": "mirror", "center": [0.0, 0.0, 0.0],
             "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, 1.0, 0.0], "half_size": [half, half]},
            {"type": "quad", "material": "wall", "center": [0.0, 0.0, 3.0],
             "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, -1.0, 0.0], "half_size": [3.0, 3.0]},
        ],
        "emitters": [emitter or {"type": "sphere", "center": [2.0, 0.0, 1.0], "radius": 0.05,
                                 "radiance": [1.0, 1.0, 1.0]}],
    }


def fibonacci_sphere(m):
    i = np.arange(m) + 0.5
    z = 1.0 - 2.0 * i / m
    phi = math.pi * (1.0 + 5.0 ** 0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def random_mixture(rng, lobes=None, log_kappa=(-1.0, 3.0)):
    k = lobes or int(rng.integers(1, 8))
    mu = rng.normal(size=(k, 3))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    kappa = 10.0 ** rng.uniform(*log_kappa, size=k)
    return VMFMixture(mu, kappa, rng.uniform(0.1, 1.0, size=k))


def grid_chi2(dirs, pdf, n_phi=64, n_z=32, sub=12):
    """Chi-square of direction counts on an equal-area (phi, z) grid against ``pdf``."""
    phi = np.arctan2(dirs[:, 1], dirs[:, 0]) % (2.0 * math.pi)
    i = np.minimum((phi / (2.0 * math.pi) * n_phi).astype(int), n_phi - 1)
    j = np.minimum(((dirs[:, 2] + 1.0) * 0.5 * n_z).astype(int), n_z - 1)
    observed = np.bincount(i * n_z + j, minlength=n_phi * n_z).astype(float)
    # midpoint quadrature inside every cell; dA = dphi dz on the unit sphere
    fp = (np.arange(n_phi * sub) + 0.5) / (n_phi * sub) * 2.0 * math.pi
    fz = (np.arange(n_z * sub) + 0.5) / (n_z * sub) * 2.0 - 1.0
    P, Z = np.meshgrid(fp, fz, indexing="ij")
    R = np.sqrt(1.0 - Z * Z)
    pts = np.stack([R * np.cos(P), R * np.sin(P), Z], axis=-1).reshape(-1, 3)
    cell_area = (2.0 * math.pi / (n_phi * sub)) * (2.0 / (n_z * sub))
    dens = pdf(pts).reshape(n_phi, sub, n_z, sub).sum(axis=(1, 3)) * cell_area
    expected = dens.ravel() * len(dirs)
    keep = expected >= 5.0
    obs, exp = observed[keep], expected[keep]
    if not keep.all():
        obs = np.append(obs, observed[~keep].sum())
        exp = np.append(exp, expected[~keep].sum())
    exp *= obs.sum() / exp.sum()
    return stats.chisquare(obs, exp)


@pytest.fixture(scope="session")
def slab():
    return bundled_scene("slab")


@pytest.fixture(scope="session")
def sphere_scene():
    return bundled_scene("sphere")


@pytest.fixture(scope="session")
def mirror():
    return scene_from_dict(mirror_dict())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
