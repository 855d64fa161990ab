import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mpguide import get_backend, scene_from_dict
from mpguide.geometry import (Ray, fresnel_dielectric, interaction_at, intersect, orthonormal_basis,
                              point_from_params, reflect, refract, shape_operator)

from conftest import BACKENDS


def _unit_scene():
    """Plane z=0 (|x|,|y| <= 1) and a unit sphere at (0, 0, 5)."""
    return scene_from_dict({
        "camera": {"position": [0.0, -5.0, 1.0], "look_at": [0.0, 0.0, 0.0], "up": [0.0, 0.0, 1.0]},
        "materials": [{"name": "m", "type": "conductor"},
                      {"name": "d", "type": "diffuse", "albedo": [0.5, 0.5, 0.5]}],
        "shapes": [
            {"type": "quad", "material": "d", "center": [0.0, 0.0, 0.0], "u_axis": [1.0, 0.0, 0.0],
             "v_axis": [0.0, 1.0, 0.0], "half_size": [1.0, 1.0]},
            {"type": "sphere", "material": "m", "center": [0.0, 0.0, 5.0], "radius": 1.0},
        ],
        "emitters": [{"type": "point", "position": [0.0, 0.0, 9.0], "intensity": [1.0, 1.0, 1.0]}],
    })


UNIT = _unit_scene()


def unit_vectors():
    return st.tuples(*[st.floats(-1.0, 1.0)] * 3).filter(
        lambda v: 1e-3 < math.sqrt(sum(c * c for c in v))).map(
        lambda v: np.array(v) / np.linalg.norm(v))


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
def test_intersect_plane_from_above(backend):
    hit = intersect(Ray([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]), UNIT, backend=backend)
    assert hit.shape_id == 0
    assert_allclose(hit.position, [0.0, 0.0, 0.0], atol=1e-12)
    assert_allclose(hit.normal, [0.0, 0.0, 1.0])


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
def test_intersect_from_inside_sphere(backend):
    hit = intersect(Ray([0.0, 0.0, 5.0], [1.0, 0.0, 0.0]), UNIT, backend=backend)
    assert hit.shape_id == 1
    assert_allclose(hit.position, [1.0, 0.0, 5.0], atol=1e-12)


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
def test_parallel_ray_misses(backend):
    assert intersect(Ray([-3.0, 0.0, 0.5], [1.0, 0.0, 0.0]), UNIT, backend=backend) is None


# [DERIVED]
def test_specular_only_skips_diffuse():
    ray = Ray([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])
    assert intersect(ray, UNIT, specular_only=True) is None


# [TRIVIAL]
def test_ray_direction_must_be_unit():
    with pytest.raises(ValueError):
        Ray([0.0, 0.0, 0.0], [0.0, 0.0, 2.0])


# [TRIVIAL]
@given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99), unit_vectors())
@settings(max_examples=200, deadline=None)
def test_intersect_deterministic(x, y, d):
    ray = Ray([x, y, 5.0 - 2.5 * np.sign(d[2] or 1.0)], d)
    a = intersect(ray, UNIT)
    b = intersect(ray, UNIT)
    if a is None:
        assert b is None
    else:
        assert a.position.tobytes() == b.position.tobytes()
        assert a.shape_id == b.shape_id


# [DERIVED]
@given(st.floats(0.05, math.pi - 0.05), st.floats(-math.pi, math.pi))
@settings(max_examples=200, deadline=None)
def test_interaction_frame_and_params(theta, phi):
    shape = UNIT.shapes[1]
    p = point_from_params(shape, (theta, phi))
    si = interaction_at(UNIT, 1, p)
    assert abs(np.linalg.norm(si.normal) - 1.0) < 1e-9
    assert abs(si.tangent_u @ si.tangent_v) < 1e-9
    assert abs(si.tangent_u @ si.normal) < 1e-9
    assert abs(si.tangent_v @ si.normal) < 1e-9
    assert np.linalg.norm(point_from_params(shape, si.params) - p) < 1e-9 * UNIT.scale


# [DERIVED]
def test_shape_operators():
    assert_allclose(shape_operator(UNIT.shapes[0]), np.zeros((2, 2)))
    assert_allclose(shape_operator(UNIT.shapes[1]), np.eye(2))


# [DERIVED]
@given(unit_vectors())
@settings(max_examples=100, deadline=None)
def test_sphere_shape_operator_matches_finite_difference(n):
    shape = UNIT.shapes[1]
    p = shape.center + shape.radius * n
    si = interaction_at(UNIT, 1, p)
    h = 1e-5
    for k, t in enumerate((si.tangent_u, si.tangent_v)):
        plus = interaction_at(UNIT, 1, shape.center + shape.radius * (n + h * t) / np.linalg.norm(n + h * t))
        minus = interaction_at(UNIT, 1, shape.center + shape.radius * (n - h * t) / np.linalg.norm(n - h * t))
        dn = (plus.normal - minus.normal) / (2.0 * math.atan(h) * shape.radius)
        got = np.array([dn @ si.tangent_u, dn @ si.tangent_v])
        assert_allclose(got, si.shape_operator[:, k], rtol=1e-5, atol=1e-5)


# [DERIVED]
def test_reflect_examples():
    assert_allclose(reflect([0.0, 0.0, -1.0], [0.0, 0.0, 1.0]), [0.0, 0.0, 1.0])
    s = 1.0 / math.sqrt(2.0)
    assert_allclose(reflect([s, 0.0, -s], [0.0, 0.0, 1.0]), [s, 0.0, s])


# [DERIVED]
@given(unit_vectors(), unit_vectors())
@settings(max_examples=300, deadline=None)
def test_reflect_unit_and_involution(w, n):
    r = reflect(w, n)
    assert abs(np.linalg.norm(r) - 1.0) < 1e-9
    assert_allclose(reflect(r, n), w, atol=1e-9)


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
def test_reflect_million_pairs(backend):
    mod = get_backend(backend)
    rng = np.random.default_rng(3)
    w = rng.normal(size=(10**6, 3))
    n = rng.normal(size=(10**6, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    worst_norm = worst_inv = 0.0
    for a, b in zip(w.tolist(), n.tolist()):
        r = mod.reflect(a, b)
        back = mod.reflect(r, b)
        worst_norm = max(worst_norm, abs(math.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2) - 1.0))
        worst_inv = max(worst_inv, abs(back[0] - a[0]), abs(back[1] - a[1]), abs(back[2] - a[2]))
    assert worst_norm < 1e-9
    assert worst_inv < 1e-9


# [DERIVED]
def test_refract_normal_incidence_and_index_match():
    assert_allclose(refract([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 1.5), [0.0, 0.0, -1.0])
    w = np.array([0.6, 0.0, -0.8])
    assert_allclose(refract(w, [0.0, 0.0, 1.0], 1.0), w)


# [DERIVED]
def test_refract_total_internal_reflection():
    # inside glass (w.n > 0) at 60 degrees; critical angle asin(1/1.5) ~ 41.8 degrees
    crit = math.degrees(math.asin(1.0 / 1.5))
    assert 60.0 > crit
    w = np.array([math.sin(math.radians(60.0)), 0.0, math.cos(math.radians(60.0))])
    assert refract(w, [0.0, 0.0, 1.0], 1.5) is None
    below = math.radians(crit - 1.0)
    assert refract([math.sin(below), 0.0, math.cos(below)], [0.0, 0.0, 1.0], 1.5) is not None


# [TRIVIAL]
def test_refract_rejects_bad_eta():
    with pytest.raises(ValueError):
        refract([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 0.0)


# [DERIVED]
@given(unit_vectors(), unit_vectors(), st.floats(1.01, 3.0))
@settings(max_examples=300, deadline=None)
def test_refraction_snell_and_tangential_continuity(w, n, eta):
    out = refract(w, n, eta)
    c = float(w @ n)
    eta_i, eta_t = (1.0, eta) if c < 0.0 else (eta, 1.0)
    if out is None:
        assert eta_i > eta_t
        return
    assert abs(np.linalg.norm(out) - 1.0) < 1e-9
    sin_i = np.linalg.norm(np.cross(w, n))
    sin_t = np.linalg.norm(np.cross(out, n))
    assert abs(eta_i * sin_i - eta_t * sin_t) < 1e-9
    tan_in = eta_i * (w - (w @ n) * n)
    tan_out = eta_t * (out - (out @ n) * n)
    assert_allclose(tan_in, tan_out, atol=1e-9)
    # the ray keeps travelling through the surface
    assert (out @ n) * c > 0.0


# [DERIVED]
def test_fresnel_normal_incidence():
    assert fresnel_dielectric(1.0, 1.0, 1.5) == pytest.approx(0.04, abs=1e-12)
    assert fresnel_dielectric(math.cos(math.radians(60.0)), 1.5, 1.0) == 1.0


# [DERIVED]
@given(unit_vectors())
@settings(max_examples=200, deadline=None)
def test_orthonormal_basis(n):
    t1, t2 = orthonormal_basis(n)
    assert_allclose(np.cross(t1, t2), n, atol=1e-9)
    assert abs(t1 @ n) < 1e-9 and abs(t2 @ n) < 1e-9
