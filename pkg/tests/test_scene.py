import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mpguide import SceneError, bundled_scene, load_scene, scene_from_dict

from conftest import BACKENDS, SCENE_DIR, mirror_dict

MINIMAL = """
[camera]
position = [0.0, -4.0, 1.0]
look_at = [0.0, 0.0, 0.0]

[[materials]]
name = "glass"
type = "dielectric"
ior = 1.5

[[materials]]
name = "floor"
type = "diffuse"
albedo = [0.8, 0.8, 0.8]

[[shapes]]
type = "quad"
material = "glass"
center = [0.0, 0.0, 1.0]
u_axis = [1.0, 0.0, 0.0]
v_axis = [0.0, 1.0, 0.0]
half_size = [1.0, 1.0]

[[shapes]]
type = "quad"
material = "floor"
center = [0.0, 0.0, 0.0]
u_axis = [1.0, 0.0, 0.0]
v_axis = [0.0, 1.0, 0.0]
half_size = [2.0, 2.0]

[[emitters]]
type = "point"
position = [0.0, 0.0, 3.0]
intensity = [1.0, 1.0, 1.0]
"""


def _write(tmp_path, text):
    p = tmp_path / "s.toml"
    p.write_text(text)
    return p


# [TRIVIAL]
def test_minimal_file_loads(tmp_path):
    s = load_scene(_write(tmp_path, MINIMAL))
    assert len(s.shapes) == 2
    assert len(s.emitters) == 1
    assert s.has_specular


# [TRIVIAL]
def test_bad_ior_is_rejected(tmp_path):
    with pytest.raises(SceneError, match="dielectric IOR out of range"):
        load_scene(_write(tmp_path, MINIMAL.replace("ior = 1.5", "ior = 0.5")))


# [TRIVIAL]
def test_missing_camera_is_rejected(tmp_path):
    text = MINIMAL.split("[[materials]]", 1)[1]
    with pytest.raises(SceneError, match="camera"):
        load_scene(_write(tmp_path, "[[materials]]" + text))


# [TRIVIAL]
def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(SceneError, match="colour"):
        load_scene(_write(tmp_path, MINIMAL.replace("ior = 1.5", "ior = 1.5\ncolour = 2")))


# [TRIVIAL]
def test_syntax_error_reports_line(tmp_path):
    with pytest.raises(SceneError, match="line"):
        load_scene(_write(tmp_path, MINIMAL.replace("ior = 1.5", "ior = = 1.5")))


# [TRIVIAL]
def test_missing_file(tmp_path):
    with pytest.raises(SceneError, match="cannot read"):
        load_scene(tmp_path / "nope.toml")


# [TRIVIAL]
def test_unknown_material_reference():
    d = mirror_dict()
    d["shapes"][0]["material"] = "gold"
    with pytest.raises(SceneError):
        scene_from_dict(d)


# [DERIVED]
@pytest.mark.parametrize("field, value", [
    ("albedo", [1.5, 0.0, 0.0]),
    ("roughness", 0.0),
])
def test_receiver_invariants(field, value):
    d = mirror_dict()
    mat = {"name": "wall", "type": "glossy", "albedo": [0.5, 0.5, 0.5], "roughness": 0.1}
    mat[field] = value
    d["materials"][1] = mat
    with pytest.raises(SceneError):
        scene_from_dict(d)


# [DERIVED]
def test_emitter_invariants():
    d = mirror_dict({"type": "sphere", "center": [0.0, 0.0, 1.0], "radius": 0.0,
                     "radiance": [1.0, 1.0, 1.0]})
    with pytest.raises(SceneError):
        scene_from_dict(d)
    d = mirror_dict({"type": "point", "position": [0.0, 0.0, 1.0], "intensity": [-1.0, 0.0, 0.0]})
    with pytest.raises(SceneError):
        scene_from_dict(d)


# [TRIVIAL]
@pytest.mark.parametrize("path", sorted(SCENE_DIR.glob("*.toml")), ids=lambda p: p.stem)
def test_bundled_scenes_load(path):
    s = bundled_scene(path.stem)
    assert s.emitters
    assert all(0 <= sh.material < len(s.materials) for sh in s.shapes)


# [DERIVED]
def test_slab_is_two_quads():
    s = bundled_scene("slab")
    glass = [sh for sh in s.shapes if s.materials[sh.material].kind == "dielectric"]
    assert len(glass) == 2
    assert_allclose(glass[0].normal, -glass[1].normal)


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
def test_visibility_examples(mirror, backend):
    # scenes need at least one shape; a segment far from all of them stands in for "empty"
    assert mirror.visible([5.0, 5.0, 1.0], [6.0, 5.0, 1.0], backend=backend)
    # through the mirror quad
    assert not mirror.visible([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], backend=backend)
    # grazing just outside the quad edge at x = 2
    assert not mirror.visible([2.0 - 1e-3, 1.0, 1.0], [2.0 - 1e-3, 1.0, -1.0], backend=backend)
    assert mirror.visible([2.0 + 1e-3, 1.0, 1.0], [2.0 + 1e-3, 1.0, -1.0], backend=backend)


# [DERIVED]
def test_emitters_occlude(mirror):
    # the light sphere at (2, 0, 1) blocks the segment through its centre
    assert not mirror.visible([2.0, 0.0, 0.5], [2.0, 0.0, 1.5])


# [DERIVED]
@given(st.lists(st.floats(-3.0, 3.0), min_size=6, max_size=6))
@settings(max_examples=300, deadline=None)
def test_visibility_symmetric(c):
    s = bundled_scene("slab")
    a, b = np.array(c[:3]), np.array(c[3:])
    if np.linalg.norm(a - b) < 1e-2:
        return
    assert s.visible(a, b) == s.visible(b, a)


# [DERIVED]
def test_sample_emitter_single_point():
    s = scene_from_dict(mirror_dict({"type": "point", "position": [0.0, 0.0, 1.0],
                                     "intensity": [1.0, 1.0, 1.0]}))
    p, eid, pdf = s.sample_emitter(np.random.default_rng(0))
    assert eid == 0 and pdf == 1.0
    assert_allclose(p, [0.0, 0.0, 1.0])


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
def test_sample_emitter_uniform_choice_and_area_pdf(backend):
    d = mirror_dict()
    d["emitters"].append({"type": "point", "position": [0.0, 0.0, 1.0], "intensity": [1.0, 1.0, 1.0]})
    s = scene_from_dict(d)
    rng = np.random.default_rng(1)
    ids = []
    r = 0.05
    for _ in range(10**5):
        p, eid, pdf = s.sample_emitter(rng, backend=backend)
        ids.append(eid)
        if eid == 0:
            assert pdf == pytest.approx(0.5 / (4.0 * math.pi * r * r), rel=1e-12)
            assert abs(np.linalg.norm(p - [2.0, 0.0, 1.0]) - r) < 1e-12
        else:
            assert pdf == 0.5
    frac = np.mean(np.array(ids) == 0)
    assert abs(frac - 0.5) < 0.01


# [DERIVED]
def test_sphere_emitter_pdf_integrates_to_one(mirror):
    r = mirror.emitters[0].radius
    _, _, pdf = mirror.sample_emitter(np.random.default_rng(2))
    assert pdf == pytest.approx(1.0 / (4.0 * math.pi * r * r), rel=1e-12)
    # midpoint quadrature of pdf * r^2 sin(theta) over the sphere
    m = 400
    theta = (np.arange(m) + 0.5) * math.pi / m
    total = pdf * r * r * np.sum(np.sin(theta)) * (math.pi / m) * 2.0 * math.pi
    assert abs(total - 1.0) < 1e-4


# [DERIVED]
def test_scene_scale_and_eps():
    s = scene_from_dict(mirror_dict())
    lo, hi = s.bounds
    assert s.scale == pytest.approx(np.linalg.norm(hi - lo))
    assert s.eps == pytest.approx(1e-4 * s.scale)


# [TRIVIAL]
def test_scene_from_dict_does_not_mutate_input():
    d = mirror_dict()
    before = copy.deepcopy(d)
    scene_from_dict(d)
    assert d == before
