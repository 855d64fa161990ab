import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mpguide import bundled_scene, scene_from_dict
from mpguide.chain import Configuration
from mpguide.guiding import GuideModel, encode_code, pack_rows
from mpguide.oracle import enumerate_admissible, reference_throughput
from mpguide.params import p0_table
from mpguide.sampler import (count_trials, estimate_batch, estimate_resampled_length, p0_length,
                             sample_initial, sample_seed, seed_density, selective_active)

from conftest import BACKENDS, mirror_dict

MIRROR_CFG = Configuration([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [2.0, 0.0, 1.0])
# a point on the light sphere (centre (2, 0, 1), radius 0.05) facing the mirror
LIT_CFG = Configuration([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [2.0, 0.0, 0.95])


def _guide_rows(scene, cfg, n, bits, direction, count=50):
    rows = np.zeros((count, 14))
    rows[:, 0:3] = cfg.x_d
    rows[:, 3:6] = cfg.x_l
    rows[:, 6:9] = direction
    rows[:, 9] = n
    rows[:, 10] = bits
    rows[:, 11] = 1.0
    rows[:, 12] = 1.0
    return GuideModel.from_scene(scene, pack_rows(rows))


# [PAPER]
def test_length_law():
    p = p0_table(5, 0.95)
    assert p[0] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert_allclose(p[1:6], p[1])
    assert p[6] / p[5] == pytest.approx(0.95, rel=1e-12)
    assert p[8] / p[7] == pytest.approx(0.95, rel=1e-12)


# [DERIVED]
def test_conductor_only_scene_draws_reflections(mirror):
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = sample_initial(MIRROR_CFG, mirror, rng)
        assert d.component == "initializer"
        assert all(t == 0 for t in d.types)
        if d.ok:
            # only the type string "R...R" is possible, so no type factor enters
            p_n, p_d = seed_density(mirror, None, MIRROR_CFG, d.n, d.chain)
            assert p_n == pytest.approx(p0_length(d.n, mirror))
            assert p_d == pytest.approx(d.p_direction)


# [DERIVED]
def test_two_equal_quads_get_equal_first_vertex_share():
    d = mirror_dict()
    d["shapes"][0] = {"type": "quad", "material": "mirror", "center": [-2.0, 0.0, 0.0],
                      "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, 1.0, 0.0], "half_size": [1.0, 1.0]}
    d["shapes"].append({"type": "quad", "material": "mirror", "center": [2.0, 0.0, 0.0],
                        "u_axis": [1.0, 0.0, 0.0], "v_axis": [0.0, 1.0, 0.0], "half_size": [1.0, 1.0]})
    s = scene_from_dict(d)
    cfg = Configuration([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.0, 0.5, 1.0])
    rng = np.random.default_rng(1)
    right = [sample_initial(cfg, s, rng, n=1).omega[0] > 0.0 for _ in range(20000)]
    assert abs(np.mean(right) - 0.5) < 0.01


# [DERIVED]
def test_initializer_direction_density_is_area_uniform(mirror):
    # x_1 uniform on the 4 x 4 quad seen from height 1: p(omega) = d^2 / (A cos)
    d = sample_initial(MIRROR_CFG, mirror, np.random.default_rng(2), n=1)
    x1 = d.chain.points[0]
    dist = np.linalg.norm(x1 - MIRROR_CFG.x_d)
    cos = 1.0 / dist
    assert d.p_direction == pytest.approx(dist * dist / (16.0 * cos), rel=1e-9)


# [PAPER]
@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_guide_draws_from_the_initializer(mirror, backend):
    empty = GuideModel.empty(mirror.bounds)
    for seed in range(30):
        a = sample_initial(MIRROR_CFG, mirror, np.random.default_rng(seed), backend=backend)
        b = sample_seed(MIRROR_CFG, empty, mirror, np.random.default_rng(seed), backend=backend)
        assert b.component == "initializer"
        assert (a.n, a.types) == (b.n, b.types)
        assert_allclose(a.omega, b.omega, rtol=0, atol=0)
        assert a.p_length == pytest.approx(b.p_length)


# [DERIVED]
def test_blended_length_probability(mirror):
    guide = _guide_rows(mirror, MIRROR_CFG, 2, 0, [0.6, 0.0, -0.8])
    chain = sample_initial(MIRROR_CFG, mirror, np.random.default_rng(3), n=1).chain
    q = p0_length(2, mirror)
    # any chain of the right length gets the blended length law
    chain2 = type(chain)((0, 0), np.vstack([chain.points, chain.points]), (0, 0))
    p_n, _ = seed_density(mirror, guide, MIRROR_CFG, 2, chain2)
    assert p_n == pytest.approx(0.5 * q + 0.5, rel=1e-12)
    p_n1, _ = seed_density(mirror, guide, MIRROR_CFG, 1, chain)
    assert p_n1 == pytest.approx(0.5 * p0_length(1, mirror), rel=1e-12)


# [PAPER]
def test_defensive_mixture_bounds_the_density(mirror):
    guide = _guide_rows(mirror, MIRROR_CFG, 1, 0, [0.70710678, 0.0, -0.70710678])
    rng = np.random.default_rng(4)
    learned = 0
    for _ in range(300):
        d = sample_seed(MIRROR_CFG, guide, mirror, rng, n=1)
        learned += d.component == "learned"
        if not d.ok:
            continue
        _, p0d = seed_density(mirror, None, MIRROR_CFG, 1, d.chain)
        assert d.p_direction >= 0.5 * p0d * (1.0 - 1e-12)
        assert d.p_length >= 0.5 * p0_length(1, mirror) * (1.0 - 1e-12)
    assert 100 < learned < 200


# [PAPER]
@pytest.mark.parametrize("backend", BACKENDS)
def test_mirror_estimator_is_unbiased(mirror, backend):
    T = reference_throughput(LIT_CFG, mirror)[0]
    assert T > 0.0
    c, stats = estimate_batch(LIT_CFG, mirror, np.random.default_rng(5), 4000,
                              mode="sms-uniform", backend=backend)
    x = c[:, 0]
    se = x.std(ddof=1) / math.sqrt(len(x))
    assert abs(x.mean() - T) <= 3.0 * se
    assert stats.sum() > 0


# [DERIVED]
def test_fully_occluded_configuration_contributes_nothing():
    d = mirror_dict()
    d["shapes"].append({"type": "quad", "material": "wall", "center": [1.5, 0.0, 0.5],
                        "u_axis": [0.0, 1.0, 0.0], "v_axis": [0.0, 0.0, 1.0],
                        "half_size": [0.3, 0.3]})
    s = scene_from_dict(d)
    assert reference_throughput(LIT_CFG, scene_from_dict(mirror_dict())).any()
    assert not reference_throughput(LIT_CFG, s).any()
    c, _ = estimate_batch(LIT_CFG, s, np.random.default_rng(6), 500, mode="sms-uniform")
    assert not c.any()


# [PAPER]
def test_every_admissible_chain_has_positive_seed_density():
    s = bundled_scene("ghost_slab")
    cfg = Configuration([0.5, 0.2, 2.5], [0.0, 0.0, -1.0], [1.0, 0.0, 1.1])
    ents = enumerate_admissible(cfg, s)
    assert len(ents) >= 2
    guide = _guide_rows(s, cfg, 1, 0, [0.0, 0.0, -1.0])
    for chain, _ in ents:
        for g in (None, guide):
            p_n, p_d = seed_density(s, g, cfg, chain.n, chain)
            assert p_n > 0.0 and p_d > 0.0


# [PAPER]
def test_fixed_length_and_resampled_length_estimators_agree():
    s = bundled_scene("ghost_slab")
    cfg = Configuration([0.5, 0.2, 2.5], [0.0, 0.0, -1.0], [1.0, 0.0, 1.1])
    fixed, _ = estimate_batch(cfg, s, np.random.default_rng(7), 3000, mode="sms-uniform",
                              backend="python")
    rng = np.random.default_rng(8)
    resampled = np.array([estimate_resampled_length(cfg, s, rng, mode="sms-uniform")
                          for _ in range(3000)])
    a, b = fixed[:, 0], resampled[:, 0]
    assert a.mean() > 0.0 and b.mean() > 0.0
    se = math.hypot(a.std(ddof=1) / math.sqrt(len(a)), b.std(ddof=1) / math.sqrt(len(b)))
    assert abs(a.mean() - b.mean()) <= 3.0 * se


# [PAPER]
def test_selective_activation(mirror):
    assert not selective_active(None, MIRROR_CFG)
    assert not selective_active(GuideModel.empty(mirror.bounds), MIRROR_CFG)
    guide = _guide_rows(mirror, MIRROR_CFG, 1, 0, [0.6, 0.0, -0.8])
    assert selective_active(guide, MIRROR_CFG)


# [TRIVIAL]
def test_count_trials():
    outcomes = iter([False, False, True])
    assert count_trials(lambda: next(outcomes)) == (3, False)
    assert count_trials(lambda: False, k_max=7) == (7, True)
    assert count_trials(lambda: True) == (1, False)


# [TRIVIAL]
def test_encode_code_used_for_guides_matches_chain_bits():
    chain_bits = sum(1 << i for i, t in enumerate((1, 0, 1)) if t)
    assert int(encode_code(3, chain_bits)) == 0b1101
