import numpy as np
import pytest
from numpy.testing import assert_allclose

from mpguide import scene_from_dict
from mpguide.chain import Configuration
from mpguide.integrator import (Film, TrainSchedule, render, run, tiles, train, train_probe)

from conftest import mirror_dict, small_scene


# [PAPER]
@pytest.mark.parametrize("total, training, iterations", [
    (16, 4, [1, 3]),
    (64, 19, [1, 2, 4, 12]),
    (256, 76, [1, 2, 4, 8, 16, 45]),
])
def test_schedule_examples(total, training, iterations):
    s = TrainSchedule(total, 0.3)
    assert s.training_spp == training
    assert s.iterations == iterations
    assert sum(s.iterations) == s.training_spp
    assert s.render_spp == total - training


# [DERIVED]
def test_schedule_edge_cases():
    assert TrainSchedule(1, 0.3).iterations == []
    assert TrainSchedule(64, 0.0).iterations == []
    assert TrainSchedule(3, 0.5).iterations == [1]
    with pytest.raises(ValueError):
        TrainSchedule(0)
    with pytest.raises(ValueError):
        TrainSchedule(16, 1.0)


# [PAPER]
@pytest.mark.parametrize("total", range(1, 300, 7))
def test_schedule_doubles_then_absorbs_the_rest(total):
    its = TrainSchedule(total, 0.3).iterations
    assert sum(its) == TrainSchedule(total, 0.3).training_spp
    for i, size in enumerate(its[:-1]):
        assert size == 2 ** i
    if its:
        assert its[-1] >= 2 ** (len(its) - 1) or len(its) == 1


# [TRIVIAL]
def test_tiles_cover_every_pixel_once():
    seen = [p for t in tiles(19, 11) for p in t]
    assert len(seen) == 19 * 11 == len(set(seen))


# [DERIVED]
def test_film_average():
    f = Film(2, 1)
    f.splat([(0, 0), (1, 0)], np.array([[2.0, 4.0, 6.0], [1.0, 1.0, 1.0]]),
            np.zeros((2, 3)), 2)
    f.splat([(0, 0)], np.array([[2.0, 0.0, 0.0]]), np.array([[2.0, 0.0, 0.0]]), 2)
    assert_allclose(f.image()[0, 0], [1.0, 1.0, 1.5])
    assert_allclose(f.image()[0, 1], [0.5, 0.5, 0.5])
    assert_allclose(f.chain_image()[0, 0], [0.5, 0.0, 0.0])


def _diffuse_only():
    d = mirror_dict()
    d["materials"][0] = {"name": "mirror", "type": "diffuse", "albedo": [0.7, 0.7, 0.7]}
    d["camera"]["resolution"] = [6, 6]
    return scene_from_dict(d)


# [PAPER]
def test_diffuse_scene_trains_an_empty_guide_and_matches_pt():
    s = _diffuse_only()
    res = run(s, spp=16, mode="mpg", seed=3, threads=1)
    assert res.guide.sample_count == 0
    assert res.stats.iterations == []
    a = render(s, res.guide, 8, seed=4, mode="mpg")
    b = render(s, None, 8, seed=4, mode="pt")
    assert a.image().tobytes() == b.image().tobytes()
    assert not a.chain_image().any()
    assert a.image().any()


# [TRIVIAL]
def test_training_is_deterministic():
    s = small_scene("ghost_slab", (8, 8))
    g1 = train(s, TrainSchedule(16), seed=2)
    g2 = train(s, TrainSchedule(16), seed=2)
    assert g1.sample_count > 0
    assert g1.tree.records.tobytes() == g2.tree.records.tobytes()
    assert g1.dump() == g2.dump()


# [PAPER]
def test_training_samples_never_reach_the_film():
    s = small_scene("ghost_slab", (8, 8))
    res = run(s, spp=16, seed=5, threads=1)
    guide = res.guide
    film = render(s, guide, res.stats.render_spp, seed=5, mode="mpg")
    assert res.film.image().tobytes() == film.image().tobytes()


# [PAPER]
def test_thread_count_does_not_change_the_image():
    s = small_scene("ghost_slab", (10, 9))
    a = run(s, spp=8, seed=1, threads=1)
    b = run(s, spp=8, seed=1, threads=3)
    assert a.film.chain_image().any()
    assert a.film.image().tobytes() == b.film.image().tobytes()


# [TRIVIAL]
def test_stats_report():
    s = small_scene("ghost_slab", (8, 8))
    res = run(s, spp=16, seed=0, threads=1)
    text = res.stats.report({"scene": "ghost_slab"})
    items = dict(line.split(": ", 1) for line in text.splitlines())
    assert items["scene"] == "ghost_slab"
    assert items["training_spp"] == "4"
    assert items["render_spp"] == "12"
    assert items["training_iterations"] == "1 3"
    assert int(items["subpath_samples"]) > 0
    assert int(items["chains_found"]) > 0
    assert 0.0 <= float(items["walk_success_rate"]) <= 1.0
    assert int(items["guide_leaves"]) == res.guide.tree.leaf_count


# [DERIVED]
def test_chain_part_is_bounded_by_the_total():
    s = small_scene("ghost_slab", (8, 8))
    res = run(s, spp=16, seed=6, threads=1, mode="sms-uniform")
    total, chain = res.film.image(), res.film.chain_image()
    assert chain.any()
    assert np.all(chain <= total + 1e-12)


# [TRIVIAL]
def test_train_probe_records_a_single_configuration():
    s = small_scene("ghost_slab")
    cfg = Configuration([0.5, 0.2, 2.5], [0.0, 0.0, -1.0], [1.0, 0.0, 1.1])
    guide, recs = train_probe(s, cfg, [200, 400], seed=1)
    assert len(recs) > 0 and guide.sample_count == len(recs)
    assert_allclose(recs["x_d"], np.broadcast_to(cfg.x_d, (len(recs), 3)), atol=1e-6)
    assert_allclose(recs["x_l"], np.broadcast_to(cfg.x_l, (len(recs), 3)), atol=1e-6)
