import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mpguide.guiding import (RECORD_DTYPE, GuideModel, RecordBuffer, SubPathSample, decode_code,
                             encode_code, fit, footprint_kappa, great_circle_nearest, oct_decode,
                             oct_encode, pack_rows, rebuild, record, sample_weights, to_samples)

BOUNDS = (np.zeros(3), np.ones(3))


def make_records(count, seed=0, n=None, bsdf=None):
    rng = np.random.default_rng(seed)
    rows = np.zeros((count, 14))
    rows[:, 0:6] = rng.random((count, 6))
    d = rng.normal(size=(count, 3))
    rows[:, 6:9] = d / np.linalg.norm(d, axis=1, keepdims=True)
    lengths = rng.integers(1, 4, count) if n is None else np.full(count, n)
    rows[:, 9] = lengths
    rows[:, 10] = [rng.integers(0, 1 << int(k)) for k in lengths]
    rows[:, 11] = rng.uniform(0.1, 2.0, count)
    rows[:, 12] = rng.integers(1, 20, count)
    rows[:, 13] = rng.uniform(0.05, 1.0, count) if bsdf is None else bsdf
    return pack_rows(rows)


# [TRIVIAL]
def test_record_is_forty_bytes():
    assert RECORD_DTYPE.itemsize == 40


# [TRIVIAL]
def test_code_round_trip():
    n = np.array([1, 2, 5, 13])
    bits = np.array([1, 2, 17, 8191])
    code = encode_code(n, bits, copy=np.array([False, True, False, True]))
    dn, db, dc = decode_code(code)
    assert_allclose(dn, n)
    assert_allclose(db, bits)
    assert list(dc) == [False, True, False, True]
    with pytest.raises(ValueError):
        encode_code(14, 0)


# [DERIVED]
@given(st.tuples(*[st.floats(-1.0, 1.0)] * 3).filter(lambda v: sum(c * c for c in v) > 1e-4))
@settings(max_examples=300, deadline=None)
def test_octahedral_round_trip(v):
    d = np.array(v) / np.linalg.norm(v)
    back = oct_decode(oct_encode(d))
    assert np.arccos(np.clip(back @ d, -1.0, 1.0)) < 1e-4


# [TRIVIAL]
def test_sample_invariants():
    with pytest.raises(ValueError):
        SubPathSample((0, 0, 0), (1, 1, 1), (0, 0, 1), 1, 0, 0.0, 1.0)
    with pytest.raises(ValueError):
        SubPathSample((0, 0, 0), (1, 1, 1), (0, 0, 1), 1, 0, 1.0, 0.5)
    with pytest.raises(ValueError):
        SubPathSample((0, 0, 0), (1, 1, 1), (0, 0, 1), 2, 4, 1.0, 1.0)
    rows = np.zeros((1, 14))
    rows[0, 8] = 1.0
    rows[0, 9] = 1
    rows[0, 12] = 1.0
    with pytest.raises(ValueError):
        pack_rows(rows)


# [TRIVIAL]
def test_record_then_rebuild_single_sample():
    buf = RecordBuffer()
    s = SubPathSample((0.2, 0.3, 0.4), (0.5, 0.6, 0.7), (0.0, 0.0, 1.0), 2, 3, 0.5, 4.0, 0.3)
    record(buf, s)
    assert len(buf) == 1
    tree = rebuild(buf.array(), BOUNDS)
    assert tree.leaf_count == 1
    back = to_samples(tree.leaf_records(0))[0]
    assert back.n == 2 and back.bits == 3 and not back.copy
    assert back.throughput == pytest.approx(0.5)
    assert_allclose(back.x_d, s.x_d, rtol=1e-6)


# [PAPER]
def test_buffers_from_many_workers_conserve_counts():
    buffers = [RecordBuffer() for _ in range(8)]
    per = 10**5 // 8
    recs = make_records(10**5)

    def work(i):
        rows = np.zeros((per, 14))
        chunk = recs[i * per:(i + 1) * per]
        rows[:, 0:3] = chunk["x_d"]
        rows[:, 3:6] = chunk["x_l"]
        rows[:, 6:9] = oct_decode(chunk["dir"])
        n, bits, _ = decode_code(chunk["code"])
        rows[:, 9], rows[:, 10] = n, bits
        rows[:, 11], rows[:, 12] = chunk["throughput"], chunk["recip"]
        for j in range(0, per, 1000):
            buffers[i].extend_rows(rows[j:j + 1000])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    merged = RecordBuffer.merge(buffers)
    assert len(merged) == 10**5
    assert rebuild(merged, BOUNDS).size == 10**5


# [PAPER]
@pytest.mark.parametrize("size", [1, 10, 100, 10**3, 10**5])
def test_leaf_occupancy(size):
    tree = rebuild(make_records(size, seed=size), BOUNDS)
    assert tree.threshold == max(math.isqrt(size), 1)
    assert tree.real_counts().max() <= max(math.isqrt(size), 1)
    assert tree.real_counts().sum() == size
    if size == 1:
        assert tree.leaf_count == 1 and not tree.splits
    if size == 100:
        assert tree.threshold == 10


# [PAPER]
def test_twenty_sample_split_copies_two_each_way():
    tree = rebuild(make_records(20, seed=3), BOUNDS, epsilon=0.1)
    root = tree.splits[0]
    assert root.k == 20
    assert (root.copies_left, root.copies_right) == (2, 2)


# [PAPER]
@pytest.mark.parametrize("size, eps", [(10**3, 0.1), (5000, 0.1), (777, 0.25)])
def test_copies_per_side_bounded(size, eps):
    tree = rebuild(make_records(size, seed=size), BOUNDS, epsilon=eps)
    assert tree.splits
    for sp in tree.splits:
        cap = math.floor(eps * sp.k + 1e-9)
        assert sp.copies_left <= cap and sp.copies_right <= cap


# [PAPER]
def test_copies_are_never_recopied_and_flagged():
    tree = rebuild(make_records(2000, seed=9), BOUNDS)
    for leaf in range(tree.leaf_count):
        recs = tree.leaf_records(leaf)
        _, _, copy = decode_code(recs["code"])
        assert copy.sum() == tree.copy_counts()[leaf]
        assert not set(tree.leaf_copy_idx[leaf]) & set(tree.leaf_real_idx[leaf])
    owners = np.concatenate(tree.leaf_real_idx)
    assert len(np.unique(owners)) == 2000


# [DERIVED]
def test_children_partition_the_parent():
    recs = make_records(3000, seed=4)
    tree = rebuild(recs, BOUNDS)
    pts = tree.normalise(recs["x_d"], recs["x_l"])
    for leaf in range(tree.leaf_count):
        lo, hi = tree.leaf_lo[leaf], tree.leaf_hi[leaf]
        p = pts[tree.leaf_real_idx[leaf]]
        assert np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12)
        for i in tree.leaf_real_idx[leaf]:
            assert tree.query(recs["x_d"][i], recs["x_l"][i]) == leaf


# [DERIVED]
def test_query_examples():
    recs = make_records(4, seed=1)
    tree = rebuild(recs, BOUNDS)  # threshold 2: one split
    assert len(tree.splits) == 1
    sp = tree.splits[0]
    below = np.full(6, 0.5)
    above = np.full(6, 0.5)
    below[sp.axis] = sp.value - 1e-3
    above[sp.axis] = sp.value + 1e-3
    a = tree.query(below[:3], below[3:])
    b = tree.query(above[:3], above[3:])
    assert a != b
    assert tree.real_counts()[a] == tree.real_counts()[b] == 2
    single = rebuild(make_records(1), BOUNDS)
    assert single.query([9.0, 9.0, 9.0], [-9.0, 0.0, 0.0]) == 0


# [PAPER]
def test_selective_activation():
    empty = GuideModel.empty(BOUNDS)
    assert not empty.selective_active([0.5] * 3, [0.5] * 3)
    one = GuideModel.build(make_records(1), BOUNDS)
    assert one.selective_active([0.1] * 3, [0.9] * 3)


# [PAPER]
def test_every_leaf_keeps_a_real_sample():
    # each cut falls between distinct values, so no leaf is fed by copies alone
    for size in (2, 50, 2000):
        tree = rebuild(make_records(size, seed=size), BOUNDS, epsilon=0.45)
        assert np.all(tree.real_counts() >= 1)


# [PAPER]
def test_activation_ignores_copies():
    tree = rebuild(make_records(50, seed=5), BOUNDS)
    leaf = int(np.argmax(tree.copy_counts()))
    assert tree.copy_counts()[leaf] > 0
    x = 0.5 * (tree.leaf_lo[leaf] + tree.leaf_hi[leaf])
    assert tree.selective_active(x[:3], x[3:])
    tree.leaf_real_idx[leaf] = tree.leaf_real_idx[leaf][:0]
    assert not tree.selective_active(x[:3], x[3:])


# [DERIVED]
def test_fit_length_table():
    recs = make_records(4, seed=2)
    recs["throughput"] = 1.0
    recs["recip"] = 1.0
    recs["code"] = encode_code([2, 2, 2, 3], [0, 1, 0, 5])
    dist = fit(recs)
    assert dist.p_n[2] == pytest.approx(0.75)
    assert dist.p_n[3] == pytest.approx(0.25)
    assert dist.p_n.sum() == pytest.approx(1.0, abs=1e-12)
    assert dict(dist.p_tau[2]) == pytest.approx({0: 2 / 3, 1: 1 / 3})


# [PAPER]
def test_single_sample_class_gets_kappa_min():
    recs = make_records(1, n=1)
    dist = fit(recs, kappa_min=10.0)
    (mix,) = dist.mixtures.values()
    assert mix.kappa[0] == 10.0
    assert_allclose(footprint_kappa(np.array([[0.0, 0.0, 1.0]]), 7.0), [7.0])


# [DERIVED]
def test_two_directions_tenth_of_a_radian_apart():
    a = np.array([0.0, 0.0, 1.0])
    b = np.array([math.sin(0.1), 0.0, math.cos(0.1)])
    dirs = np.stack([a, b])
    assert_allclose(great_circle_nearest(dirs), [0.1, 0.1], rtol=1e-12)
    assert_allclose(footprint_kappa(dirs), [100.0, 100.0], rtol=1e-9)
    recs = make_records(2, n=1)
    recs["code"] = encode_code(1, 0)
    recs["dir"] = oct_encode(dirs)
    dist = fit(recs)
    # octahedral storage moves each direction by well under 1e-4 rad
    assert_allclose(dist.mixtures[(1, 0)].kappa, [100.0, 100.0], rtol=1e-2)
    exact = fit(recs, directions=dirs)
    assert_allclose(exact.mixtures[(1, 0)].kappa, [100.0, 100.0], rtol=1e-9)


# [DERIVED]
@given(st.integers(1, 400), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_fitted_tables_are_normalised(count, seed):
    dist = fit(make_records(count, seed=seed))
    assert abs(dist.p_n.sum() - 1.0) <= 1e-9
    for n, rows in dist.p_tau.items():
        assert abs(sum(p for _, p in rows) - 1.0) <= 1e-9
        for bits, _ in rows:
            mix = dist.mixtures[(n, bits)]
            assert abs(mix.weights.sum() - 1.0) <= 1e-9
            assert np.all((mix.kappa >= 10.0) & (mix.kappa <= 1e6))


# [DERIVED]
def test_constant_bsdf_product_weighting_changes_nothing():
    recs = make_records(500, seed=6, bsdf=0.25)
    plain = fit(recs)
    prod = fit(recs, product=True)
    assert_allclose(sample_weights(recs, True), sample_weights(recs, False), rtol=0, atol=0)
    assert_allclose(plain.p_n, prod.p_n, rtol=0, atol=1e-12)
    for key, mix in plain.mixtures.items():
        other = prod.mixtures[key]
        assert_allclose(mix.weights, other.weights, rtol=0, atol=1e-12)
        assert_allclose(mix.kappa, other.kappa, rtol=0, atol=0)


# [DERIVED]
def test_product_weighting_favours_bright_bsdf():
    recs = make_records(2, seed=7, n=1)
    recs["code"] = [encode_code(1, 0), encode_code(1, 1)]
    recs["throughput"] = 1.0
    recs["recip"] = 1.0
    recs["bsdf"] = [1.0, 0.25]
    dist = fit(recs, product=True)
    assert dict(dist.p_tau[1]) == pytest.approx({0: 0.8, 1: 0.2})


# [TRIVIAL]
def test_empty_fit():
    dist = fit(np.zeros(0, dtype=RECORD_DTYPE))
    assert dist.empty


# [TRIVIAL]
def test_model_dump_lists_every_leaf():
    model = GuideModel.build(make_records(300, seed=8), BOUNDS)
    text = model.dump()
    assert f"leaves: {model.tree.leaf_count}" in text
    assert text.count("fit ") == model.tree.leaf_count
    assert model.sample_count == 300
