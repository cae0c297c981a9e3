import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from adamcu import tensor as T
from adamcu.centers import CenterBatch, DomainCenters
from adamcu.mcu import (CONTRAST_KEYS, Anchor, ContrastConfig, ImagePool, Level, build_units,
                        c2c_loss, p2p_loss, select_anchors, total_contrastive_loss,
                        weighted_infonce)

BIG = ContrastConfig(temperature=0.5, n_pos=100, n_neg=100, max_anchors_per_image=100)


def unit_vectors(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_instance(seed, same_domain=None):
    """Two images, <= 10 candidate pixels in total, C <= 3."""
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 4))
    d = int(rng.integers(2, 5))
    sizes = rng.integers(2, 6, size=2)
    if same_domain is None:
        same_domain = bool(rng.integers(2))
    domains = ["source", "source"] if same_domain else ["source", "target"]
    images = []
    for dom, k in zip(domains, sizes):
        label = rng.integers(0, c, size=k)
        label[rng.uniform(size=k) < 0.15] = -1
        images.append({"domain": dom, "emb": unit_vectors(rng, k, d), "label": label,
                       "pred": rng.integers(0, c, size=k), "anchor_ok": rng.uniform(size=k) < 0.8})
    W = rng.uniform(0.05, 1.0, size=(c, c))
    np.fill_diagonal(W, rng.uniform(0.5, 1.0, size=c))
    return images, W, c, d


def library_p2p(images, W, cfg=BIG, seed=0):
    table = T.Tensor(np.concatenate([im["emb"] for im in images]))
    rng = np.random.default_rng(seed)
    pools, anchors, off = [], [], 0
    for i, im in enumerate(images):
        pool = ImagePool(im["domain"], i, off, im["label"].astype(np.int64))
        anchors += select_anchors(im["pred"], im["label"], im["anchor_ok"], pool, cfg, rng)
        pools.append(pool)
        off += len(im["label"])
    units = {lv: build_units(lv, anchors, pools, cfg, rng) for lv in Level}
    return {lv.value: p2p_loss(units[lv], table, W, cfg) for lv in Level}, units, table


def test_p2p_single_positive_single_negative():
    # anchor . pos = 1, anchor . neg = 0, temperature 1
    table = T.Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    unit_cfg = ContrastConfig(temperature=1.0)
    pool = ImagePool("source", 0, 0, np.array([0, 0, 1]))
    a = Anchor("source", 0, 0, 0, 0)
    units = build_units(Level.INTRA_IMAGE, [a], [pool], unit_cfg, np.random.default_rng(0))
    got = p2p_loss(units, table, np.ones((2, 2)), unit_cfg).item()
    assert got == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert got == pytest.approx(0.3133, abs=1e-4)


def test_p2p_symmetric_is_ln2():
    table = T.Tensor(unit_vectors(np.random.default_rng(0), 1, 3).repeat(3, axis=0))
    pool = ImagePool("source", 0, 0, np.array([1, 1, 0]))
    units = build_units(Level.INTRA_IMAGE, [Anchor("source", 0, 0, 1, 0)], [pool], BIG,
                        np.random.default_rng(0))
    assert p2p_loss(units, table, np.ones((2, 2)), BIG).item() == pytest.approx(math.log(2), abs=1e-12)


def test_empty_units_zero_loss_zero_grad():
    table = T.parameter(np.ones((3, 2)))
    with T.Tape():
        loss = p2p_loss([], table, np.ones((2, 2)), BIG)
        assert loss.item() == 0.0
        assert T.backward(loss) == {}


def test_c2c_orthogonal_two_categories():
    vec = np.eye(2)
    cb = {dom: CenterBatch(T.Tensor(vec), np.array([True, True]), DomainCenters(vec, np.ones(2, bool)))
          for dom in ("source", "target")}
    cfg = ContrastConfig(temperature=1.0)
    for cross in (False, True):
        got = c2c_loss(cb, np.ones((2, 2)), cfg, cross_domain=cross).item()
        assert got == pytest.approx(0.3133, abs=1e-4)


def test_c2c_single_valid_category_is_zero():
    vec = np.eye(3)
    cb = {dom: CenterBatch(T.Tensor(vec), np.array([True, False, False]), DomainCenters(vec, np.ones(3, bool)))
          for dom in ("source", "target")}
    assert c2c_loss(cb, np.ones((3, 3)), BIG, cross_domain=True).item() == 0.0
    assert c2c_loss(cb, np.ones((3, 3)), BIG, cross_domain=False).item() == 0.0


def test_aligned_centres_minimise_cross_domain_loss():
    rng = np.random.default_rng(3)
    src = unit_vectors(rng, 3, 4)
    aligned = src.copy()
    s_unit = oracles.unit_loss(src[0], 0, [(aligned[0], 0)], [(aligned[1], 1), (aligned[2], 2)],
                               np.ones((3, 3)), 0.1)
    for _ in range(20):
        p = unit_vectors(rng, 1, 4)[0]
        assert s_unit <= oracles.unit_loss(src[0], 0, [(p, 0)], [(aligned[1], 1), (aligned[2], 2)],
                                           np.ones((3, 3)), 0.1) + 1e-12


@pytest.mark.parametrize("seed", range(50))
def test_p2p_matches_enumeration(seed):
    images, W, c, d = random_instance(seed)
    got, _, _ = library_p2p(images, W)
    want = oracles.enumerate_p2p(images, W, BIG.temperature)
    for lv in ("intra", "cross", "domain"):
        assert got[lv].item() == pytest.approx(want[lv], abs=1e-10)


def test_enumeration_instances_are_not_degenerate():
    nonzero = 0
    for seed in range(50):
        images, W, _, _ = random_instance(seed)
        nonzero += sum(v > 0 for v in oracles.enumerate_p2p(images, W, BIG.temperature).values())
    assert nonzero >= 25


@pytest.mark.parametrize("seed", range(50))
def test_c2c_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    c = int(rng.integers(2, 4))
    d = 3
    centers = {dom: unit_vectors(rng, c, d) for dom in ("source", "target")}
    valid = {dom: rng.uniform(size=c) < 0.8 for dom in ("source", "target")}
    W = rng.uniform(0.05, 1.0, size=(c, c))
    cb = {dom: CenterBatch(T.Tensor(centers[dom]), valid[dom], DomainCenters(centers[dom], valid[dom]))
          for dom in centers}
    for cross in (False, True):
        got = c2c_loss(cb, W, BIG, cross).item()
        assert got == pytest.approx(oracles.enumerate_c2c(centers, valid, W, BIG.temperature, cross), abs=1e-10)


def test_all_ones_single_positive_equals_plain_infonce():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n_neg = int(rng.integers(1, 6))
        d = int(rng.integers(2, 6))
        emb = unit_vectors(rng, 2 + n_neg, d)
        cats = np.array([0, 0] + list(rng.integers(1, 3, size=n_neg)))
        pool = ImagePool("source", 0, 0, cats)
        t = float(rng.uniform(0.05, 1.0))
        cfg = ContrastConfig(temperature=t, n_pos=8, n_neg=32)
        units = build_units(Level.INTRA_IMAGE, [Anchor("source", 0, 0, 0, 0)], [pool], cfg, rng)
        got = p2p_loss(units, T.Tensor(emb), np.ones((3, 3)), cfg).item()
        assert got == pytest.approx(oracles.plain_infonce(emb[0], emb[1], emb[2:], t), abs=1e-10)


def test_unit_placement_contracts():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        k = 12
        pools, anchors = [], []
        for i, dom in enumerate(["source", "source", "target", "target"]):
            cats = rng.integers(-1, 3, size=k)
            pool = ImagePool(dom, i, i * k, cats)
            pools.append(pool)
            anchors += select_anchors(rng.integers(0, 3, size=k), cats, None, pool, BIG, rng)
        for lv in Level:
            for u in build_units(lv, anchors, pools, ContrastConfig(n_pos=3, n_neg=4), rng):
                a = u.anchor
                assert (u.pos_categories == a.category).all()
                assert (u.neg_categories != a.category).all() and (u.neg_categories >= 0).all()
                assert 1 <= len(u.pos_rows) <= 3 and 1 <= len(u.neg_rows) <= 4
                rows = np.concatenate([u.pos_rows, u.neg_rows])
                img = pools[u.sample_image]
                assert ((rows >= img.offset) & (rows < img.offset + k)).all()
                if lv == Level.INTRA_IMAGE:
                    assert u.sample_image == a.image and a.row not in u.pos_rows
                elif lv == Level.CROSS_IMAGE:
                    assert u.sample_image != a.image and u.sample_domain == a.domain
                else:
                    assert u.sample_domain != a.domain


def test_anchor_selection_rules():
    pool = ImagePool("target", 0, 0, np.zeros(6, int))
    pred = np.array([0, 1, 1, 2, 2, 0])
    labels = np.array([0, 0, 2, 2, -1, 1])
    assert select_anchors(labels.clip(0), labels.clip(0), None, pool, BIG, np.random.default_rng(0)) == []
    got = select_anchors(pred, labels, None, pool, BIG, np.random.default_rng(0))
    assert [a.pixel for a in got] == [1, 2, 5]
    eligible = np.array([True, False, True, True, True, True])
    got = select_anchors(pred, labels, eligible, pool, BIG, np.random.default_rng(0))
    assert [a.pixel for a in got] == [2, 5]
    capped = select_anchors(pred, labels, None, pool, ContrastConfig(max_anchors_per_image=2),
                            np.random.default_rng(0))
    assert len(capped) == 2


def test_total_is_sum_of_components():
    images, W, c, d = random_instance(7, same_domain=False)
    got, units, table = library_p2p(images, W)
    vec = unit_vectors(np.random.default_rng(1), c, d)
    cb = {dom: CenterBatch(T.Tensor(vec), np.ones(c, bool), DomainCenters(vec, np.ones(c, bool)))
          for dom in ("source", "target")}
    parts = total_contrastive_loss(units, table, cb, W, BIG)
    assert set(parts) == set(CONTRAST_KEYS)
    assert parts["c2c_cross"].item() == 0.0
    assert math.fsum(v.item() for v in parts.values()) == pytest.approx(
        sum(v.item() for v in parts.values()), abs=1e-12)
    off = total_contrastive_loss(units, table, cb, W, BIG, image_levels=False, domain_level=False)
    assert all(v.item() == 0.0 for v in off.values())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.05, 2.0))
def test_loss_positive_and_monotone_in_negative_similarity(seed, temp):
    rng = np.random.default_rng(seed)
    d = 4
    a = unit_vectors(rng, 1, d)
    p = unit_vectors(rng, 2, d)[None]
    n = unit_vectors(rng, 3, d)[None]
    wp = rng.uniform(0.05, 1, size=(1, 2))
    wn = rng.uniform(0.05, 1, size=(1, 3))
    f = lambda neg: weighted_infonce(T.Tensor(a), T.Tensor(p), np.ones((1, 2)), T.Tensor(neg),
                                     np.ones((1, 3)), wp, wn, temp).item()
    base = f(n)
    assert base > 0
    # pull the first negative away from the anchor
    moved = n.copy()
    moved[0, 0] = moved[0, 0] - 0.5 * a[0]
    if np.dot(moved[0, 0], a[0]) <= np.dot(n[0, 0], a[0]):
        assert f(moved) <= base + 1e-12


def test_p2p_gradients_match_finite_differences():
    for seed in range(100):
        images, W, c, d = random_instance(seed, same_domain=False)
        _, units, table = library_p2p(images, W)
        units = [u for lv in Level for u in units[lv]]
        if len(units) >= 2:
            break
    assert len(units) >= 2
    x = table.data.copy()
    assert T.finite_diff_check(lambda t: p2p_loss(units, t, W, BIG), x) < 1e-4


def test_c2c_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    vec = unit_vectors(rng, 6, 3)
    W = rng.uniform(0.05, 1, size=(3, 3))
    valid = np.ones(3, bool)

    def f(t):
        cb = {"source": CenterBatch(T.take(t, np.arange(3)), valid, None),
              "target": CenterBatch(T.take(t, np.arange(3, 6)), valid, None)}
        return T.add(c2c_loss(cb, W, BIG, True), c2c_loss(cb, W, BIG, False))

    assert T.finite_diff_check(f, vec) < 1e-4
