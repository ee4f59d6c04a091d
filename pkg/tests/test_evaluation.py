import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poredet.evaluation import (Criterion, EvalReport, MatchResult, SplitLists, compute_metrics, crossval,
                                evaluate_dataset, f_score, get_protocol, instantiate_protocol, kfold_assign,
                                kfold_splits, match_bidirectional, match_threshold, protocol_registry)
from poredet.imagecore import PoreSet

points = st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60)), max_size=30, unique=True)


def bidir_oracle(det, gt):
    """Literal definition: d is correct iff d is the nearest detection of its nearest gt."""
    def nearest(p, pool):
        best = None
        for i, q in enumerate(pool):
            dd = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
            if best is None or dd < best[0]:
                best = (dd, i)
        return best[1]
    if not det or not gt:
        return set()
    return {(i, nearest(d, gt)) for i, d in enumerate(det) if nearest(gt[nearest(d, gt)], det) == i}


def greedy_oracle(det, gt, metric, tau):
    cands = []
    for i, d in enumerate(det):
        for j, g in enumerate(gt):
            dx, dy = abs(d[0] - g[0]), abs(d[1] - g[1])
            dist = math.hypot(dx, dy) if metric == "euclidean" else dx + dy
            if dist <= tau:
                cands.append((dist, i, j))
    used_d, used_g, pairs = set(), set(), set()
    for _, i, j in sorted(cands):
        if i not in used_d and j not in used_g:
            used_d.add(i)
            used_g.add(j)
            pairs.add((i, j))
    return pairs


def P(pts):
    return PoreSet.from_points(pts)


# ---------------------------------------------------------------- matching

def test_bidirectional_examples():
    assert match_bidirectional(P([(10, 10)]), P([(11, 10)])).pairs == ((0, 0),)
    m = match_bidirectional(P([(10, 10), (12, 10)]), P([(11, 10)]))
    # both detections are at distance 1; the lower index wins the tie
    assert m.pairs == ((0, 0),) and m.unmatched_detections == (1,)
    m = match_bidirectional(P([(10, 10), (13, 10)]), P([(11, 10)]))
    assert m.pairs == ((0, 0),) and m.unmatched_detections == (1,)
    assert match_bidirectional(P([]), P([(1, 1)])).unmatched_gt == (0,)


def test_threshold_examples():
    for tau in (0.5, 3.0):
        assert match_threshold(P([(4, 4)]), P([(4, 4)]), "euclidean", tau).pairs == ((0, 0),)
    assert match_threshold(P([(0, 0)]), P([(3, 4)]), "euclidean", 4).pairs == ()
    assert match_threshold(P([(0, 0)]), P([(3, 4)]), "euclidean", 5).pairs == ((0, 0),)
    assert match_threshold(P([(0, 0)]), P([(3, 4)]), "manhattan", 5).pairs == ()
    with pytest.raises(ValueError):
        match_threshold(P([]), P([]), "euclidean", 0)


@settings(max_examples=150)
@given(points, points)
def test_bidirectional_matches_oracle(det, gt):
    m = match_bidirectional(P(det), P(gt))
    assert set(m.pairs) == bidir_oracle(det, gt)


@settings(max_examples=150)
@given(points, points, st.sampled_from(["euclidean", "manhattan"]), st.floats(0.5, 12))
def test_threshold_matches_oracle(det, gt, metric, tau):
    m = match_threshold(P(det), P(gt), metric, tau)
    assert set(m.pairs) == greedy_oracle(det, gt, metric, tau)


@settings(max_examples=100)
@given(points, points, st.integers(0, 30), st.integers(0, 30), st.sampled_from(["bidirectional", "euclidean:4"]))
def test_matching_properties(det, gt, sx, sy, crit):
    c = Criterion.parse(crit)
    m = c.match(P(det), P(gt))
    ds = [d for d, _ in m.pairs]
    gs = [g for _, g in m.pairs]
    assert len(set(ds)) == len(ds) and len(set(gs)) == len(gs)
    assert len(m.pairs) <= min(len(det), len(gt))
    assert len(m.pairs) + len(m.unmatched_detections) == len(det)
    assert len(m.pairs) + len(m.unmatched_gt) == len(gt)
    shifted = c.match(P([(x + sx, y + sy) for x, y in det]), P([(x + sx, y + sy) for x, y in gt]))
    assert shifted.pairs == m.pairs
    if gt and det:
        far = det + [(500, 500)]
        m2 = c.match(P(far), P(gt))
        assert m2.pairs == m.pairs
    if m.pairs:
        assert compute_metrics(m2, len(far), len(gt)).fdr > compute_metrics(m, len(det), len(gt)).fdr


def test_criterion_parse():
    assert str(Criterion.parse("bidirectional")) == "bidirectional"
    assert Criterion.parse("manhattan:6") == Criterion("manhattan", 6.0)
    for bad in ("euclid:3", "euclidean", "euclidean:-1", "bidirectional:3", "manhattan:x"):
        with pytest.raises(ValueError):
            Criterion.parse(bad)


# ---------------------------------------------------------------- metrics

@pytest.mark.parametrize("tdr,fdr,f", [(95.56, 8.1, 93.69), (60.6, 30.5, 64.74), (84.8, 17.6, 83.58),
                                       (88.79, 14.49, 87.12), (92.81, 7.3, 92.75), (75.9, 23.0, 76.44),
                                       (86.1, 8.6, 88.67)])
def test_f_score_published_rows(tdr, fdr, f):
    assert f_score(tdr, fdr) == pytest.approx(f, abs=0.01)


def test_compute_metrics_counts():
    m = compute_metrics(9, 10, 12)
    assert m.tdr == pytest.approx(75.0) and m.fdr == pytest.approx(10.0)
    assert m.f == pytest.approx(2 * 75 * 90 / 165)
    assert compute_metrics(5, 5, 5) == type(m)(100.0, 0.0, 100.0)
    assert compute_metrics(0, 0, 4).f == 0.0
    with pytest.raises(ValueError):
        compute_metrics(0, 3, 0)
    with pytest.raises(ValueError):
        compute_metrics(4, 3, 5)


@given(st.floats(0, 100), st.floats(0, 100))
def test_f_between_its_parts(tdr, fdr):
    f = f_score(tdr, fdr)
    lo, hi = sorted((tdr, 100 - fdr))
    assert lo - 1e-9 <= f <= hi + 1e-9
    assert 0 <= f <= 100
    if math.isclose(fdr, 100 - tdr):
        assert f == pytest.approx(tdr)


# ---------------------------------------------------------------- reports

def test_evaluate_dataset_aggregates():
    gt = {"a": P([(0, 0), (10, 0), (20, 0), (30, 0)]), "b": P([(0, 0), (10, 10)])}
    det = {"a": P([(0, 0), (10, 1), (50, 50)]), "b": P([(1, 0)])}
    rep = evaluate_dataset(det, gt)
    # hand-pooled: 3 matches, 4 detections, 6 gt
    assert rep.aggregate.tdr == pytest.approx(50.0)
    assert rep.aggregate.fdr == pytest.approx(25.0)
    assert rep.aggregate.f == pytest.approx(f_score(50, 25))
    a, b = rep.per_image
    assert (a.stem, a.n_matched, b.n_matched) == ("a", 2, 1)
    assert rep.macro.tdr == pytest.approx((50 + 50) / 2)
    single = evaluate_dataset({"a": det["a"]}, {"a": gt["a"]})
    assert single.aggregate.f == pytest.approx(single.per_image[0].f)
    twin = evaluate_dataset({"x": det["a"], "y": det["a"]}, {"x": gt["a"], "y": gt["a"]})
    assert twin.aggregate.f == pytest.approx(single.aggregate.f)
    with pytest.raises(KeyError):
        evaluate_dataset({"a": det["a"]}, gt)


def test_report_serialisation():
    gt = {"a": P([(0, 0), (5, 5)])}
    rep = evaluate_dataset({"a": P([(0, 0)])}, gt, "euclidean:3", {"method": "x"})
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    d = json.loads(rep.to_json())
    assert set(d) >= {"per_image", "aggregate", "criterion", "parameters"}
    assert set(d["aggregate"]) == {"tdr", "fdr", "f"}
    text = rep.to_text()
    assert "euclidean:3" in text and "micro" in text and "66.67" in text


# ---------------------------------------------------------------- protocols and folds

def test_protocol_templates():
    reg = {p.id: p for p in protocol_registry()}
    assert list(reg) == ["I", "II", "III", "IV", "V", "VI", "VII", "VIII"]
    assert reg["VIII"].sizes() == (90, 0, 60)
    assert reg["VIII"].test == (("DBI", 30), ("DBII", 30))
    assert reg["VI"].sizes() == (15, 5, 10)
    assert reg["IV"].sizes() == (18, 6, 6)
    with pytest.raises(KeyError):
        get_protocol("IX")


def test_protocol_instantiation():
    pools = {"DBI": [f"a{i}" for i in range(30)], "DBII": [f"b{i}" for i in range(150)]}
    s = instantiate_protocol(get_protocol("VIII"), pools, seed=1)
    assert (len(s.train), len(s.val), len(s.test)) == (90, 0, 60)
    assert all(x.startswith("b") for x in s.train)
    assert not set(s.train) & set(s.test)
    assert s == instantiate_protocol(get_protocol("VIII"), pools, seed=1)
    with pytest.raises(ValueError):
        instantiate_protocol(get_protocol("VIII"), {"DBI": pools["DBI"], "DBII": pools["DBII"][:100]})
    with pytest.raises(ValueError):
        SplitLists(("a",), ("a",), ())


def test_kfold_sizes_and_partition():
    stems = [f"s{i:03d}" for i in range(740)]
    folds = kfold_assign(stems, 5, seed=3)
    assert [len(f) for f in folds] == [148] * 5
    assert sorted(s for f in folds for s in f) == stems
    assert folds == kfold_assign(stems, 5, seed=3)
    assert folds != kfold_assign(stems, 5, seed=4)
    for i, sp in enumerate(kfold_splits(stems, 5, seed=3)):
        assert list(sp.test) == folds[i]
        assert len(sp.val) == 1 and len(sp.train) == 591
    with pytest.raises(ValueError):
        kfold_assign(stems[:3], 5)
    with pytest.raises(ValueError):
        kfold_assign(stems, 1)


def test_crossval_runs_and_summarises():
    from poredet.datasets import SyntheticParams, synthesize
    from poredet.fcn import FcnConfig
    cache = {}

    def loader(stem):
        if stem not in cache:
            s = synthesize(SyntheticParams(width=64, height=48, seed=int(stem)))
            cache[stem] = (s.image, s.pores)
        return cache[stem]

    cfg = FcnConfig(patch_size=13, pore_radius=4, channels=(4,) * 5, max_epochs=1, epoch_positives=100)
    res = crossval([str(i) for i in range(6)], loader, 3, cfg, seed=0)
    assert len(res.reports) == 3
    assert res.mean_f == pytest.approx(np.mean(res.fold_f))
    assert "mean F" in res.summary()
    tested = [s for sp in res.splits for s in sp.test]
    assert sorted(tested) == [str(i) for i in range(6)]
