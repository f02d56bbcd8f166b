import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeline import evaluation as E
from shapeline.config import RunConfig
from shapeline.errors import ConfigError, ProtocolError
from shapeline.synth import build_dataset


def brute_force(preds, labels):
    """Exact per-class counts with Fractions; macro over classes present in labels."""
    present = sorted(set(labels))
    ps, rs, fs = [], [], []
    for c in present:
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        ps.append(p), rs.append(r), fs.append(f)
    n = len(present)
    return float(sum(ps) / n), float(sum(rs) / n), float(sum(fs) / n)


def test_macro_example():
    r = E.precision_recall_f1([0, 1, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2], 3)
    assert round(r.macro_precision, 4) == 0.8889
    assert round(r.macro_recall, 4) == 0.8333
    assert round(r.macro_f1, 4) == 0.8222
    assert r.confusion == [[1, 1, 0], [0, 2, 0], [0, 0, 2]]


def test_perfect_and_absent_classes():
    r = E.precision_recall_f1([3, 5, 5], [3, 5, 5], 8)
    assert r.macro_precision == r.macro_recall == r.macro_f1 == 1.0
    assert r.classes == [3, 5]
    with pytest.raises(ValueError):
        E.precision_recall_f1([], [])
    with pytest.raises(ValueError):
        E.precision_recall_f1([1, 2], [1])


def test_metrics_match_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n_classes = int(rng.integers(2, 8))
        n = int(rng.integers(1, 30))
        labels = rng.integers(0, n_classes, n).tolist()
        preds = rng.integers(0, n_classes, n).tolist()
        got = E.precision_recall_f1(preds, labels, n_classes)
        want = brute_force(preds, labels)
        assert abs(got.macro_precision - want[0]) < 1e-12
        assert abs(got.macro_recall - want[1]) < 1e-12
        assert abs(got.macro_f1 - want[2]) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_metrics_permutation_invariant_and_bounded(pairs, rnd):
    preds, labels = map(list, zip(*pairs))
    base = E.precision_recall_f1(preds, labels, 6)
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    perm = E.precision_recall_f1([preds[i] for i in order], [labels[i] for i in order], 6)
    assert (base.macro_precision, base.macro_recall, base.macro_f1) == \
        (perm.macro_precision, perm.macro_recall, perm.macro_f1)
    for v in (base.macro_precision, base.macro_recall, base.macro_f1):
        assert 0.0 <= v <= 1.0


def test_split_examples():
    labels = np.repeat(np.arange(28), 10)
    sp = E.stratified_split(labels, 0.5, 0)
    assert sp.train.size == sp.test.size == 140
    assert np.all(np.bincount(labels[sp.train]) == 5)
    one = E.stratified_split(labels, 0.1, 3)
    assert np.all(np.bincount(labels[one.train]) == 1)
    again = E.stratified_split(labels, 0.1, 3)
    assert np.array_equal(one.train, again.train)
    assert not np.array_equal(one.train, E.stratified_split(labels, 0.1, 4).train)


@settings(max_examples=50, deadline=None)
@given(sizes=st.lists(st.integers(2, 12), min_size=2, max_size=8),
       rate=st.floats(0.05, 0.95), seed=st.integers(0, 10 ** 6))
def test_split_partitions_every_class(sizes, rate, seed):
    labels = np.concatenate([np.full(s, c) for c, s in enumerate(sizes)])
    sp = E.stratified_split(labels, rate, seed)
    assert np.intersect1d(sp.train, sp.test).size == 0
    assert np.union1d(sp.train, sp.test).size == labels.size
    for c, s in enumerate(sizes):
        k = int(np.sum(labels[sp.train] == c))
        assert 1 <= k <= s - 1
        assert abs(k - rate * s) <= 1.0


def test_split_errors_and_groups():
    with pytest.raises(ProtocolError):
        E.stratified_split([0, 0, 1], 0.5, 0)
    with pytest.raises(ConfigError):
        E.stratified_split([0, 0, 1, 1], 1.0, 0)
    labels = np.tile(np.arange(4), 5)
    groups = np.repeat(np.arange(5), 4)
    sp = E.stratified_split(labels, 0.6, 1, groups)
    assert not set(groups[sp.train]) & set(groups[sp.test])
    assert len(set(groups[sp.train])) == 3


def test_sweep_statistics_and_format():
    fake = iter([0.9, 0.94, 0.98])

    def run(method, rate, seed):
        v = next(fake)
        return E.MetricsReport([0], [v], [v], [v], v, v, v, [[1]], 1)

    rep = E.sweep(run, ["m"], rates=[0.5], repetitions=3)
    mean, std, vals = rep.results["m"][0.5]["f1"]
    assert mean == pytest.approx(0.94) and round(std, 4) == 0.0327 and vals == [0.9, 0.94, 0.98]
    assert rep.seeds == [0, 1, 2]
    assert E.format_mean_std(0.9381, 0.066) == "93.81± 6.60"
    assert "94.00± 3.27" in rep.table()
    assert rep.plot_data_csv().splitlines() == ["method,rate,mean,std", "m,0.50,0.940000,0.032660"]
    json.loads(rep.to_json())


def test_sweep_single_repetition_has_zero_std():
    def run(method, rate, seed):
        return E.MetricsReport([0], [0.5], [0.5], [0.5], 0.5, 0.5, 0.5, [[1]], 1)

    rep = E.sweep(run, ["a", "b"], rates=[0.1, 0.2], repetitions=1)
    assert set(rep.results) == {"a", "b"}
    assert all(by[m][1] == 0.0 for rates in rep.results.values() for by in rates.values() for m in E.METRICS)


def test_sweep_reports_failing_seed():
    def run(method, rate, seed):
        if seed == 2:
            raise ValueError("boom")
        return E.MetricsReport([0], [1.0], [1.0], [1.0], 1.0, 1.0, 1.0, [[1]], 1)

    with pytest.raises(ValueError, match="seed=2"):
        E.sweep(run, ["zcr"], rates=[0.3], repetitions=4)


def test_label_subset_check():
    E.check_label_subset([1, 2], [0, 1, 2])
    with pytest.raises(ProtocolError):
        E.check_label_subset([1, 27], [0, 1, 2])


def test_report_files(tmp_path):
    r = E.precision_recall_f1([0, 1, 1], [0, 1, 0], 2)
    paths = E.write_report(r, tmp_path, "r", {0: "Normal", 1: "Forte"})
    assert [p.name for p in paths] == ["r.json", "r.txt", "r_confusion.csv"]
    assert json.loads(paths[0].read_text())["macro_recall"] == r.macro_recall
    assert "Forte" in paths[1].read_text()
    assert paths[2].read_text().splitlines() == ["true\\pred,0,1", "0,1,1", "1,0,1"]


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    return build_dataset(4, "basic", tmp_path_factory.mktemp("ds"), seed=2)


def test_experiment_baseline_is_deterministic(small_manifest):
    cfg = RunConfig().override("eval", baseline_epochs=50)
    a = E.Experiment(small_manifest, cfg).run("spflux", 0.5, 7, n_classes=9)
    b = E.Experiment(small_manifest, cfg).run("spflux", 0.5, 7, n_classes=9)
    assert a.to_json() == b.to_json()
    assert a.meta["n_train"] == 18 and a.n_test == 18
    with pytest.raises(ConfigError):
        E.Experiment(small_manifest, cfg).run("svm", 0.5, 0)


def test_experiment_sresnn_runs(small_manifest):
    cfg = RunConfig().override("train", epochs=1).override("cqt", height=32, width=32)
    rep = E.Experiment(small_manifest, cfg).run("sresnn", 0.5, 0, n_classes=9)
    assert rep.n_test == 18 and rep.meta["method"] == "sresnn"
