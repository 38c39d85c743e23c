import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scatterforge.errors import DimensionError, SingleRunError, UndefinedAPError
from scatterforge.formats import FeatureMatrix
from scatterforge.learneval import (
    EvalReport,
    average_precision,
    evaluate,
    filter_single_run_attributes,
    l2_normalize,
    labels_from_manifest,
    loro_folds,
    pr_curve,
    primal_objective,
    random_split,
    scores,
    train_binary,
    train_ovr,
)
from scatterforge.simkit.tags import CANONICAL_ATTRIBUTES


def ap_oracle(s, y):
    """Precision at each positive, counting everything ranked at or above it.

    Rank of item i: items with a higher score, plus tied items that come
    no later in the input (stable order).
    """
    n = len(s)
    terms = []
    for i in range(n):
        if y[i] <= 0:
            continue
        above = [j for j in range(n) if s[j] > s[i] or (s[j] == s[i] and j <= i)]
        terms.append(sum(y[j] > 0 for j in above) / len(above))
    return sum(terms) / len(terms)


def sweep_oracle(s, y):
    """(threshold, recall, precision) for every distinct score, predicting s >= t."""
    P = sum(v > 0 for v in y)
    out = []
    for t in sorted(set(s), reverse=True):
        pred = [i for i in range(len(s)) if s[i] >= t]
        tp = sum(y[i] > 0 for i in pred)
        out.append((t, tp / P, tp / len(pred)))
    return out


def entry(i, run, attrs):
    return {"id": f"x{i}", "path": "", "run_id": run, "seed": i, "attributes": list(attrs)}


# -- SVM --------------------------------------------------------------------------


def test_separable_1d():
    X = np.array([[-1.0], [1.0]])
    y = np.array([-1.0, 1.0])
    svm = train_binary(X, y, C=100.0, tol=1e-6, max_epochs=1000)
    pred = np.sign(X @ svm.weights + svm.bias)
    assert np.array_equal(pred, y)


def test_duplicated_data_with_half_c():
    rng = np.random.default_rng(0)
    X = l2_normalize(rng.normal(size=(60, 2)) + [0.5, 0.0])
    y = np.where(X[:, 0] + 0.3 * rng.normal(size=60) > 0.3, 1.0, -1.0)
    a = train_binary(X, y, C=1.0, tol=1e-9, max_epochs=20_000)
    b = train_binary(np.repeat(X, 2, axis=0), np.repeat(y, 2), C=0.5, tol=1e-9, max_epochs=20_000)
    assert np.allclose(a.weights, b.weights, atol=1e-5)
    assert abs(a.bias - b.bias) < 1e-5
    g = np.stack(np.meshgrid(np.linspace(-1, 1, 41), np.linspace(-1, 1, 41)), -1).reshape(-1, 2)
    fa, fb = g @ a.weights + a.bias, g @ b.weights + b.bias
    clear = np.abs(fa) > 1e-4
    assert np.array_equal(np.sign(fa[clear]), np.sign(fb[clear]))


def test_primal_log_non_increasing():
    rng = np.random.default_rng(1)
    X = l2_normalize(rng.normal(size=(200, 10)))
    y = np.where(rng.random(200) < 0.3, 1.0, -1.0)
    svm = train_binary(X, y, C=1.0, tol=1e-4)
    log = np.array(svm.primal_log)
    assert np.all(np.diff(log) <= 0)
    assert primal_objective(X, y, svm.weights, svm.bias, 1.0) == pytest.approx(log[-1], rel=1e-12)
    assert log[-1] <= primal_objective(X, y, np.zeros(10), 0.0, 1.0)


def test_ovr_skips_single_class_attributes():
    X = np.random.default_rng(2).normal(size=(10, 3))
    labels = {"A": np.r_[np.ones(5), -np.ones(5)], "B": np.ones(10), "C": -np.ones(10)}
    m = train_ovr(X, labels)
    assert m.attributes == ["A"]
    assert m.skipped == {"B": "no negative examples", "C": "no positive examples"}
    assert set(scores(m, X)) == {"A"}


def test_ovr_rejects_nan():
    X = np.zeros((4, 2))
    X[1, 1] = np.nan
    with pytest.raises(ValueError):
        train_ovr(X, {"A": np.array([1, -1, 1, -1])})


def test_scores_dimension_mismatch():
    m = train_ovr(np.eye(4), {"A": np.array([1, -1, 1, -1])})
    with pytest.raises(DimensionError):
        scores(m, np.zeros((2, 5)))


def test_scores_are_raw_margins():
    X = np.random.default_rng(3).normal(size=(8, 3))
    m = train_ovr(X, {"A": np.array([1, 1, -1, -1, 1, -1, 1, -1])})
    s = scores(m, X)["A"]
    assert np.allclose(s, l2_normalize(X) @ m.weights[0] + m.biases[0])
    assert np.array_equal(s, scores(m, X)["A"])


def test_ovr_deterministic():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 6))
    Y = np.where(rng.random((50, 3)) < 0.4, 1.0, -1.0)
    assert train_ovr(X, Y, seed=3) == train_ovr(X, Y, seed=3)


# -- AP and PR --------------------------------------------------------------------


def test_ap_hand_case():
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, -1, 1, -1]) == pytest.approx(5 / 6, abs=1e-15)


def test_ap_perfect_ranking():
    assert average_precision([5, 4, 3, 2, 1], [1, 1, 1, -1, -1]) == 1.0


def test_ap_no_positives():
    with pytest.raises(UndefinedAPError):
        average_precision([1.0, 2.0], [-1, -1])


def test_ap_ties_keep_input_order():
    assert average_precision([1.0, 1.0], [-1, 1]) == 0.5
    assert average_precision([1.0, 1.0], [1, -1]) == 1.0


@settings(max_examples=200)
@given(st.integers(0, 2**32), st.integers(1, 200), st.integers(1, 5))
def test_ap_matches_oracle(seed, n, levels):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, levels * 10, size=n) / 10.0
    y = np.where(rng.random(n) < 0.4, 1, -1)
    y[rng.integers(n)] = 1
    assert abs(average_precision(s, y) - ap_oracle(list(s), list(y))) <= 1e-12


@given(st.integers(0, 2**32))
def test_ap_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=50)
    y = np.where(rng.random(50) < 0.3, 1, -1)
    y[0] = 1
    assert average_precision(s, y) == average_precision(np.exp(3 * s) + 7, y)


def test_ap_of_random_ranking_is_prevalence():
    rng = np.random.default_rng(5)
    for prevalence in (0.1, 0.3, 0.6):
        y = np.where(rng.random(100_000) < prevalence, 1, -1)
        assert abs(average_precision(rng.random(100_000), y) - prevalence) < 0.02


@pytest.mark.parametrize(
    "s, y",
    [
        ([4, 3, 2, 1], [1, 1, -1, -1]),  # perfect
        ([4, 3, 2, 1], [-1, -1, 1, 1]),  # inverted
        ([2, 2, 1, 1, 1, 0], [1, -1, 1, 1, -1, -1]),  # tied
    ],
)
def test_pr_curve_matches_sweep(s, y):
    curve = pr_curve(np.array(s, float), np.array(y))
    got = list(zip(curve.thresholds.tolist(), curve.recall.tolist(), curve.precision.tolist()))
    assert got == pytest.approx(sweep_oracle(s, y), abs=1e-15)


@given(st.integers(0, 2**32), st.integers(1, 60))
def test_pr_curve_properties(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 8, size=n).astype(float)
    y = np.where(rng.random(n) < 0.5, 1, -1)
    y[-1] = 1
    c = pr_curve(s, y)
    assert np.all(np.diff(c.recall) >= 0)
    assert c.recall[-1] == 1.0
    assert np.all((c.precision >= 0) & (c.precision <= 1))
    assert len(c.thresholds) == len(set(s.tolist()))


def test_pr_csv(tmp_path):
    c = pr_curve(np.array([0.5, 0.25]), np.array([1, -1]), "Ring")
    c.write_csv(tmp_path / "pr.csv")
    rows = list(csv.reader(open(tmp_path / "pr.csv")))
    assert rows[0] == ["threshold", "recall", "precision"]
    assert [float(v) for v in rows[2]] == [0.25, 1.0, 0.5]


# -- folds and filtering ----------------------------------------------------------


def test_loro_thirteen_runs():
    m = [entry(i, i % 13, ["Ring"]) for i in range(65)]
    folds = loro_folds(m)
    assert len(folds) == 13
    tests = [set(te) for _, te in folds]
    assert set().union(*tests) == {e["id"] for e in m}
    for a, b in itertools.combinations(tests, 2):
        assert not a & b
    for tr, te in folds:
        assert not set(tr) & set(te) and len(tr) + len(te) == 65


def test_loro_sizes():
    m = [entry(i, 0, []) for i in range(3)] + [entry(i, 1, []) for i in range(3, 10)]
    assert [len(te) for _, te in loro_folds(m)] == [3, 7]


def test_loro_noncontiguous_runs():
    m = [entry(0, 9, []), entry(1, 2, []), entry(2, 9, [])]
    folds = loro_folds(m)
    assert [te for _, te in folds] == [["x1"], ["x0", "x2"]]


def test_loro_single_run():
    with pytest.raises(SingleRunError):
        loro_folds([entry(0, 4, []), entry(1, 4, [])])


def test_random_split_partition():
    m = [entry(i, 0, []) for i in range(50)]
    (tr, te), = random_split(m, 0.8, seed=1)
    assert len(tr) == 40 and len(te) == 10
    assert set(tr) | set(te) == {e["id"] for e in m}
    assert random_split(m, 0.8, seed=1) == random_split(m, 0.8, seed=1)
    assert random_split(m, 0.8, seed=1) != random_split(m, 0.8, seed=2)


def test_filter_multi_and_single_run():
    m = [entry(0, 0, ["Ring"]), entry(1, 1, ["Ring", "Halo"]), entry(2, 4, ["FCC"]), entry(3, 4, ["FCC"])]
    rep = filter_single_run_attributes(m, ["Ring", "Halo", "FCC"])
    assert rep.kept == ["Ring"]
    assert rep.dropped == {"Halo": 1, "FCC": 4}


def test_filter_engineered_three_of_seventeen():
    rng = np.random.default_rng(6)
    single = {"BCC": 3, "Wedge beamstop": 7, "Many rings": 0}
    m = []
    for i in range(240):
        run = i % 12
        attrs = [a for a in CANONICAL_ATTRIBUTES if a not in single and rng.random() < 0.3]
        attrs += [a for a, r in single.items() if r == run and rng.random() < 0.5]
        m.append(entry(i, run, attrs or ["Ring"]))
    rep = filter_single_run_attributes(m)
    assert rep.dropped == single
    assert len(rep.kept) == 14


# -- evaluation -------------------------------------------------------------------


def synthetic_manifest(n=300, runs=5, attrs=("A", "B", "C", "D"), seed=7, p=0.4):
    rng = np.random.default_rng(seed)
    m = []
    for i in range(n):
        m.append(entry(i, i * runs // n, [a for a in attrs if rng.random() < p]))
    return m


@pytest.mark.parametrize("protocol", ["loro", "random"])
def test_oracle_features_give_perfect_map(protocol):
    attrs = ["A", "B", "C", "D"]
    m = synthetic_manifest(attrs=attrs)
    ids, Y = labels_from_manifest(m, attrs)
    rep = evaluate(m, FeatureMatrix(ids, (Y > 0).astype(float)), protocol=protocol, attributes=attrs)
    assert rep.mAP == 1.0
    assert all(v == 1.0 for v in rep.attribute_ap.values())


def test_noise_features_near_prevalence():
    attrs = ["A", "B", "C", "D"]
    m = synthetic_manifest(n=1000, attrs=attrs, p=0.5)
    ids = [e["id"] for e in m]
    X = np.random.default_rng(8).normal(size=(1000, 20))
    rep = evaluate(m, FeatureMatrix(ids, X), protocol="random", ratio=0.5, attributes=attrs)
    assert abs(rep.mAP - rep.prevalence_baseline) < 0.05


def test_evaluate_excludes_unseen_attribute():
    attrs = ["A", "B", "Z"]
    m = synthetic_manifest(attrs=("A", "B"))
    ids, Y = labels_from_manifest(m, attrs)
    rep = evaluate(m, FeatureMatrix(ids, (Y > 0).astype(float)), attributes=attrs)
    assert "Z" in rep.excluded and "Z" not in rep.attribute_ap
    assert rep.mAP == np.mean(list(rep.attribute_ap.values()))


def test_evaluate_filter_flag():
    m = synthetic_manifest(attrs=("A", "B"))
    m[0]["attributes"].append("C")
    ids, Y = labels_from_manifest(m, ["A", "B", "C"])
    rep = evaluate(m, FeatureMatrix(ids, (Y > 0).astype(float)), attributes=["A", "B", "C"],
                   filter_single_run=True)
    assert rep.attributes == ["A", "B"]
    assert rep.excluded["C"] == "all positives in run 0"


def test_trained_ap_beats_constant_scorer_on_train_split():
    attrs = ["A", "B", "C"]
    m = synthetic_manifest(n=200, attrs=attrs)
    ids, Y = labels_from_manifest(m, attrs)
    X = (Y > 0).astype(float) + np.random.default_rng(9).normal(0, 0.8, size=Y.shape)
    rep = evaluate(m, FeatureMatrix(ids, X), protocol="random", attributes=attrs)
    (tr, _), = random_split(m, 0.8, 0)
    rows = [ids.index(i) for i in tr]
    for k, a in enumerate(attrs):
        assert rep.train_ap[a] >= average_precision(np.zeros(len(rows)), Y[rows, k])


def test_report_round_trip(tmp_path):
    attrs = ["A", "B"]
    m = synthetic_manifest(n=60, attrs=attrs)
    ids, Y = labels_from_manifest(m, attrs)
    rep = evaluate(m, FeatureMatrix(ids, np.random.default_rng(0).random((60, 3))), attributes=attrs)
    rep.write(tmp_path / "r.json")
    back = EvalReport.read(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()
    assert back.reference_mAP == 0.671
