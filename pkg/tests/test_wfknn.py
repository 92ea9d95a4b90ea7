import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from defectorsim import UNMONITORED
from defectorsim.errors import ConfigurationError, ContractError, DomainError, ParseError
from defectorsim.wfknn import (N_FEATURES, SENTINEL, CellTrace, KnnConfig, KnnModel, classify, distance,
                               extract_features, feature_matrix, fit_penalty, generate_traces,
                               generate_unmonitored, learn_weights, load_dataset, load_trace, save_dataset,
                               save_trace, uniform_weights)

O, I = 1, -1


def test_features_small_trace():
    f = extract_features(CellTrace([0, 1, 2, 3], [O, I, O, O]))
    assert f.shape == (N_FEATURES,)
    assert (f[0], f[1], f[2], f[3]) == (4, 3, 1, 0.75)
    assert f[4] == 3
    assert list(f[5:8]) == [0, 2, 3] and np.all(f[8:25] == SENTINEL)
    assert (f[25], f[26]) == (2, 2)
    assert f[27] == 1.5
    assert f[28:46].sum() == 3


def test_features_all_incoming():
    f = extract_features(CellTrace(np.arange(5), [I] * 5))
    assert f[1] == 0
    assert np.all(f[5:25] == SENTINEL)
    assert f[28:46].sum() == 0


def test_features_single_cell():
    f = extract_features(CellTrace([0], [O]))
    assert f[4] == 0
    assert f[28] == 1 and f[29:46].sum() == 0


def test_last_cell_lands_in_last_bucket():
    f = extract_features(CellTrace([0, 1000], [O, O]))
    assert f[28] == 1 and f[45] == 1


def test_trace_validation():
    with pytest.raises(DomainError):
        extract_features(CellTrace([], []))
    with pytest.raises(DomainError):
        CellTrace([2, 1], [O, O])
    with pytest.raises(DomainError):
        CellTrace([0], [0])


vectors = hnp.arrays(np.float64, N_FEATURES, elements=st.floats(0, 100).map(lambda x: float(int(x))))
weights = hnp.arrays(np.float64, N_FEATURES, elements=st.floats(0.01, 10))


def test_distance_examples():
    a = np.zeros(N_FEATURES)
    b = a.copy()
    b[0] = 1
    assert distance(np.ones(N_FEATURES), a, a) == 0
    assert distance(np.ones(N_FEATURES), a, b) == 1
    with pytest.raises(ContractError):
        distance(np.ones(N_FEATURES), a, b[:10])


def test_sentinel_penalty():
    w = np.ones(N_FEATURES)
    pen = np.full(N_FEATURES, 7.0)
    a = np.zeros(N_FEATURES)
    b = a.copy()
    b[5] = SENTINEL
    assert distance(w, a, b, pen) == 7.0
    c = b.copy()
    assert distance(w, b, c, pen) == 0.0  # missing on both sides


@settings(max_examples=100, deadline=None)
@given(weights, vectors, vectors)
def test_distance_symmetric_and_zero_iff_equal(w, a, b):
    pen = np.full(N_FEATURES, 3.0)
    assert distance(w, a, b, pen) == pytest.approx(distance(w, b, a, pen))
    assert (distance(w, a, b, pen) == 0) == bool(np.array_equal(a, b))


def test_penalty_is_95th_percentile():
    X = np.column_stack([np.arange(101, dtype=float), np.full(101, SENTINEL)])
    assert fit_penalty(X).tolist() == [95.0, 0.0]


def _knn_toy():
    # three classes on a line, plus unmonitored points
    X = np.zeros((8, N_FEATURES))
    X[:, 0] = [0, 1, 10, 11, 20, 21, 5, 15]
    y = np.array([3, 3, 7, 7, 9, 9, UNMONITORED, UNMONITORED])
    return X, y


def test_classify_rule():
    X, y = _knn_toy()
    w = uniform_weights()
    cfg = KnnConfig(k=2, rounds=0)
    probe = np.zeros(N_FEATURES)
    probe[0] = 10.4
    assert classify(X, y, w, cfg, probe) == 7
    probe[0] = 6.0  # nearest: unmonitored (5), then 3 -> disagreement
    assert classify(X, y, w, cfg, probe) == UNMONITORED
    probe[0] = 4.0
    assert classify(X, y, w, KnnConfig(k=1, rounds=0), probe) == UNMONITORED


def test_mixed_labels_is_unmonitored():
    X = np.zeros((2, N_FEATURES))
    X[:, 0] = [0, 1]
    assert classify(X, np.array([7, 9]), uniform_weights(), KnnConfig(2, 0), np.zeros(N_FEATURES)) == UNMONITORED


def test_ties_go_to_lower_index():
    X = np.zeros((3, N_FEATURES))
    X[:, 0] = [1, -1, 1]
    y = np.array([4, 5, 4])
    assert classify(X, y, uniform_weights(), KnnConfig(1, 0), np.zeros(N_FEATURES)) == 4
    y = np.array([5, 4, 4])
    assert classify(X, y, uniform_weights(), KnnConfig(1, 0), np.zeros(N_FEATURES)) == 5


def test_candidate_restriction():
    X, y = _knn_toy()
    w = uniform_weights()
    cfg = KnnConfig(2, 0)
    probe = np.zeros(N_FEATURES)
    probe[0] = 10.2
    assert classify(X, y, w, cfg, probe, candidate_classes={3, 9}) == UNMONITORED
    probe[0] = 0.4
    assert classify(X, y, w, cfg, probe, candidate_classes={3}) == 3
    assert classify(X, y, w, cfg, probe, candidate_classes=set()) == UNMONITORED


def test_too_few_eligible():
    X = np.zeros((1, N_FEATURES))
    with pytest.raises(ConfigurationError):
        classify(X, np.array([3]), uniform_weights(), KnnConfig(2, 0), np.zeros(N_FEATURES))


@pytest.fixture(scope="module")
def dataset():
    rng = np.random.default_rng(0)
    traces = generate_traces(15, 6, 0.5, rng) + generate_unmonitored(60, 0.5, rng)
    X = feature_matrix(traces)
    y = np.array([t.label for t in traces])
    return X, y


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 10**6))
def test_argmin_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    traces = generate_traces(4, 3, 0.6, rng) + generate_unmonitored(8, 0.6, rng)
    X = feature_matrix(traces)
    y = np.array([t.label for t in traces])
    w = rng.random(N_FEATURES)
    pen = fit_penalty(X[3:])
    a = KnnModel(X[3:], y[3:], w, KnnConfig(2, 0), pen).predict(X[:3])
    b = KnnModel(X[3:], y[3:], w * scale, KnnConfig(2, 0), pen).predict(X[:3])
    assert np.array_equal(a, b)


def test_all_monitored_candidates_equal_unrestricted(dataset):
    X, y = dataset
    model = KnnModel(X[10:], y[10:], uniform_weights(), KnnConfig(2, 0), fit_penalty(X[10:]))
    every = frozenset(int(v) for v in np.unique(y) if v != UNMONITORED)
    assert np.array_equal(model.predict(X[:10]), model.predict(X[:10], every))


def test_rounds_zero_is_uniform(dataset):
    X, y = dataset
    assert np.array_equal(learn_weights(X, y, KnnConfig(2, 0), np.random.default_rng(0)), uniform_weights())


def test_identical_instances_keep_uniform_weights():
    X = np.ones((6, N_FEATURES))
    y = np.array([1, 1, 1, 2, 2, 2])
    w = learn_weights(X, y, KnnConfig(2, 200), np.random.default_rng(0))
    assert np.allclose(w, uniform_weights())


def test_degenerate_training_set():
    X = np.random.default_rng(0).random((3, N_FEATURES))
    with pytest.raises(ConfigurationError):
        learn_weights(X, np.array([1, 2, 3]), KnnConfig(2, 10), np.random.default_rng(0))


def _loo_accuracy(X, y, w):
    hits = 0
    for i in range(len(X)):
        d = np.abs(X - X[i]) @ w
        d[i] = np.inf
        hits += y[int(np.argmin(d))] == y[i]
    return hits / len(X)


def test_learning_finds_the_informative_feature():
    rng = np.random.default_rng(3)
    X = rng.random((20, N_FEATURES)) * 10
    y = np.repeat([1, 2], 10)
    X[:, 3] = np.where(y == 1, 0.0, 5.0) + rng.normal(0, 0.1, 20)
    # grid-search oracle over single-feature weightings: feature 3 alone is perfect
    accs = [_loo_accuracy(X, y, np.eye(N_FEATURES)[f]) for f in range(N_FEATURES)]
    assert int(np.argmax(accs)) == 3 and accs[3] == 1.0
    w = learn_weights(X, y, KnnConfig(2, 2500), np.random.default_rng(0))
    assert w[3] > 1 / N_FEATURES
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def _mean_intra_nn(X, y, w, pen):
    out = []
    for i in range(len(X)):
        same = np.flatnonzero((y == y[i]) & (np.arange(len(X)) != i))
        out.append(min(distance(w, X[i], X[j], pen) for j in same))
    return float(np.mean(out))


def test_learning_tightens_classes(dataset):
    X, y = dataset
    mon = y != UNMONITORED
    Xm, ym = X[mon], y[mon]
    pen = fit_penalty(Xm)
    w = learn_weights(Xm, ym, KnnConfig(2, 2500), np.random.default_rng(1), pen)
    assert np.all(w >= 0)
    # scale-free comparison: both weightings sum to one
    assert _mean_intra_nn(Xm, ym, w, pen) <= _mean_intra_nn(Xm, ym, uniform_weights(), pen)


def test_separability_one_gives_identical_instances():
    traces = generate_traces(5, 4, 1.0, np.random.default_rng(0))
    X = feature_matrix(traces)
    for s in range(5):
        assert np.all(X[4 * s:4 * s + 4] == X[4 * s])


def test_separability_one_closed_world_recall():
    traces = generate_traces(20, 3, 1.0, np.random.default_rng(1))
    X = feature_matrix(traces)
    y = np.array([t.label for t in traces])
    test = np.arange(0, 60, 3)
    train = np.setdiff1d(np.arange(60), test)
    model = KnnModel(X[train], y[train], uniform_weights(), KnnConfig(2, 0), fit_penalty(X[train]))
    assert np.array_equal(model.predict(X[test]), y[test])


def test_half_separability_beats_chance():
    traces = generate_traces(50, 10, 0.5, np.random.default_rng(2))
    X = feature_matrix(traces)
    y = np.array([t.label for t in traces])
    test = np.arange(0, 500, 10)
    train = np.setdiff1d(np.arange(500), test)
    pen = fit_penalty(X[train])
    w = learn_weights(X[train], y[train], KnnConfig(2, 500), np.random.default_rng(0), pen)
    pred = KnnModel(X[train], y[train], w, KnnConfig(2, 500), pen).predict(X[test])
    recall = np.mean(pred == y[test])
    # majority-class baseline: every class has the same size, so 1/50
    assert recall > 1 / 50


def test_generator_determinism():
    a = generate_traces(3, 2, 0.5, np.random.default_rng(7))
    b = generate_traces(3, 2, 0.5, np.random.default_rng(7))
    assert all(np.array_equal(x.times, y.times) and np.array_equal(x.directions, y.directions)
               for x, y in zip(a, b))


def test_trace_files(tmp_path):
    rng = np.random.default_rng(0)
    traces = generate_traces(2, 2, 0.5, rng) + generate_unmonitored(2, 0.5, rng)
    save_trace(traces[0], tmp_path / "one.csv")
    back = load_trace(tmp_path / "one.csv")
    assert back.label == traces[0].label and np.array_equal(back.times, traces[0].times)
    manifest = save_dataset(traces, tmp_path / "ds")
    loaded = load_dataset(manifest)
    assert [t.label for t in loaded] == [t.label for t in traces]
    (tmp_path / "bad.csv").write_text("label,3\n1,2\n")
    with pytest.raises(ParseError):
        load_trace(tmp_path / "bad.csv")
