import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_trace, ring_windows
from oracles import dense_qp_ocsvm, knn_vote, zscore_columns
from riskprof.attack import AttackStatus, attack_trace
from riskprof.cluster import VulnerabilityClusters
from riskprof.data import Split, windowize
from riskprof.detect import (
    ConvergenceError,
    KnnParams,
    OcsvmParams,
    StrategyKind,
    TrainingStrategy,
    Verdict,
    decode_array,
    detector_from_dict,
    encode_array,
    fit_knn,
    fit_ocsvm,
    labeled_windows,
    load_detector,
    save_detector,
    select_training_set,
    solve_one_class_dual,
    verdict,
)
from riskprof.predictor import LinearForecaster

TIGHT = OcsvmParams(tol=1e-9)


def as_windows(values):
    return np.asarray(values, dtype=float).reshape(-1, 1, 1)


def oracle_knn(benign, malicious, queries, k=7, p=2.0):
    f = benign.shape[2]
    ref = benign.reshape(-1, f)

    def norm(w):
        return zscore_columns(w.reshape(-1, f), ref).reshape(w.shape[0], -1)

    pts = np.concatenate([norm(benign), norm(malicious)])
    labels = [0] * benign.shape[0] + [1] * malicious.shape[0]
    return [knn_vote(pts.tolist(), labels, q, k, p) for q in norm(queries).tolist()]


# -- kNN --------------------------------------------------------------------


def test_knn_four_malicious_three_benign():
    benign = as_windows([-10, -9, 0.6, 1.6, 2.6, 20, 21])
    malicious = as_windows([-0.4, -1.4, -2.4, 3.4, 30])
    # nearest seven to 0: -0.4 m, 0.6 b, -1.4 m, 1.6 b, -2.4 m, 2.6 b, 3.4 m
    det = fit_knn(benign, malicious)
    assert verdict(det, np.zeros((1, 1))) is Verdict.MALICIOUS
    assert oracle_knn(benign, malicious, as_windows([0])) == [1]


def test_knn_unanimous_benign():
    benign = as_windows(np.arange(10.0))
    malicious = as_windows([100.0, 101.0])
    assert verdict(fit_knn(benign, malicious), np.array([[4.5]])) is Verdict.BENIGN


def test_knn_ties_favour_malicious():
    det = fit_knn(as_windows([0.0, 5.0]), as_windows([2.0]), KnnParams(k=1))
    # 1.0 is equally far from benign 0 and malicious 2
    assert verdict(det, np.array([[1.0]])) is Verdict.MALICIOUS
    det2 = fit_knn(as_windows([0.0, 5.0]), as_windows([2.0]), KnnParams(k=2))
    assert verdict(det2, np.array([[1.5]])) is Verdict.MALICIOUS  # one vote each


def test_knn_own_point_is_benign():
    rng = np.random.default_rng(0)
    benign, malicious = rng.normal(0, 1, (30, 4, 3)), rng.normal(2, 1, (20, 4, 3))
    det = fit_knn(benign, malicious, KnnParams(k=1))
    assert np.all(det.verdict_batch(benign) == Verdict.BENIGN)
    assert np.all(det.verdict_batch(malicious) == Verdict.MALICIOUS)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
def test_knn_matches_hand_votes(seed, p):
    rng = np.random.default_rng(seed)
    benign = rng.normal(0, 1, (40, 3, 2))
    malicious = rng.normal(0.8, 1, (25, 3, 2))
    queries = np.concatenate([rng.normal(0.4, 1.2, (30, 3, 2)), benign[:5], malicious[:5]])
    det = fit_knn(benign, malicious, KnnParams(k=7, p=p))
    assert det.verdict_batch(queries).tolist() == oracle_knn(benign, malicious, queries, 7, p)


@given(st.integers(0, 1000), st.randoms(use_true_random=False))
def test_knn_invariant_to_stored_order(seed, shuffler):
    rng = np.random.default_rng(seed)
    # a coarse grid makes equal distances common
    benign = rng.integers(0, 4, (15, 2, 1)).astype(float)
    malicious = rng.integers(1, 5, (10, 2, 1)).astype(float)
    queries = rng.integers(0, 5, (20, 2, 1)).astype(float)
    base = fit_knn(benign, malicious, KnnParams(k=5)).verdict_batch(queries)
    bi, mi = list(range(15)), list(range(10))
    shuffler.shuffle(bi)
    shuffler.shuffle(mi)
    again = fit_knn(benign[bi], malicious[mi], KnnParams(k=5)).verdict_batch(queries)
    assert again.tolist() == base.tolist()


def test_knn_errors():
    with pytest.raises(ValueError, match="exceeds"):
        fit_knn(as_windows([1, 2, 3]), as_windows([4]), KnnParams(k=7))
    with pytest.raises(ValueError, match="both"):
        fit_knn(as_windows([1, 2, 3]), np.zeros((0, 1, 1)))
    with pytest.raises(ValueError):
        KnnParams(k=0)
    with pytest.raises(ValueError):
        KnnParams(weights="distance")
    det = fit_knn(as_windows(range(8)), as_windows([9]))
    with pytest.raises(ValueError):
        verdict(det, np.zeros((1, 2)))


# -- one-class SVM ----------------------------------------------------------


def _ocsvm_fixture(seed, tol=1e-9):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 51))
    if seed % 2:
        radius = float(rng.uniform(0.5, 50))
        W, spread = ring_windows(rng, n, radius), 2 * radius
    else:
        W, spread = rng.normal(0, 1, (n, 6, 4)), 1.5
    det = fit_ocsvm(W, OcsvmParams(tol=tol))
    queries = np.concatenate([W, rng.normal(0, spread, (100,) + W.shape[1:])])
    return det, W, queries


def _refined_oracle(det, W):
    """Dense-QP refinement of the fitted dual point (the dual is not convex)."""
    Z = det.normalizer.transform(W)
    sol = solve_one_class_dual(Z, det.params, det.kernel)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        decide, alpha, _ = dense_qp_ocsvm(Z, det.params.nu, det.gamma, det.params.coef0, start=sol.alpha)
    return (lambda X: decide(det.normalizer.transform(X))), sol, alpha


@pytest.mark.parametrize("seed", range(20))
def test_ocsvm_agrees_with_dense_qp_at_local_optimum(seed):
    det, W, queries = _ocsvm_fixture(seed)
    decide, sol, alpha = _refined_oracle(det, W)
    # the QP solver cannot improve on the fitted point
    assert np.abs(alpha - sol.alpha).max() < 1e-5
    d = decide(queries)
    off = np.abs(d) > 1e-6  # free support vectors sit on the boundary
    assert off.sum() > 100
    assert np.array_equal(det.verdict_batch(queries)[off], (d[off] < 0).astype(np.int8))


def test_ocsvm_ring_exterior_malicious_and_interior_benign():
    rng = np.random.default_rng(0)
    W = ring_windows(rng, 44, radius=3.0)
    det = fit_ocsvm(W, TIGHT)
    decide, _, _ = _refined_oracle(det, W)
    phi = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    exterior = (9.0 * np.c_[np.cos(phi), np.sin(phi)])[:, None, :]
    assert np.all(det.verdict_batch(exterior) == Verdict.MALICIOUS)
    assert np.all(decide(exterior) < 0)
    interior = W[np.argsort(-decide(W))[:3]]
    assert np.all(decide(interior) > 0)
    assert np.all(det.verdict_batch(interior.copy()) == Verdict.BENIGN)


def test_ocsvm_verdict_flips_at_zero():
    rng = np.random.default_rng(0)
    W = ring_windows(rng, 44, radius=3.0)
    det = fit_ocsvm(W, TIGHT)
    decide, _, _ = _refined_oracle(det, W)
    inside = W[int(np.argmax(decide(W)))]
    outside = np.array([[9.0, 0.0]])

    def point(t):
        return ((1 - t) * inside + t * outside)[None]

    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if decide(point(mid))[0] >= 0 else (lo, mid)
    assert abs(decide(point(lo))[0]) < 1e-9
    assert det.verdict_batch(point(lo - 1e-4))[0] == Verdict.BENIGN
    assert det.verdict_batch(point(hi + 1e-4))[0] == Verdict.MALICIOUS
    assert abs(det.decision_function(point(lo))[0]) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_ocsvm_nu_property(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(0, 1, (200, 6, 4)) if seed % 2 == 0 else ring_windows(rng, 200, 5.0)
    for nu in (0.5, 0.3):
        det = fit_ocsvm(W, OcsvmParams(nu=nu))
        flagged = det.verdict_batch(W).mean()
        assert nu - 0.1 <= flagged <= nu + 0.1


@pytest.mark.parametrize("seed", range(6))
def test_ocsvm_dual_feasibility(seed):
    det, W, _ = _ocsvm_fixture(seed, tol=1e-3)
    C = 1.0 / (det.params.nu * W.shape[0])
    assert abs(det.alpha.sum() - 1.0) < 1e-6
    assert np.all(det.alpha >= -1e-6) and np.all(det.alpha <= C + 1e-6)


def test_ocsvm_decision_matches_unshifted_kernel():
    rng = np.random.default_rng(3)
    W = rng.normal(0, 1, (40, 2, 2))
    det = fit_ocsvm(W)
    Q = rng.normal(0, 1, (10, 2, 2))
    Z = det.normalizer.transform(Q)
    raw = np.tanh(det.gamma * Z @ det.support.T + det.params.coef0) @ det.alpha - det.rho
    # the raw form carries ~1e-16 absolute error, magnified by 1 / unit (about 2.4e8)
    np.testing.assert_allclose(raw / det.kernel.unit, det.decision_function(Q), rtol=0, atol=1e-6)


def test_ocsvm_iteration_cap():
    W = np.random.default_rng(0).normal(0, 1, (50, 3, 2))
    with pytest.raises(ConvergenceError):
        fit_ocsvm(W, OcsvmParams(max_iter=1))
    with pytest.raises(ValueError):
        fit_ocsvm(W[:1])
    with pytest.raises(ValueError):
        OcsvmParams(nu=1.5)


# -- persistence ------------------------------------------------------------


def test_detectors_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    benign, malicious = rng.normal(0, 1, (60, 3, 2)), rng.normal(1, 1, (20, 3, 2))
    Q = rng.normal(0.5, 1.5, (50, 3, 2))
    for det in (fit_knn(benign, malicious), fit_ocsvm(benign)):
        save_detector(det, tmp_path / f"{det.kind}.json")
        back = load_detector(tmp_path / f"{det.kind}.json")
        assert back.verdict_batch(Q).tobytes() == det.verdict_batch(Q).tobytes()
        assert back.verdict_batch(Q).tobytes() == det.verdict_batch(Q).tobytes()
    with pytest.raises(ValueError, match="unknown"):
        detector_from_dict({"kind": "forest"})


def test_array_encoding_is_exact():
    a = np.random.default_rng(0).normal(0, 1e6, (3, 5))
    assert decode_array(encode_array(a)).tobytes() == a.tobytes()


# -- training sets ----------------------------------------------------------


def _cohort():
    traces = []
    for i in range(12):
        for split in (Split.TRAIN, Split.TEST):
            traces.append(make_trace(np.full(40, 100.0 + i), pid=f"p{i:02d}", split=split))
    clusters = VulnerabilityClusters(frozenset({"p01", "p05", "p09"}), frozenset(f"p{i:02d}" for i in range(12)) - {"p01", "p05", "p09"})
    return traces, clusters


def test_select_training_sets():
    traces, clusters = _cohort()
    (less,) = select_training_set(TrainingStrategy(StrategyKind.LESS_VULNERABLE), clusters, traces, 0)
    assert sorted(t.patient_id for t in less) == ["p01", "p05", "p09"]
    assert all(t.split is Split.TRAIN for t in less)
    (every,) = select_training_set(TrainingStrategy("AllPatients"), clusters, traces, 0)
    assert len(every) == 12
    (more,) = select_training_set(TrainingStrategy("MoreVulnerable"), clusters, traces, 0)
    assert len(more) == 9
    rs = TrainingStrategy(StrategyKind.RANDOM_SAMPLES)
    a = select_training_set(rs, clusters, traces, 7)
    b = select_training_set(rs, clusters, traces, 7)
    c = select_training_set(rs, clusters, traces, 8)
    ids = [[t.patient_id for t in cohort] for cohort in a]
    assert len(ids) == 10 and all(len(set(x)) == 3 for x in ids)
    assert ids == [[t.patient_id for t in cohort] for cohort in b]
    assert ids != [[t.patient_id for t in cohort] for cohort in c]


def test_random_samples_needs_three_patients():
    traces, clusters = _cohort()
    few = [t for t in traces if t.patient_id in ("p01", "p02")]
    with pytest.raises(ValueError, match="at least 3"):
        select_training_set(TrainingStrategy("RandomSamples"), clusters, few, 0)


def test_labeled_windows():
    rng = np.random.default_rng(2)
    tr = make_trace(rng.uniform(60, 200, 80), split=Split.TEST)
    w = np.zeros((6, 4))
    w[:, 0] = 0.2
    model = LinearForecaster(w, -20.0)
    rec = attack_trace(model, tr, horizon=2, max_iters=30)
    data = labeled_windows([tr], rec, 6, 2)
    win = windowize(tr, 6, 2)
    won = rec.status == AttackStatus.SUCCESS
    assert (data.labels == 0).sum() == len(win)
    assert (data.labels == 1).sum() == won.sum() > 0
    np.testing.assert_array_equal(data.malicious[:, :, 0], rec.adversarial_cgm[won])
    np.testing.assert_array_equal(data.malicious[:, :, 1:], win.features[won][:, :, 1:])
    strided = labeled_windows([tr], rec, 6, 2, stride=3)
    assert (strided.labels == 0).sum() == len(range(0, len(win), 3))
    with pytest.raises(ValueError, match="cover"):
        labeled_windows([tr], rec.select(np.arange(len(rec)) > 2), 6, 2)
