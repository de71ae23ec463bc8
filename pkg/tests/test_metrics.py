import numpy as np
import pytest

from fedaudit.attacks import AttackRecord
from fedaudit.metrics import (DegenerateScoresError, MetricsReport,
                              RocCurve, accuracy_at_best_threshold, auc,
                              build_report, fpr_at_tpr, per_client_auc,
                              roc_curve, write_roc_csv)

HAND_SCORES = [(0.9, True), (0.4, True), (0.6, False), (0.1, False)]


def mann_whitney_auc(scores):
    """O(n^2) pairwise oracle: P(member > non) + 0.5 P(tie)."""
    members = [s for s, m in scores if m]
    non = [s for s, m in scores if not m]
    total = 0.0
    for a in members:
        for b in non:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(members) * len(non))


def random_scores(rng, n_pos, n_neg, shift=0.0, ties=False):
    pos = rng.random(n_pos) + shift
    neg = rng.random(n_neg)
    if ties:
        pos = np.round(pos, 1)
        neg = np.round(neg, 1)
    return [(float(s), True) for s in pos] + \
           [(float(s), False) for s in neg]


class TestRocCurve:
    def test_perfect_separation_passes_0_1(self):
        scores = [(1.0, True)] * 3 + [(0.0, False)] * 3
        curve = roc_curve(scores)
        assert any(np.allclose(p, (0.0, 1.0)) for p in curve.points)

    def test_constant_scores_diagonal(self):
        scores = [(0.5, True)] * 4 + [(0.5, False)] * 4
        curve = roc_curve(scores)
        assert curve.points.tolist() == [[0.0, 0.0], [1.0, 1.0]]

    def test_hand_case_vertices(self):
        curve = roc_curve(HAND_SCORES)
        expected = [[0.0, 0.0], [0.0, 0.5], [0.5, 0.5], [0.5, 1.0],
                    [1.0, 1.0]]
        assert np.allclose(curve.points, expected)

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            curve = roc_curve(random_scores(rng, 10, 15, ties=trial % 2))
            assert np.all(np.diff(curve.fpr) >= 0)
            assert np.all(np.diff(curve.tpr) >= 0)
            assert curve.points.min() >= 0.0
            assert curve.points.max() <= 1.0
            assert np.allclose(curve.points[0], (0, 0))
            assert np.allclose(curve.points[-1], (1, 1))

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateScoresError):
            roc_curve([(0.5, True), (0.2, True)])


class TestAuc:
    def test_perfect_is_one(self):
        assert auc(roc_curve([(1.0, True), (0.0, False)])) == 1.0

    def test_all_tied_is_half(self):
        scores = [(0.3, True)] * 5 + [(0.3, False)] * 5
        assert auc(roc_curve(scores)) == pytest.approx(0.5, abs=1e-12)

    def test_matches_pairwise_oracle_random(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            n_pos = int(rng.integers(2, 101))
            n_neg = int(rng.integers(2, 101))
            scores = random_scores(rng, n_pos, n_neg, ties=trial % 3 == 0)
            got = auc(roc_curve(scores))
            assert abs(got - mann_whitney_auc(scores)) < 1e-9

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(2)
        scores = random_scores(rng, 30, 30)
        base = auc(roc_curve(scores))
        for fn in (np.exp, lambda v: 3 * v - 7, lambda v: v ** 3):
            mapped = [(float(fn(s)), m) for s, m in scores]
            assert abs(auc(roc_curve(mapped)) - base) < 1e-9

    def test_negation_complements(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            scores = random_scores(rng, 12, 17)
            a = auc(roc_curve(scores))
            b = auc(roc_curve([(-s, m) for s, m in scores]))
            assert abs(a + b - 1.0) < 1e-9


class TestFprAtTpr:
    def test_perfect_curve(self):
        curve = roc_curve([(1.0, True), (0.0, False)])
        assert fpr_at_tpr(curve, 0.8) == 0.0

    def test_diagonal_chance(self):
        curve = RocCurve(points=np.array([[0.0, 0.0], [1.0, 1.0]]))
        assert fpr_at_tpr(curve, 0.8) == pytest.approx(0.8, abs=1e-12)

    def test_hand_case_interpolation(self):
        curve = roc_curve(HAND_SCORES)
        assert fpr_at_tpr(curve, 0.8) == pytest.approx(0.5, abs=1e-12)

    def test_quality_monotonicity_on_hand_fixture(self):
        base = fpr_at_tpr(roc_curve(HAND_SCORES), 0.8)
        better = HAND_SCORES + [(0.95, True), (0.05, False)]
        assert fpr_at_tpr(roc_curve(better), 0.8) <= base

    def test_invalid_target_rejected(self):
        curve = roc_curve(HAND_SCORES)
        with pytest.raises(ValueError):
            fpr_at_tpr(curve, 0.0)
        with pytest.raises(ValueError):
            fpr_at_tpr(curve, 1.2)


class TestAccuracy:
    def test_perfect_separation(self):
        scores = [(0.9, True)] * 3 + [(0.1, False)] * 3
        acc, thr = accuracy_at_best_threshold(scores)
        assert acc == 1.0
        assert 0.1 < thr <= 0.9

    def test_all_tied_balanced_half(self):
        scores = [(0.5, True)] * 4 + [(0.5, False)] * 4
        acc, _ = accuracy_at_best_threshold(scores)
        assert acc == 0.5

    def test_hand_case(self):
        # best achievable is 0.75, reached at threshold 0.4 and 0.9;
        # ties resolve toward the lower threshold
        acc, thr = accuracy_at_best_threshold(HAND_SCORES)
        assert acc == 0.75
        assert thr == pytest.approx(0.4)

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateScoresError):
            accuracy_at_best_threshold([(0.1, False), (0.2, False)])


def make_records(client_scores, non_scores):
    """client_scores: {client_id: [member resmia scores]}."""
    records = []
    sid = 0
    for cid, scores in client_scores.items():
        for s in scores:
            records.append(AttackRecord(sid, cid, True,
                                        {"resmia": s, "loss": s,
                                         "entropy": s}, 6))
            sid += 1
    for s in non_scores:
        records.append(AttackRecord(10_000 + sid, "nonmember", False,
                                    {"resmia": s, "loss": s,
                                     "entropy": s}, 6))
        sid += 1
    return records


class TestPerClientAuc:
    def test_identical_distributions_identical_aucs(self):
        scores = [0.8, 0.6, 0.4]
        records = make_records({0: scores, 1: scores, 2: scores},
                               [0.5, 0.3])
        result = per_client_auc(records)
        assert len(result) == 3
        assert len(set(result.values())) == 1

    def test_single_client_equals_global(self):
        records = make_records({0: [0.9, 0.7]}, [0.5, 0.2])
        result = per_client_auc(records)
        all_scores = [(r.scores["resmia"], r.is_member) for r in records]
        assert result[0] == pytest.approx(auc(roc_curve(all_scores)))

    def test_shifted_client_ranks_highest(self):
        rng = np.random.default_rng(4)
        base = {cid: list(rng.random(8)) for cid in range(5)}
        base[3] = [s + 2.0 for s in base[3]]
        records = make_records(base, list(rng.random(20)))
        result = per_client_auc(records)
        assert max(result, key=result.get) == 3
        assert all(result[3] > v for c, v in result.items() if c != 3)

    def test_no_nonmembers_rejected(self):
        records = make_records({0: [0.5]}, [])
        with pytest.raises(DegenerateScoresError):
            per_client_auc(records)


class TestReport:
    def test_build_and_json_round_trip(self):
        records = make_records({0: [0.9, 0.8], 1: [0.7, 0.85]},
                               [0.3, 0.4, 0.2, 0.5])
        report = build_report(records, erosion_steps=5,
                              timing={"single_forward_ms": 1.0,
                                      "resmia_probe_ms": 6.0,
                                      "ratio": 6.0},
                              metadata={"seed": 1})
        assert set(report.attacks) == {"resmia", "loss", "entropy"}
        for row in report.attacks.values():
            assert 0.0 <= row["auc"] <= 1.0
        assert report.query_counts == {"resmia": 6, "loss": 1,
                                       "entropy": 1}
        assert set(report.per_client) == {0, 1}
        loaded = MetricsReport.from_json(report.to_json())
        assert loaded == report

    def test_per_client_map_covers_all_clients(self):
        records = make_records({c: [0.6, 0.7] for c in range(7)},
                               [0.5] * 5)
        report = build_report(records, erosion_steps=3)
        assert sorted(report.per_client) == list(range(7))
        assert report.client_auc_std >= 0.0


class TestRocCsv:
    def test_writes_all_attacks(self, tmp_path):
        curve = roc_curve(HAND_SCORES)
        path = tmp_path / "roc.csv"
        write_roc_csv(path, {"resmia": curve, "loss": curve},
                      metadata={"seed": 0})
        lines = path.read_text().splitlines()
        assert lines[0] == "# seed=0"
        assert lines[1] == "attack,fpr,tpr"
        attacks_seen = {line.split(",")[0] for line in lines[2:]}
        assert attacks_seen == {"resmia", "loss"}
