import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehrgan.metrics import (
    LENGTH_EDGES, accuracy, auroc, compare_runs, cooccurrence, fidelity, format_table, length_histogram,
    roc_curve, table_records, total_variation,
)
from ehrgan.synth import CASE, Cohort, CohortSpec, PatientRecord, Vocabulary, generate_cohort


def pair_auroc(scores, labels):
    """Exhaustive pair counting: wins + half ties over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def random_instance(rng):
    n = int(rng.integers(2, 60))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties are common
    scores = rng.integers(0, int(rng.integers(2, 12)), size=n) / 4.0
    return scores, labels


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_constant_scores(self):
        assert auroc(np.full(10, 0.3), [0, 1] * 5) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            auroc([0.1, 0.2], [1, 1])

    def test_forty_random_pairs(self):
        rng = np.random.default_rng(40)
        s, y = rng.random(40), rng.integers(0, 2, 40)
        assert auroc(s, y) == pair_auroc(s, y)

    def test_pair_oracle_and_monotone_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, y = random_instance(rng)
            exact = pair_auroc(s, y)
            assert auroc(s, y) == exact
            for f in (np.exp, lambda v: 3 * v - 7, lambda v: v ** 3 + v, np.arctan):
                assert auroc(f(s), y) == exact

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=4, max_size=40, unique=True),
           st.integers(0, 2**31))
    def test_negation_complements_without_ties(self, scores, seed):
        y = np.random.default_rng(seed).integers(0, 2, len(scores))
        y[0], y[1] = 0, 1
        s = np.array(scores)
        assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


class TestRocCurve:
    def test_monotone_and_area(self):
        rng = np.random.default_rng(1)
        s, y = rng.random(50).round(1), rng.integers(0, 2, 50)
        curve = roc_curve(s, y)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        # trapezoid area under the step points equals the rank statistic
        assert np.trapezoid(curve.tpr, curve.fpr) == pytest.approx(curve.auc, abs=1e-12)


class TestAccuracy:
    def test_all_correct_and_all_wrong(self):
        y = np.array([0, 1, 1, 0])
        p = np.eye(2)[y]
        assert accuracy(p, y) == 1.0
        assert accuracy(p[:, ::-1], y) == 0.0

    def test_hand_count(self):
        scores = [0.9, 0.2, 0.6, 0.4, 0.5, 0.1, 0.7, 0.3, 0.8, 0.45]
        labels = [1, 0, 0, 0, 1, 1, 1, 0, 0, 1]
        # predictions at 0.5: 1 0 1 0 1 0 1 0 1 0 -> correct at 0,1,3,4,6,7 -> 6 of 10
        assert accuracy(scores, labels) == 0.6


def rec(pid, codes, label=CASE):
    return PatientRecord(pid, label, [(i, c) for i, c in enumerate(codes)])


class TestFidelity:
    def test_length_histogram_bins(self):
        h = length_histogram([rec("a", [0] * 49), rec("b", [0] * 50), rec("c", [0] * 59), rec("d", [0] * 250)])
        assert h.sum() == pytest.approx(1.0)
        assert h[0] == 0.25 and h[1] == 0.5 and h[-1] == 0.25
        assert len(h) == len(LENGTH_EDGES) - 1

    def test_total_variation_bounds(self):
        assert total_variation([1, 0], [0, 1]) == 1.0
        assert total_variation([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_cooccurrence_counts(self):
        m = cooccurrence([rec("a", [1, 2, 2]), rec("b", [2, 3]), rec("c", [5])], np.array([1, 2, 3]))
        np.testing.assert_array_equal(m, [[1, 1, 0], [1, 2, 1], [0, 1, 1]])

    def test_identity(self):
        cohort, _ = generate_cohort(CohortSpec(n_case=60, n_control=120))
        r = fidelity(cohort, cohort)
        assert r.length_tv == 0.0
        assert r.freq_spearman == pytest.approx(1.0)
        assert r.cooc_correlation == pytest.approx(1.0)
        assert np.all(r.cooc_codes < cohort.vocabulary.n_diagnosis)

    def test_label_blind(self):
        cohort, _ = generate_cohort(CohortSpec(n_case=60, n_control=120))
        flipped = cohort.subset([PatientRecord(r.patient_id, 1 - r.label, r.events) for r in cohort.records])
        a, b = fidelity(cohort, cohort).summary(), fidelity(cohort, flipped).summary()
        assert a == b

    def test_independent_cohorts_close_in_length(self):
        a, _ = generate_cohort(CohortSpec(seed=0))
        b, _ = generate_cohort(CohortSpec(seed=1))
        assert fidelity(a, b).length_tv < 0.05

    def test_normalised_by_record_count(self):
        orig = [rec("a", [0, 1]), rec("b", [0])]
        gen = [rec("x", [0, 1]), rec("y", [0]), rec("z", [0, 1]), rec("w", [0])]
        r = fidelity(orig, gen, top_k_freq=2, top_k_cooc=2)
        np.testing.assert_array_equal(r.cooc_original, r.cooc_generated)
        assert r.cooc_correlation == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            fidelity([], [rec("a", [1])])

    def test_vocabulary_mismatch_rejected(self):
        a = Cohort("a", [rec("a", [1])], Vocabulary(5, 3))
        b = Cohort("b", [rec("b", [1])], Vocabulary(6, 3))
        with pytest.raises(ValueError, match="vocabularies"):
            fidelity(a, b)


class TestCompareRuns:
    def test_single_run(self):
        rows = compare_runs([{"mode": "BASIC", "auroc": 0.8, "accuracy": 0.7}])
        assert len(rows) == 1 and rows[0].metrics["auroc"] == (0.8, 0.8, 0.8)

    def test_identical_runs_have_zero_spread(self):
        rows = compare_runs([{"mode": "X", "auroc": 0.61}] * 4, metrics=("auroc",))
        med, lo, hi = rows[0].metrics["auroc"]
        assert hi - lo == 0.0 and med == 0.61

    def test_five_seed_median(self):
        rng = np.random.default_rng(5)
        runs = [{"mode": m, "auroc": float(rng.random())} for m in ("A", "B") for _ in range(5)]
        rows = compare_runs(runs, metrics=("auroc",))
        for row in rows:
            vals = [r["auroc"] for r in runs if r["mode"] == row.key]
            assert row.metrics["auroc"] == (statistics.median(vals), min(vals), max(vals))
        assert [r.key for r in rows] == ["A", "B"]

    def test_renderings(self):
        rows = compare_runs([{"mode": "A", "auroc": 0.5}, {"mode": "B", "auroc": 0.75}], metrics=("auroc",))
        text = format_table(rows, "t")
        assert text.splitlines()[0] == "t" and "0.7500" in text
        recs = table_records(rows)
        assert len(recs) == 2 and '"auroc_median": 0.75' in recs[1]
