import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advshield.attacks import AdvBatch
from advshield.data import LabeledSet
from advshield.diffnet import DiffNet, NetConfig
from advshield.errors import InputError, StateError, UndefinedMetricError
from advshield.evaluation import (
    DetectionScores,
    RiskLedger,
    RiskWeights,
    accuracy,
    auprc,
    average_precision,
    per_class_auprc,
    risk_components,
    risk_ledger_from_run,
    risk_with_uad,
    risk_without_uad,
)
from advshield.uad import ClassGmm, UadModel

from .oracles import average_precision_bruteforce, average_precision_thresholds


class TestAccuracy:
    def test_values(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75

    def test_empty_and_mismatch(self):
        with pytest.raises(InputError):
            accuracy([], [])
        with pytest.raises(InputError):
            accuracy([1], [1, 2])


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([1, 1, 0, 0], [4, 3, 2, 1]) == 1.0

    def test_alternating(self):
        # precision 1/1 at the first positive, 2/3 at the second
        assert average_precision([1, 0, 1, 0], [4, 3, 2, 1]) == pytest.approx(5 / 6, abs=1e-15)
        assert round(average_precision([1, 0, 1, 0], [4, 3, 2, 1]), 4) == 0.8333

    def test_ties_grouped(self):
        # all four tied: one threshold, precision 1/2 at recall 1
        assert average_precision([1, 0, 1, 0], [1, 1, 1, 1]) == 0.5
        labels, scores = [1, 0, 0, 1, 1], [3, 3, 2, 1, 1]
        assert average_precision(labels, scores) == pytest.approx(float(average_precision_thresholds(labels, scores)))

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([1, 1], [0.2, 0.1])
        with pytest.raises(UndefinedMetricError):
            average_precision([0, 0], [0.2, 0.1])

    @pytest.mark.parametrize("n", range(2, 7))
    def test_exhaustive_patterns(self, n):
        rng = np.random.default_rng(n)
        for labels in itertools.product([0, 1], repeat=n):
            if 0 < sum(labels) < n:
                scores = rng.permutation(n).astype(float) + rng.uniform(0, 0.5, n)
                exact = average_precision_bruteforce(labels, scores)
                assert abs(average_precision(labels, scores) - float(exact)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.integers(0, 3)), min_size=2, max_size=10))
    def test_tie_oracle(self, rows):
        labels = [r[0] for r in rows]
        scores = [float(r[1]) for r in rows]
        if 0 < sum(labels) < len(labels):
            exact = average_precision_thresholds(labels, scores)
            assert abs(average_precision(labels, scores) - float(exact)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 20)
        y[:2] = [0, 1]
        s = rng.normal(size=20)
        assert average_precision(y, s) == average_precision(y, np.exp(3 * s) + 1)


class TestGrouped:
    def test_per_class_and_macro(self):
        ds = DetectionScores([5, 1, 4, 2, 9, 3], [1, 0, 1, 0, 1, 0], [0, 0, 1, 1, 2, 2])
        vals, macro = per_class_auprc(ds, 3)
        assert vals == [1.0, 1.0, 1.0] and macro == 1.0
        assert auprc(ds) == pytest.approx(average_precision([1, 0, 1, 0, 1, 0], [5, 1, 4, 2, 9, 3]))

    def test_undefined_group(self):
        ds = DetectionScores([1, 2, 3], [0, 0, 1], [0, 0, 1])
        with pytest.raises(UndefinedMetricError, match="class 0"):
            auprc(ds, 0)
        vals, macro = per_class_auprc(ds, 2)
        assert vals == [None, None] and macro is None

    def test_non_finite(self):
        with pytest.raises(InputError):
            DetectionScores([np.inf], [True], [0])


class TestRisk:
    def test_zero(self):
        assert risk_without_uad(RiskLedger(0, 0, 0, 10)) == 0.0
        assert risk_with_uad(RiskLedger(0, 0, 0, 10)) == 0.0

    def test_reference_ledgers(self):
        assert risk_without_uad(RiskLedger(80, 0, 885, 1000)) == pytest.approx(0.965, abs=5e-4)
        assert risk_without_uad(RiskLedger(87, 0, 136, 1000)) == pytest.approx(0.223, abs=5e-4)

    def test_three_term_sum(self):
        assert risk_with_uad(RiskLedger(10, 50, 100, 1000)) == pytest.approx(0.160, abs=1e-12)

    def test_weights(self):
        w = RiskWeights(2.0, 0.5, 3.0)
        assert risk_with_uad(RiskLedger(1, 2, 3, 10), w) == pytest.approx((2 + 1 + 9) / 10)

    def test_errors(self):
        with pytest.raises(InputError):
            risk_with_uad(RiskLedger(1, 0, 0, 0))
        with pytest.raises(InputError):
            risk_without_uad(RiskLedger(0, 1, 0, 5))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(1, 1000))
    def test_decomposition_integer(self, a, b, c, n):
        led = RiskLedger(a, b, c, n)
        r_cln, r_adv = risk_components(led)
        assert r_cln + r_adv == a + b + c and float(r_cln + r_adv).is_integer()
        assert risk_with_uad(led) * n == pytest.approx(a + b + c)


def two_class_setup():
    """Identity features; class 1 iff x1 > x0.  Each class GMM is a unit
    Gaussian at its corner, and thresholds reject anything far from it."""
    net = DiffNet(NetConfig((1, 2, 1), (), 2), [np.eye(2), np.zeros(2)])
    gmms = [ClassGmm(0, np.ones(1), np.array([[1.0, 0.0]]), 0.01 * np.eye(2)[None]),
            ClassGmm(1, np.ones(1), np.array([[0.0, 1.0]]), 0.01 * np.eye(2)[None])]
    return net, UadModel(gmms, np.array([-10.0, -10.0]))


def px(*rows):
    return np.asarray(rows, dtype=float).reshape(len(rows), 1, 2, 1)


class TestLedgerFromRun:
    def test_four_paths(self):
        net, uad = two_class_setup()
        # clean: (0.95, 0.05) label 1 -> accepted, wrong; (0.5, 0.45) label 0 -> rejected
        clean = LabeledSet(px((0.95, 0.05), (0.5, 0.45)), np.array([1, 0]))
        # adversarial: lands on class-1 corner (accepted, wrong); lands mid-way (caught)
        xa = px((0.02, 0.98), (0.45, 0.5))
        adv = AdvBatch(clean.x, xa, np.array([0, 0]), np.array([1, 1]), np.array([True, True]))
        led = risk_ledger_from_run(net, uad, clean, adv)
        assert (led.N_cln_inc, led.N_cln_rej, led.N_adv_inc, led.N) == (1, 1, 1, 2)
        bare = risk_ledger_from_run(net, None, clean, adv)
        assert (bare.N_cln_inc, bare.N_cln_rej, bare.N_adv_inc) == (1, 0, 2)

    def test_perfect(self):
        net, uad = two_class_setup()
        clean = LabeledSet(px((1, 0), (0, 1)), np.array([0, 1]))
        adv = AdvBatch(clean.x, clean.x, clean.y, clean.y, np.zeros(2, bool))
        led = risk_ledger_from_run(net, uad, clean, adv)
        assert (led.N_cln_inc, led.N_cln_rej, led.N_adv_inc) == (0, 0, 0)

    def test_raw_mode_counts_failed_attacks_as_correct(self):
        net, _ = two_class_setup()
        clean = LabeledSet(px((1, 0), (0, 1)), np.array([0, 1]))
        adv = AdvBatch(clean.x, px((0.2, 0.9), (0.1, 0.9)), np.array([0, 1]), np.array([1, 1]),
                       np.array([True, False]))
        assert risk_ledger_from_run(net, None, clean, adv, filtered=False).N_adv_inc == 1

    def test_caught_attack_never_raises_risk(self):
        net, uad = two_class_setup()
        clean = LabeledSet(px((1, 0), (0, 1)), np.array([0, 1]))
        a = AdvBatch(clean.x[:1], px((0.02, 0.98)), np.array([0]), np.array([1]), np.array([True]))
        b = AdvBatch(clean.x[:1], px((0.45, 0.5)), np.array([0]), np.array([1]), np.array([True]))
        assert risk_with_uad(risk_ledger_from_run(net, uad, clean, b)) <= \
            risk_with_uad(risk_ledger_from_run(net, uad, clean, a))

    def test_uncalibrated(self):
        net, uad = two_class_setup()
        uad.thresholds = None
        clean = LabeledSet(px((1, 0)), np.array([0]))
        adv = AdvBatch(clean.x, clean.x, clean.y, clean.y, np.zeros(1, bool))
        with pytest.raises(StateError):
            risk_ledger_from_run(net, uad, clean, adv)
