import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromix.errors import DomainError
from micromix.metrics import (auc_edge_recovery, evaluate_model,
                              frobenius_pc_diff, match_components,
                              relative_difference, relative_difference_stats)

from conftest import random_spd


class TestRelativeDifference:
    def test_identity_no_zeros(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])
        assert relative_difference(a, a) == 0.0

    def test_one_by_one_hand_value(self):
        assert relative_difference(np.array([[2.0]]), np.array([[1.0]])) == pytest.approx(0.5)

    def test_zero_entry_skipped_and_counted(self):
        a = np.array([[1.0, 0.0], [1.0, 1.0]])
        b = np.ones((2, 2))
        value, skipped = relative_difference_stats(a, b)
        assert skipped == 1
        assert value == 0.0                    # the remaining entries agree

    def test_all_skipped_gives_nan(self):
        value, skipped = relative_difference_stats(np.zeros((2, 2)), np.ones((2, 2)))
        assert skipped == 4 and np.isnan(value)

    def test_symmetry(self, rng):
        a, b = random_spd(4, rng), random_spd(4, rng)
        assert relative_difference(a, b) == pytest.approx(relative_difference(b, a))


class TestFrobeniusPcDiff:
    def test_identity(self, rng):
        a = random_spd(5, rng)
        assert frobenius_pc_diff(a, a) == 0.0

    def test_scale_invariance(self, rng):
        a = random_spd(4, rng)
        assert frobenius_pc_diff(a, 3.7 * a) == pytest.approx(0.0, abs=1e-10)

    def test_hand_value(self):
        a = np.array([[2.0, -1.0], [-1.0, 2.0]])
        # pc(a) off-diagonal = 0.5, pc(I) off-diagonal = 0
        assert frobenius_pc_diff(a, np.eye(2)) == pytest.approx(np.sqrt(0.5))

    def test_non_spd_rejected(self):
        with pytest.raises(DomainError):
            frobenius_pc_diff(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))

    def test_symmetry(self, rng):
        a, b = random_spd(3, rng), random_spd(3, rng)
        assert frobenius_pc_diff(a, b) == pytest.approx(frobenius_pc_diff(b, a))


def band_truth(d, fill=0.4):
    theta = np.eye(d) + np.diag(np.full(d - 1, fill), 1) + np.diag(np.full(d - 1, fill), -1)
    theta += (0.1 - np.linalg.eigvalsh(theta)[0]) * np.eye(d)
    return theta


class TestAucEdgeRecovery:
    def test_perfect_recovery(self):
        t = band_truth(6)
        assert auc_edge_recovery(t, t) == 1.0

    def test_sign_flip_invariance(self):
        t = band_truth(6)
        assert auc_edge_recovery(t, -t) == 1.0

    def test_random_scores_near_half(self, rng):
        t = band_truth(20)
        aucs = []
        for _ in range(100):
            est = rng.standard_normal((20, 20))
            est = est + est.T
            aucs.append(auc_edge_recovery(t, est))
        assert abs(np.mean(aucs) - 0.5) < 0.05

    def test_single_class_returns_half(self):
        assert auc_edge_recovery(np.eye(3), np.eye(3)) == 0.5

    def test_d1_rejected(self):
        with pytest.raises(DomainError):
            auc_edge_recovery(np.eye(1), np.eye(1))

    @given(st.floats(0.1, 5.0), st.floats(0.0, 3.0))
    @settings(max_examples=25, deadline=None)
    def test_monotone_transform_invariance(self, scale, shift):
        rng = np.random.default_rng(7)
        t = band_truth(8)
        est = rng.standard_normal((8, 8))
        est = est + est.T
        base = auc_edge_recovery(t, est)
        # strictly monotone transform of |est|: scale * |e| + shift applied
        # through an odd map keeps the |.| ranking
        transformed = np.sign(est) * (scale * np.abs(est) + shift)
        assert auc_edge_recovery(t, transformed) == pytest.approx(base)


class TestMatchComponents:
    def test_identity_for_k1(self, rng):
        t = [random_spd(4, rng)]
        assert list(match_components(t, t)) == [0]

    def test_recovers_permutation(self, rng):
        truths = [random_spd(5, rng) for _ in range(3)]
        perm = [2, 0, 1]
        est = [truths[perm.index(l)] for l in range(3)]
        # est[j] equals truths[i] when perm[i] = j
        got = match_components(truths, est)
        for i in range(3):
            assert np.allclose(truths[i], est[got[i]])

    def test_optimal_vs_exhaustive(self, rng):
        from micromix.datamodel import partial_correlation
        for k in (2, 3, 4):
            truths = [random_spd(4, rng) for _ in range(k)]
            ests = [random_spd(4, rng) for _ in range(k)]
            got = match_components(truths, ests)
            pc_t = [partial_correlation(m) for m in truths]
            pc_e = [partial_correlation(m) for m in ests]

            def cost(perm):
                return sum(np.linalg.norm(pc_t[i] - pc_e[perm[i]]) for i in range(k))

            best = min(itertools.permutations(range(k)), key=cost)
            assert cost(tuple(got)) <= cost(best) + 1e-12

    def test_k_mismatch_rejected(self, rng):
        with pytest.raises(DomainError):
            match_components([random_spd(3, rng)], [random_spd(3, rng)] * 2)


class TestEvaluateModel:
    def test_perfect_model(self, rng):
        truths = [band_truth(6), band_truth(6, 0.3)]
        report = evaluate_model(truths, list(truths))
        assert report.mean_auc == 1.0
        assert report.mean_relative_difference == pytest.approx(0.0)
        assert sorted(report.pairing) == [0, 1]

    def test_crossed_components_matched(self, rng):
        truths = [random_spd(5, rng) for _ in range(2)]
        est = [truths[1] + 1e-3 * np.eye(5), truths[0] + 1e-3 * np.eye(5)]
        report = evaluate_model(truths, est)
        assert list(report.pairing) == [1, 0]

    def test_auc_in_unit_interval(self, rng):
        truths = [band_truth(6)]
        est = [random_spd(6, rng)]
        report = evaluate_model(truths, est)
        assert 0.0 <= report.mean_auc <= 1.0
