import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snnmc.anchors import AnchorPlan, AnchorError, anchor_submatrix, partition_rows
from snnmc.matrix import MaskedMatrix
from snnmc.snn import (
    DegenerateFoldError,
    NoiseModel,
    SnnConfig,
    SnnError,
    confidence_interval,
    normal_quantile,
    snn_complete,
    snn_entry,
    snn_entry_transposed,
)
from snnmc.spectral import EnergyThreshold, Fixed


def rank1_5x5():
    a = np.arange(1, 6, dtype=float)
    return np.outer(a, a)


def low_rank(rng, m, n, r):
    return rng.standard_normal((m, r)) @ rng.standard_normal((r, n))


def full_plan(m, n, i, j, k, seed=0):
    rows = [a for a in range(m) if a != i]
    cols = tuple(b for b in range(n) if b != j)
    return AnchorPlan((i, j), cols, partition_rows(rows, k, np.random.default_rng(seed)))


def oracle_fold_value(Y, i, j, rows, cols, rank):
    """Rank-truncated least squares of q on S^T written with explicit SVD algebra."""
    S = Y[np.ix_(rows, cols)]
    U, s, Vt = np.linalg.svd(S, full_matrices=False)
    pinv_T = U[:, :rank] @ np.diag(1 / s[:rank]) @ Vt[:rank]
    beta = pinv_T @ Y[i, cols]
    return float(Y[rows, j] @ beta)


class TestConfig:
    def test_validation(self):
        with pytest.raises(SnnError):
            SnnConfig(ci_level=1.0)
        with pytest.raises(SnnError):
            SnnConfig(min_anchor_rows=0)
        with pytest.raises(SnnError):
            SnnConfig(k_folds=0)
        assert SnnConfig(noise_model="homoskedastic").noise_model is NoiseModel.HOMOSKEDASTIC

    def test_normal_quantile(self):
        assert normal_quantile(0.95) == pytest.approx(1.959963985, abs=1e-7)
        assert normal_quantile(0.5) == pytest.approx(0.6744897502, abs=1e-7)


class TestSnnEntry:
    def test_rank1_recovers_masked_corner(self):
        A = rank1_5x5()
        mask = np.ones_like(A, dtype=bool)
        mask[0, 0] = False
        data = MaskedMatrix(np.where(mask, A, 0.0), mask)
        est = snn_entry(data, 0, 0, full_plan(5, 5, 0, 0, 1), SnnConfig())
        assert est.value == pytest.approx(1.0, abs=1e-8)

    def test_observed_target_is_denoised_to_itself(self, rng):
        A = low_rank(rng, 7, 6, 2)
        data = MaskedMatrix(A, np.ones_like(A, dtype=bool))
        est = snn_entry(data, 2, 3, full_plan(7, 6, 2, 3, 1), SnnConfig(rank_policy=Fixed(2)))
        assert est.value == pytest.approx(A[2, 3], abs=1e-8)
        assert est.observed == A[2, 3]

    def test_matches_pseudo_inverse_oracle(self, rng):
        A = low_rank(rng, 8, 8, 2)
        mask = np.ones_like(A, dtype=bool)
        mask[1, 4] = False
        data = MaskedMatrix(np.where(mask, A, 0.0), mask)
        plan = full_plan(8, 8, 1, 4, 2, seed=5)
        est = snn_entry(data, 1, 4, plan, SnnConfig(rank_policy=Fixed(2)))
        cols = list(plan.anchor_cols)
        expected = [oracle_fold_value(A, 1, 4, list(f), cols, 2) for f in plan.anchor_row_folds]
        np.testing.assert_allclose(est.fold_values, expected, atol=1e-8)
        assert est.value == pytest.approx(np.mean(expected), abs=1e-8)
        assert est.value == pytest.approx(A[1, 4], abs=1e-8)

    def test_fold_average_identity(self, rng):
        Y = low_rank(rng, 12, 9, 2) + 0.1 * rng.standard_normal((12, 9))
        data = MaskedMatrix(Y, np.ones_like(Y, dtype=bool))
        est = snn_entry(data, 0, 0, full_plan(12, 9, 0, 0, 3), SnnConfig(rank_policy=Fixed(2)))
        assert est.value == est.fold_values.mean()
        assert len(est.fold_betas) == 3 and est.fold_ranks == [2, 2, 2]

    def test_errors(self, rng):
        Y = low_rank(rng, 5, 5, 1)
        data = MaskedMatrix(Y, np.ones_like(Y, dtype=bool))
        plan = full_plan(5, 5, 0, 0, 1)
        with pytest.raises(AnchorError):
            snn_entry(data, 1, 1, plan, SnnConfig())
        bad = AnchorPlan((0, 0), (1,), ((0, 1),))
        with pytest.raises(AnchorError):
            snn_entry(data, 0, 0, bad, SnnConfig())
        zero = MaskedMatrix(np.zeros((3, 3)), np.ones((3, 3), dtype=bool))
        with pytest.raises(DegenerateFoldError):
            snn_entry(zero, 0, 0, full_plan(3, 3, 0, 0, 1), SnnConfig())
        with pytest.raises(SnnError, match="fewer than the minimum"):
            snn_entry(data, 0, 0, full_plan(5, 5, 0, 0, 2), SnnConfig(min_anchor_rows=3))

    def test_identification_with_rank_sized_folds(self, rng):
        # noiseless rank-3 data, folds of exactly three rows
        A = low_rank(rng, 10, 8, 3)
        mask = np.ones_like(A, dtype=bool)
        mask[0, 0] = False
        data = MaskedMatrix(np.where(mask, A, 0.0), mask)
        est = snn_entry(data, 0, 0, full_plan(10, 8, 0, 0, 3), SnnConfig(rank_policy=Fixed(3)))
        assert est.value == pytest.approx(A[0, 0], abs=1e-8)


class TestTransposed:
    def test_scalar_case(self):
        Y = np.array([[0.0, 3.0], [2.0, 5.0]])
        mask = np.array([[False, True], [True, True]])
        data = MaskedMatrix(Y, mask)
        plan = AnchorPlan((0, 0), (1,), ((1,),))
        a = snn_entry(data, 0, 0, plan, SnnConfig())
        b = snn_entry_transposed(data, 0, 0, plan, SnnConfig())
        assert a.value == pytest.approx(2.0 * 3.0 / 5.0)
        assert b.value == pytest.approx(a.value)

    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.1]))
    def test_fold_values_agree(self, seed, sigma):
        rng = np.random.default_rng(seed)
        Y = low_rank(rng, 9, 7, 2) + sigma * rng.standard_normal((9, 7))
        data = MaskedMatrix(Y, np.ones_like(Y, dtype=bool))
        plan = full_plan(9, 7, 0, 0, 2, seed)
        cfg = SnnConfig(rank_policy=Fixed(2))
        a = snn_entry(data, 0, 0, plan, cfg)
        b = snn_entry_transposed(data, 0, 0, plan, cfg)
        np.testing.assert_allclose(a.fold_values, b.fold_values, atol=1e-10)


class TestConfidenceInterval:
    def test_noiseless_collapses(self, rng):
        A = low_rank(rng, 10, 8, 2)
        data = MaskedMatrix(A, np.ones_like(A, dtype=bool))
        cfg = SnnConfig(rank_policy=Fixed(2))
        est = snn_entry(data, 0, 0, full_plan(10, 8, 0, 0, 1), cfg)
        (lo, hi), var = confidence_interval(est, data, cfg)
        assert hi - lo < 1e-6
        assert var >= 0.0
        assert lo <= est.value <= hi

    def test_half_width_scales_with_sigma(self):
        rng = np.random.default_rng(11)
        A = low_rank(rng, 41, 40, 2)
        cfg = SnnConfig(rank_policy=Fixed(2))
        plan = full_plan(41, 40, 0, 0, 2)
        widths = {}
        for sigma in (0.1, 0.2):
            w = []
            for _ in range(40):
                Y = A + sigma * rng.standard_normal(A.shape)
                data = MaskedMatrix(Y, np.ones_like(Y, dtype=bool))
                est = snn_entry(data, 0, 0, plan, cfg)
                w.append(est.ci[1] - est.ci[0])
            widths[sigma] = np.mean(w)
        assert widths[0.2] / widths[0.1] == pytest.approx(2.0, rel=0.25)

    def test_variance_formula(self, rng):
        Y = low_rank(rng, 15, 10, 2) + 0.3 * rng.standard_normal((15, 10))
        data = MaskedMatrix(Y, np.ones_like(Y, dtype=bool))
        cfg = SnnConfig(rank_policy=Fixed(2), ci_level=0.9)
        plan = full_plan(15, 10, 0, 0, 2)
        est = snn_entry(data, 0, 0, plan, cfg)
        cols = list(plan.anchor_cols)
        resid, dof, proj = [], [], []
        for fold, beta in zip(plan.anchor_row_folds, est.fold_betas):
            S = Y[np.ix_(list(fold), cols)]
            U = np.linalg.svd(S, full_matrices=False)[0][:, :2]
            r = Y[0, cols] - S.T @ beta
            resid.append(r @ r / (len(cols) - 2))
            proj.append(np.sum((U @ U.T @ beta) ** 2))
        sigma2 = np.mean(resid)
        var = sigma2 * sum(proj) / 4
        assert est.variance == pytest.approx(var)
        half = 1.6448536269514722 * math.sqrt(var)
        assert est.ci == pytest.approx((est.value - half, est.value + half))

    def test_no_residual_dof_flag(self):
        A = rank1_5x5()
        data = MaskedMatrix(A, np.ones_like(A, dtype=bool))
        plan = AnchorPlan((0, 0), (1,), ((1, 2),))
        est = snn_entry(data, 0, 0, plan, SnnConfig(rank_policy=Fixed(1)))
        assert "no_residual_dof" in est.flags
        assert math.isnan(est.variance)

    def test_per_row_plugin_is_a_stub(self, rng):
        A = low_rank(rng, 5, 5, 1)
        data = MaskedMatrix(A, np.ones_like(A, dtype=bool))
        with pytest.raises(NotImplementedError, match="unimplemented"):
            snn_entry(data, 0, 0, full_plan(5, 5, 0, 0, 1), SnnConfig(noise_model="per_row_plugin"))


class TestComplete:
    def test_fully_observed_no_targets(self, rng):
        Y = rng.standard_normal((4, 4))
        data = MaskedMatrix(Y, np.ones_like(Y, dtype=bool))
        out = snn_complete(data)
        np.testing.assert_array_equal(out.values, Y)
        assert (out.status == "observed").all()
        np.testing.assert_array_equal(snn_complete(data, targets=[]).values, Y)

    def test_rank1_single_missing(self):
        A = rank1_5x5()
        mask = np.ones_like(A, dtype=bool)
        mask[2, 3] = False
        out = snn_complete(MaskedMatrix(np.where(mask, A, 0.0), mask))
        np.testing.assert_allclose(out.values, A, atol=1e-8)
        assert out.status[2, 3] == "estimated"
        assert (2, 3) in out.estimates

    def test_unestimable_cells_are_flagged(self):
        Y = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 5.0]])
        mask = np.array([[True, True, False], [False, False, False], [False, False, True]])
        out = snn_complete(MaskedMatrix(Y, mask))
        assert out.status[1, 0] == "no_anchor"
        assert np.isnan(out.values[1, 0])
        assert out.failed[1, 0]

    def test_explicit_targets_and_bounds(self, rng):
        A = low_rank(rng, 6, 6, 1)
        data = MaskedMatrix(A, np.ones_like(A, dtype=bool))
        out = snn_complete(data, targets=[(0, 0)], cfg=SnnConfig(rank_policy=Fixed(1)))
        assert out.status[0, 0] == "estimated"
        assert out.values[0, 0] == pytest.approx(A[0, 0])
        with pytest.raises(IndexError):
            snn_complete(data, targets=[(6, 0)])
        with pytest.raises(SnnError):
            snn_complete(data, targets="everything")

    def test_degenerate_status(self):
        Y = np.zeros((4, 4))
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        out = snn_complete(MaskedMatrix(Y, mask))
        assert out.status[0, 0] == "degenerate"

    def test_recovers_low_rank_with_mcar_mask(self, rng):
        A = low_rank(rng, 30, 30, 2)
        mask = rng.random(A.shape) < 0.7
        out = snn_complete(MaskedMatrix(np.where(mask, A, 0.0), mask), cfg=SnnConfig(rank_policy=Fixed(2)))
        done = out.estimated & ~mask
        assert done.sum() > 0.9 * (~mask).sum()
        np.testing.assert_allclose(out.values[done], A[done], atol=1e-6)

    def test_permutation_equivariance(self, rng):
        # noiseless, so tied anchor blocks give identical values whatever the labels
        A = low_rank(rng, 12, 10, 2)
        mask = rng.random(A.shape) < 0.8
        cfg = SnnConfig(rank_policy=Fixed(2), k_folds=1)
        base = snn_complete(MaskedMatrix(np.where(mask, A, 0.0), mask), cfg=cfg)
        rp, cp = rng.permutation(12), rng.permutation(10)
        Mp = mask[np.ix_(rp, cp)]
        perm = snn_complete(MaskedMatrix(np.where(Mp, A[np.ix_(rp, cp)], 0.0), Mp), cfg=cfg)
        np.testing.assert_allclose(perm.values, base.values[np.ix_(rp, cp)], atol=1e-8)
        np.testing.assert_array_equal(perm.status, base.status[np.ix_(rp, cp)])

    def test_permutation_equivariance_with_plans(self, rng):
        A = low_rank(rng, 10, 8, 2) + 0.05 * rng.standard_normal((10, 8))
        mask = np.ones_like(A, dtype=bool)
        mask[0, 0] = False
        cfg = SnnConfig(rank_policy=Fixed(2))
        data = MaskedMatrix(np.where(mask, A, 0.0), mask)
        rows, cols = anchor_submatrix(mask, 0, 0)
        plan = AnchorPlan((0, 0), cols, partition_rows(rows, 2, np.random.default_rng(0)))
        est = snn_entry(data, 0, 0, plan, cfg)
        rp, cp = rng.permutation(10), rng.permutation(8)
        inv_r, inv_c = np.argsort(rp), np.argsort(cp)
        data_p = MaskedMatrix(data.values[np.ix_(rp, cp)], mask[np.ix_(rp, cp)])
        plan_p = AnchorPlan(
            (int(inv_r[0]), int(inv_c[0])),
            tuple(int(inv_c[c]) for c in cols),
            tuple(tuple(int(inv_r[r]) for r in f) for f in plan.anchor_row_folds),
        )
        est_p = snn_entry(data_p, *plan_p.target, plan_p, cfg)
        assert est_p.value == pytest.approx(est.value, abs=1e-10)
