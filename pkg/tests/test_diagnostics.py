import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nearrank.diagnostics import (
    RANK_LOSS_COLUMNS,
    check_perturbation_inequality,
    count_below_threshold,
    eq4_bound,
    layer_spectra,
    near_rank_loss,
    near_rank_loss_many,
)
from nearrank.svd import singular_values
from nearrank.tensor import mode_unfold
from oracles import gram_count_below, gram_singular_values

seeds = st.integers(0, 2 ** 32 - 1)


def duplicated_columns(rows, cols, k, rng):
    """Random ``rows x cols`` matrix whose last ``k`` columns copy earlier ones (rank cols-k)."""
    a = rng.standard_normal((rows, cols))
    for j in range(cols - k, cols):
        a[:, j] = a[:, rng.integers(0, cols - k)]
    return a


class TestCount:
    def test_none_below(self):
        assert count_below_threshold([3, 2, 1], 1e-4) == 0

    def test_strictly_below(self):
        assert count_below_threshold([1, 1e-5, 0], 1e-4) == 2
        assert count_below_threshold([1e-4], 1e-4) == 0

    def test_rank_one_matrix(self):
        col = np.random.default_rng(0).standard_normal(8)
        assert count_below_threshold(singular_values(np.tile(col[:, None], (1, 4))), 1e-4) == 3

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            count_below_threshold([1.0], 0.0)

    def test_negative_spectrum_rejected(self):
        with pytest.raises(ValueError):
            count_below_threshold([1.0, -1.0], 1e-4)


class TestNearRankLoss:
    def test_full_rank_layer(self):
        a = np.random.default_rng(0).standard_normal((16, 8))
        assert singular_values(a)[-1] > 1e-4
        rep = near_rank_loss([a], 1e-4)
        assert rep.s_z_total == 0
        assert rep.per_layer[0].examined == 8

    def test_planted_deficiency_two_layers(self):
        rng = np.random.default_rng(1)
        acts = [duplicated_columns(20, 10, 3, rng), duplicated_columns(12, 9, 5, rng)]
        rep = near_rank_loss(acts, 1e-4)
        assert [lay.s_z for lay in rep.per_layer] == [3, 5]
        assert rep.s_z_total == 8

    def test_rank_one_order_four(self):
        rng = np.random.default_rng(2)
        t = np.einsum("i,j,k,l->ijkl", *(rng.standard_normal(d) for d in (2, 2, 3, 4)))
        rep = near_rank_loss([t], 1e-4)
        expected = sum(gram_count_below(mode_unfold(t, k), 1e-4) for k in range(4))
        # each mode keeps one nonzero value: (2-1) + (2-1) + (3-1) + (4-1)
        assert expected == 7
        assert rep.s_z_total == expected
        assert [m.s_z for m in rep.per_layer[0].modes] == [1, 1, 2, 3]

    def test_mode_selection(self):
        t = np.random.default_rng(3).standard_normal((3, 3, 2, 5))
        rep = near_rank_loss([t], 1e-4, modes=[3])
        assert [m.mode for m in rep.per_layer[0].modes] == ["3"]
        assert rep.per_layer[0].examined == 5

    def test_layer_spectra_per_mode(self):
        t = np.random.default_rng(4).standard_normal((3, 4, 2, 6))
        for label, s in layer_spectra(t):
            np.testing.assert_allclose(s, gram_singular_values(mode_unfold(t, int(label))), atol=1e-9)

    def test_empty_layer_list(self):
        with pytest.raises(ValueError):
            near_rank_loss([], 1e-4)

    def test_non_finite_activation(self):
        a = np.ones((4, 4))
        a[0, 0] = np.inf
        with pytest.raises(FloatingPointError):
            near_rank_loss([a], 1e-4)

    def test_order_three_rejected(self):
        with pytest.raises(ValueError):
            near_rank_loss([np.ones((2, 2, 2))], 1e-4)

    def test_batch_cap_subsamples_deterministically(self):
        a = np.random.default_rng(5).standard_normal((6, 50))
        r1 = near_rank_loss([a], 1e-4, batch_cap=20, seed=7)
        r2 = near_rank_loss([a], 1e-4, batch_cap=20, seed=7)
        assert r1.per_layer[0].batch_used == 20
        assert r1.per_layer[0].shape == (6, 50)
        assert r1.to_dict() == r2.to_dict()
        assert near_rank_loss([a], 1e-4, batch_cap=None).per_layer[0].batch_used == 50

    def test_rows_have_fixed_columns(self):
        rep = near_rank_loss([np.eye(3), np.ones((2, 2, 2, 2))], 1e-4)
        assert RANK_LOSS_COLUMNS == ("layer", "mode", "count_examined", "S_z")
        rows = rep.rows()
        assert rows[0] == ("layer0", "matrix", 3, 0)
        assert [r[1] for r in rows[1:]] == ["0", "1", "2", "3"]

    def test_many_thresholds_match_single(self):
        rng = np.random.default_rng(6)
        acts = [duplicated_columns(10, 6, 2, rng) * 1e-5, rng.standard_normal((3, 3, 2, 4))]
        many = near_rank_loss_many(acts, [1e-4, 1e-5])
        for rep in many:
            assert rep.to_dict() == near_rank_loss(acts, rep.threshold).to_dict()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(2, 8), st.integers(1, 8), st.integers(0, 7)),
                    min_size=1, max_size=4), seeds, st.integers(1, 3))
    def test_accumulation_identity(self, layers, seed, split):
        rng = np.random.default_rng(seed)
        acts = [duplicated_columns(r, c, min(k, c - 1), rng) for r, c, k in layers]
        total = near_rank_loss(acts, 1e-4).s_z_total
        assert total == sum(lay.s_z for lay in near_rank_loss(acts, 1e-4).per_layer)
        cut = min(split, len(acts))
        parts = [acts[:cut], acts[cut:]]
        assert total == sum(near_rank_loss(p, 1e-4).s_z_total for p in parts if p)

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.floats(1e-8, 1e-1), st.floats(1.0, 100.0))
    def test_threshold_monotonicity(self, seed, t_low, factor):
        rng = np.random.default_rng(seed)
        scale = 10.0 ** rng.uniform(-7, 0, size=6)
        acts = [rng.standard_normal((8, 6)) * scale, rng.standard_normal((3, 2, 2, 5)) * 1e-4]
        low = near_rank_loss(acts, t_low).s_z_total
        high = near_rank_loss(acts, t_low * factor).s_z_total
        assert high >= low

    def test_report_bounds(self):
        rep = near_rank_loss([np.zeros((3, 4)), np.eye(4)], 1e-4)
        for lay in rep.per_layer:
            assert 0 <= lay.s_z <= lay.examined
        assert rep.per_layer[0].s_z == 3


class TestEq4Bound:
    def test_identity(self):
        delta = np.random.default_rng(0).standard_normal((3, 3))
        delta *= 1e-3 / np.linalg.norm(delta)
        assert eq4_bound(np.eye(3), delta) == pytest.approx(3e-3, rel=1e-12)

    def test_diagonal(self):
        delta = np.array([[0.6, 0.0], [0.0, 0.8]])
        assert eq4_bound(np.diag([2.0, 1.0]), delta) == pytest.approx(1.5, rel=1e-12)

    def test_against_gram_oracle(self):
        rng = np.random.default_rng(1)
        a, d = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        oracle = np.sqrt(np.sum(d ** 2)) * np.sum(1.0 / gram_singular_values(a))
        assert eq4_bound(a, d) == pytest.approx(oracle, abs=1e-9)

    def test_zero_activation(self):
        with pytest.raises(ValueError):
            eq4_bound(np.zeros((3, 3)), np.ones((3, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            eq4_bound(np.eye(3), np.ones((3, 2)))

    def test_rank_deficient_uses_retained_values(self):
        a = np.diag([4.0, 2.0, 0.0])
        assert eq4_bound(a, np.eye(3)) == pytest.approx(np.sqrt(3) * 0.75)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), seeds)
    def test_at_least_delta_over_sigma_max(self, m, n, seed):
        rng = np.random.default_rng(seed)
        a, d = rng.standard_normal((m, n)), rng.standard_normal((m, n))
        assert eq4_bound(a, d) >= np.linalg.norm(d) / singular_values(a)[0] * (1 - 1e-12)


class TestPerturbation:
    def test_identity_data(self):
        theta = np.random.default_rng(0).standard_normal((3, 3)) + 3 * np.eye(3)
        eps = 1e-3
        chk = check_perturbation_inequality(theta, np.eye(3), eps * np.eye(3))
        assert chk.lhs == pytest.approx(eps, rel=1e-12)
        assert chk.bound == pytest.approx(3 * eps, rel=1e-12)
        assert chk.svd_bound == pytest.approx(np.sqrt(3) * 3 * eps, rel=1e-12)
        assert chk.holds

    def test_zero_perturbation(self):
        chk = check_perturbation_inequality(np.eye(2) * 2, np.eye(2), np.zeros((2, 2)))
        assert chk.lhs == 0.0 and chk.bound == 0.0 and chk.holds

    def test_delta_theta_solves_linearised_system(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        x = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        dx = 1e-3 * rng.standard_normal((5, 5))
        chk = check_perturbation_inequality(theta, x, dx)
        # exact solve of dtheta @ x = -theta @ dx
        expected = np.linalg.solve(x.T, (-theta @ dx).T).T
        np.testing.assert_allclose(chk.delta_theta, expected, rtol=1e-10, atol=1e-14)

    def test_wide_data_matrix(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 7))
        dx = rng.standard_normal((3, 7)) * 1e-2
        chk = check_perturbation_inequality(np.eye(3), x, dx)
        # least-squares solution of dtheta @ x = -dx
        lsq = np.linalg.lstsq(x.T, -dx.T, rcond=None)[0].T
        np.testing.assert_allclose(chk.delta_theta, lsq, atol=1e-12)
        assert chk.holds and chk.bound <= chk.svd_bound + 1e-15

    def test_singular_theta(self):
        with pytest.raises(ValueError):
            check_perturbation_inequality(np.diag([1.0, 0.0]), np.eye(2), np.zeros((2, 2)))

    def test_rank_deficient_x(self):
        with pytest.raises(ValueError):
            check_perturbation_inequality(np.eye(2), np.ones((2, 3)), np.zeros((2, 3)))

    def test_tall_x_is_not_full_row_rank(self):
        with pytest.raises(ValueError):
            check_perturbation_inequality(np.eye(3), np.ones((3, 2)), np.zeros((3, 2)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 4), seeds, st.floats(1e-8, 1.0))
    def test_bound_never_violated(self, k, extra, seed, eps):
        rng = np.random.default_rng(seed)
        theta = rng.standard_normal((k, k)) + 2 * k * np.eye(k)
        x = rng.standard_normal((k, k + extra)) + np.hstack([2 * k * np.eye(k), np.zeros((k, extra))])
        chk = check_perturbation_inequality(theta, x, eps * rng.standard_normal(x.shape))
        assert chk.holds
        assert chk.bound <= chk.svd_bound * (1 + 1e-12)
        assert all(np.isfinite(v) and v >= 0 for v in (chk.lhs, chk.bound, chk.svd_bound))
