import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snnmc.lti import (
    InterventionSchedule,
    LrfSpec,
    LtiError,
    UnstableSystemWarning,
    augmented_step,
    build_system,
    check_stability,
    companion_block,
    control_period_schedule,
    observed_column,
    random_system,
    read_schedule,
    selection_matrix,
    simulate,
    step,
    write_delta_tensor,
    write_schedule,
)
from snnmc.snn import SnnConfig, snn_complete
from snnmc.spectral import Fixed


def recursion(beta, rho_init, steps):
    """Scalar AR(G) sequence; ``rho_init`` newest first. Returns the next ``steps`` values."""
    hist = list(rho_init)
    out = []
    for _ in range(steps):
        nxt = sum(b * h for b, h in zip(beta, hist))
        out.append(nxt)
        hist = [nxt] + hist[:-1]
    return np.array(out)


def direct_delta(theta, omega, beta, rho_init, T):
    """N x T x I innovations from the factorised form."""
    rho = np.stack([recursion(beta[r], rho_init[r], T) for r in range(len(beta))])  # R x T
    return np.einsum("nr,ir,rt->nti", theta, omega, rho)


def small_system(rng, N=3, I=2, R=2, G=2):
    beta = rng.uniform(-0.4, 0.4, (R, G))
    rho = rng.standard_normal((R, G))
    theta, omega = rng.standard_normal((N, R)), rng.standard_normal((I, R))
    return build_system(LrfSpec(beta, rho), theta, omega), beta, rho, theta, omega


class TestCompanion:
    def test_scalar_and_ar2(self):
        np.testing.assert_array_equal(companion_block([0.9]), [[0.9]])
        np.testing.assert_array_equal(companion_block([1.0, -0.5]), [[1.0, -0.5], [1.0, 0.0]])
        with pytest.raises(LtiError):
            companion_block([])

    def test_ar2_matches_recursion(self):
        A = companion_block([1.0, -0.5])
        x = np.array([0.7, -0.2])
        ref = recursion([1.0, -0.5], [0.7, -0.2], 50)
        for t in range(50):
            x = A @ x
            assert x[0] == pytest.approx(ref[t], abs=1e-10)


class TestBuild:
    def test_single_factor(self, rng):
        sys = build_system(LrfSpec([[0.5, 0.2]], [[1.0, 2.0]]), rng.standard_normal((2, 1)), [[1.0]])
        np.testing.assert_array_equal(sys.A, companion_block([0.5, 0.2]))
        np.testing.assert_array_equal(sys.X, [1.0, 2.0])

    def test_lag_one_is_diagonal(self, rng):
        sys = build_system(LrfSpec([[0.3], [0.8]], [[1.0], [1.0]]), np.ones((2, 2)), np.ones((1, 2)))
        np.testing.assert_array_equal(sys.A, np.diag([0.3, 0.8]))

    def test_loading_layout(self):
        theta = np.array([[1.0, 2.0], [3.0, 4.0]])
        omega = np.array([[5.0, 6.0], [7.0, 8.0], [9.0, 10.0]])
        sys = build_system(LrfSpec(np.zeros((2, 3)), np.zeros((2, 3))), theta, omega)
        for n in range(2):
            for i in range(3):
                row = sys.B[n * 3 + i]
                assert row.tolist() == [theta[n, 0] * omega[i, 0], 0, 0, theta[n, 1] * omega[i, 1], 0, 0]

    def test_innovations_match_factorisation(self, rng):
        sys, beta, rho, theta, omega = small_system(rng)
        ref = direct_delta(theta, omega, beta, rho, 20)
        for t in range(20):
            step(sys)
            np.testing.assert_allclose(sys.innovations(), ref[:, t, :], atol=1e-10)
            np.testing.assert_allclose(sys.B @ sys.X, ref[:, t, :].ravel(), atol=1e-10)

    def test_shape_errors(self):
        with pytest.raises(LtiError):
            build_system(LrfSpec([[0.5]], [[1.0]]), np.ones((2, 2)), np.ones((1, 1)))
        with pytest.raises(LtiError):
            LrfSpec([[0.5, 0.1]], [[1.0]])
        with pytest.raises(LtiError):
            LrfSpec([[np.nan]], [[1.0]])


class TestStep:
    def test_zero_and_unit_root(self):
        sys = build_system(LrfSpec([[0.5, 0.3]], [[0.0, 0.0]]), [[1.0]], [[1.0]])
        step(sys)
        np.testing.assert_array_equal(sys.X, [0.0, 0.0])
        sys = build_system(LrfSpec([[1.0]], [[2.5]]), [[1.0]], [[1.0]])
        for _ in range(5):
            step(sys)
        assert sys.X.tolist() == [2.5]

    def test_thirty_steps_vs_recursion(self, rng):
        sys, beta, rho, _, _ = small_system(rng, R=3, G=3)
        refs = [recursion(beta[r], rho[r], 30) for r in range(3)]
        for t in range(30):
            prev = sys.X.copy()
            step(sys)
            np.testing.assert_allclose(sys.X, sys.A @ prev)
            np.testing.assert_allclose(sys.rho(), [refs[r][t] for r in range(3)], atol=1e-10)


class TestSelection:
    def test_definition(self):
        np.testing.assert_array_equal(selection_matrix([1], 2), [[0, 1]])
        np.testing.assert_array_equal(selection_matrix([0, 1], 2), [[1, 0, 0, 0], [0, 0, 0, 1]])

    def test_out_of_range_names_unit(self):
        with pytest.raises(LtiError, match="unit 1"):
            selection_matrix([0, 2], 2)

    @given(st.integers(0, 2**32 - 1))
    def test_picks_observed_innovation(self, seed):
        rng = np.random.default_rng(seed)
        N, I = 4, 3
        a = rng.integers(0, I, N)
        y = rng.standard_normal(N * I)
        picked = selection_matrix(a, I) @ y
        assert picked.tolist() == [y[n * I + a[n]] for n in range(N)]


class TestSchedule:
    def test_validation(self):
        with pytest.raises(LtiError, match=r"\(t=1, n=0\)"):
            InterventionSchedule(np.array([[0, 1], [2, 0]]), 2)
        with pytest.raises(LtiError):
            InterventionSchedule(np.array([[0.5]]), 2)

    def test_file_round_trip_is_one_indexed(self, tmp_path):
        sched = InterventionSchedule(np.array([[0, 1], [1, 1]]), 2)
        path = tmp_path / "s.csv"
        write_schedule(sched, path)
        assert path.read_text() == "1,2\n2,2\n"
        np.testing.assert_array_equal(read_schedule(path, 2).assignments, sched.assignments)
        path.write_text("1,x\n")
        with pytest.raises(LtiError):
            read_schedule(path, 2)

    def test_control_period(self, rng):
        s = control_period_schedule(10, 5, 3, 4, rng)
        assert (s.assignments[:4] == 0).all()
        assert s.T == 10 and s.N == 5


class TestSimulate:
    def test_constant_unit_innovation(self):
        sys = build_system(LrfSpec([[1.0]], [[1.0]]), np.ones((3, 1)), np.ones((2, 1)))
        sim = simulate(sys, InterventionSchedule(np.zeros((5, 3), dtype=int), 2), 5)
        np.testing.assert_array_equal(sim.M_path, np.tile(np.arange(1.0, 6.0), (3, 1)))
        assert sys.M.tolist() == [0.0, 0.0, 0.0]  # input left untouched

    def test_one_observation_per_unit_and_time(self, rng):
        sys = random_system(4, 3, 2, 2, rng)
        sched = InterventionSchedule(rng.integers(0, 3, (6, 4)), 3)
        sim = simulate(sys, sched, 6, sigma=0.1, rng=rng)
        mask = sim.observed.mask.reshape(4, 6, 3)
        assert (mask.sum(axis=2) == 1).all()
        for t in range(6):
            for n in range(4):
                assert sim.observed.mask[n, observed_column(t, sched.assignments[t, n], 3)]

    def test_delta_matches_factorisation(self, rng):
        sys, beta, rho, theta, omega = small_system(rng, N=4, I=3, R=2, G=3)
        sim = simulate(sys, InterventionSchedule(np.zeros((15, 4), dtype=int), 3), 15)
        np.testing.assert_allclose(sim.delta_tensor, direct_delta(theta, omega, beta, rho, 15), atol=1e-10)

    def test_observed_innovations_are_selected_full_vector(self, rng):
        sys = random_system(3, 2, 2, 2, rng)
        sched = InterventionSchedule(rng.integers(0, 2, (8, 3)), 2)
        sim = simulate(sys, sched, 8)
        X_prev = sys.X.copy()
        for t in range(8):
            C = selection_matrix(sched.assignments[t], 2)
            obs = sim.observed.values[np.arange(3), observed_column(t, sched.assignments[t], 2)]
            np.testing.assert_allclose(obs, C @ sys.B @ sys.A @ X_prev, atol=1e-10)
            X_prev = sim.X_path[t]

    def test_innovation_slices_are_low_rank(self, rng):
        sys = random_system(20, 2, 2, 3, rng)
        sim = simulate(sys, InterventionSchedule(np.zeros((25, 20), dtype=int), 2), 25)
        for i in range(2):
            s = np.linalg.svd(sim.delta_tensor[:, :, i], compute_uv=False)
            assert np.all(s[2:] < 1e-8 * s[0])

    def test_errors(self, rng):
        sys = random_system(2, 2, 1, 1, rng)
        sched = InterventionSchedule(np.zeros((3, 2), dtype=int), 2)
        with pytest.raises(LtiError):
            simulate(sys, sched, 4)
        with pytest.raises(LtiError):
            simulate(sys, sched, 3, sigma=0.1)
        with pytest.raises(LtiError):
            simulate(sys, InterventionSchedule(np.zeros((3, 3), dtype=int), 2), 3)

    def test_unstable_warning(self):
        sys = build_system(LrfSpec([[1.2]], [[1.0]]), [[1.0]], [[1.0]])
        with pytest.warns(UnstableSystemWarning):
            simulate(sys, InterventionSchedule(np.zeros((2, 1), dtype=int), 1), 2)
        stable = build_system(LrfSpec([[1.04]], [[1.0]]), [[1.0]], [[1.0]])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert check_stability(stable) == pytest.approx(1.04)

    def test_delta_tensor_file(self, tmp_path):
        delta = np.arange(12.0).reshape(2, 3, 2)
        path = tmp_path / "d.csv"
        write_delta_tensor(delta, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# intervention 1")
        assert lines[1] == "0,2,4"
        assert lines[3].startswith("# intervention 2")
        assert lines[4] == "1,3,5"


class TestAugmented:
    def test_zero_control(self, rng):
        sys = random_system(2, 2, 1, 2, rng)
        M, X = augmented_step(sys, np.array([1.0, 2.0]), sys.X, np.zeros((2, 4)))
        assert M.tolist() == [1.0, 2.0]
        np.testing.assert_allclose(X, sys.A @ sys.X)

    def test_scalar_expansion(self):
        sys = build_system(LrfSpec([[0.5]], [[3.0]]), [[2.0]], [[1.5]])
        M, _ = augmented_step(sys, np.array([0.0]), sys.X, selection_matrix([0], 1))
        assert M[0] == pytest.approx(2.0 * 1.5 * 0.5 * 3.0)

    def test_trajectory_matches_simulate(self, rng):
        sys = random_system(4, 3, 2, 2, rng)
        sched = InterventionSchedule(rng.integers(0, 3, (20, 4)), 3)
        sim = simulate(sys, sched, 20)
        M, X = sys.M.copy(), sys.X.copy()
        for t in range(20):
            M, X = augmented_step(sys, M, X, selection_matrix(sched.assignments[t], 3))
            np.testing.assert_allclose(M, sim.M_path[:, t], atol=1e-10)
            np.testing.assert_allclose(X, sim.X_path[t], atol=1e-10)

    def test_shape_errors(self, rng):
        sys = random_system(2, 2, 1, 1, rng)
        with pytest.raises(LtiError):
            augmented_step(sys, np.zeros(3), sys.X, np.zeros((2, 4)))
        with pytest.raises(LtiError):
            augmented_step(sys, np.zeros(2), sys.X, np.zeros((2, 3)))


def test_random_system_is_stable(rng):
    for _ in range(20):
        sys = random_system(3, 2, 3, 3, rng)
        assert check_stability(sys) < 1.0


def test_snn_recovers_counterfactual_innovations():
    rng = np.random.default_rng(8)
    sys = random_system(30, 2, 2, 2, rng)
    sched = control_period_schedule(20, 30, 2, 10, rng)
    sim = simulate(sys, sched, 20)
    truth = sim.delta_tensor.reshape(30, 40)
    held_out = ~sim.observed.mask
    held_out[:, :20] = False  # counterfactuals after the control period
    targets = list(zip(*np.nonzero(held_out)))
    out = snn_complete(sim.observed, targets=targets, cfg=SnnConfig(rank_policy=Fixed(2), k_folds=1))
    done = out.estimated & held_out
    assert done.sum() == held_out.sum()
    np.testing.assert_allclose(out.values[done], truth[done], atol=1e-6)
