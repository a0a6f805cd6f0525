import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfplay.errors import DivergenceError, DomainError, InsufficientSamplesError, TimeRangeError
from sfplay.flow import FieldHandle, FlowOptions, flow, flow_path, linear_field
from sfplay.games import Game, MixedProfile, coordination_game
from sfplay.response import BestResponseField, CustomChoice, Logit, logit
from sfplay.stochastic import (
    NoiseRecord,
    OmegaRate,
    StepSchedule,
    Trajectory,
    analytic_q,
    apt_distance,
    gaussian_noise,
    interpolate,
    k0_index,
    martingale_check,
    noise_stats,
    omega_bound,
    omega_integrand,
    q_form,
    run_diffusion,
    run_robbins_monro,
    run_sfp,
    tangent_spectrum,
    uniform_noise,
    zero_noise,
)

import oracles
from conftest import three_player_game


def coord_field(eta=0.5):
    return BestResponseField(coordination_game(), Logit(eta))


# -- step schedules ------------------------------------------------------------


def test_harmonic_tau_matches_summation():
    s = StepSchedule.harmonic()
    for n in (1, 2, 10, 1000, 123457):
        assert float(s.tau(n)) == pytest.approx(math.fsum(1.0 / k for k in range(1, n + 1)), rel=1e-13)
    assert float(s.tau(0)) == 0.0


def test_power_schedule():
    s = StepSchedule.power(0.7)
    n = np.arange(1, 501)
    np.testing.assert_allclose(s.gamma(n), n ** -0.7)
    assert float(s.tau(500)) == pytest.approx(math.fsum(k ** -0.7 for k in range(1, 501)), rel=1e-13)
    for bad in (0.5, 0.3, 1.2):
        with pytest.raises(DomainError):
            StepSchedule.power(bad)


def test_custom_schedule_checks():
    StepSchedule("custom", fn=lambda n: 2.0 / (n + 1))
    with pytest.raises(DomainError):
        StepSchedule("custom", fn=lambda n: 1.0 / n.astype(float) ** 2)
    with pytest.raises(DomainError):
        StepSchedule("custom", fn=lambda n: n.astype(float))


@pytest.mark.parametrize("sched", [StepSchedule.harmonic(), StepSchedule.power(0.8)])
def test_index_at_brackets_time(sched):
    for t in (0.0, 0.5, 1.0, 2.2, 7.3, 12.0):
        i = sched.index_at(t)
        assert float(sched.tau(i)) <= t < float(sched.tau(i + 1))
        assert sched.gamma_bar(t) == float(sched.gamma(i + 1))


# -- Robbins-Monro -----------------------------------------------------------------


def test_zero_noise_matches_product_formula():
    F = linear_field([[-0.5]])
    for sched, alpha in ((StepSchedule.harmonic(), 1.0), (StepSchedule.power(0.7), 0.7)):
        traj, _ = run_robbins_monro(F, np.array([2.0]), zero_noise, sched, 200)
        prod = 2.0
        for k in range(1, 201):
            prod *= 1 - 0.5 * k ** -alpha
            assert traj.states[k, 0] == pytest.approx(prod, rel=1e-12, abs=1e-300)


def test_harmonic_halving_field_closed_form():
    # x_{n+1} = x_n (1 - 1/(2(n+1))) telescopes to a ratio of gamma functions
    traj, _ = run_robbins_monro(linear_field([[-0.5]]), np.array([1.0]), zero_noise,
                                StepSchedule.harmonic(), 50)
    n = 50
    exact = math.exp(math.lgamma(n + 0.5) - math.lgamma(0.5) - math.lgamma(n + 1))
    assert traj.final[0] == pytest.approx(exact, rel=1e-12)


def test_robbins_monro_is_deterministic():
    F = coord_field().as_handle()
    x0 = np.array([0.5, 0.5, 0.5, 0.5])
    a, ra = run_robbins_monro(F, x0, gaussian_noise(0.1), StepSchedule.harmonic(), 500, seed=4)
    b, rb = run_robbins_monro(F, x0, gaussian_noise(0.1), StepSchedule.harmonic(), 500, seed=4)
    c, _ = run_robbins_monro(F, x0, gaussian_noise(0.1), StepSchedule.harmonic(), 500, seed=5)
    assert a.to_csv() == b.to_csv()
    assert ra.to_csv() == rb.to_csv()
    assert a.to_csv() != c.to_csv()


def test_bounded_noise_mean_is_small():
    n = 100_000
    F = linear_field([[-1.0]])
    _, rec = run_robbins_monro(F, np.array([0.0]), uniform_noise(1.0), StepSchedule.harmonic(), n, seed=8)
    u = rec.increments[:, 0]
    assert abs(u.mean()) <= 3 * (1 / math.sqrt(3)) / math.sqrt(n)


def test_robbins_monro_divergence():
    with pytest.raises(DivergenceError) as info:
        run_robbins_monro(linear_field([[3.0]]), np.array([1.0]), zero_noise, StepSchedule.power(0.6), 5000)
    assert info.value.step > 0


def test_robbins_monro_stride_and_times():
    traj, rec = run_robbins_monro(linear_field([[-1.0]]), np.array([1.0]), zero_noise,
                                  StepSchedule.harmonic(), 95, stride=10)
    assert traj.index.tolist() == [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95]
    np.testing.assert_allclose(traj.times, StepSchedule.harmonic().tau(traj.index))
    assert rec.increments.shape == (95, 1)


# -- stochastic fictitious play ------------------------------------------------------


def test_sfp_state_is_empirical_frequency():
    g = three_player_game()
    f = BestResponseField(g, Logit(0.4))
    x0 = MixedProfile.vertex(g.action_counts, (1, 0, 1))
    traj, rec = run_sfp(g, f, x0, 5000, seed=2, stride=1, record_noise=True)
    counts = x0.vector.copy()
    offs = [0, 2, 4]
    for k, acts in enumerate(rec.actions):
        for i, a in enumerate(acts):
            counts[offs[i] + a] += 1
        n = k + 2
        assert traj.index[k + 1] == n
        assert np.max(np.abs(traj.states[k + 1] - counts / n)) <= 1e-12


def test_sfp_states_are_lattice_points():
    g = coordination_game()
    traj, _ = run_sfp(g, [Logit(0.5)] * 2, MixedProfile.uniform((2, 2)), 20_000, seed=1, stride=7)
    scaled = traj.states * traj.index[:, None]
    np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-8)
    np.testing.assert_allclose(traj.states.reshape(-1, 2, 2).sum(axis=2), 1.0, atol=1e-12)


def test_sfp_noise_is_action_minus_response():
    f = coord_field(0.3)
    traj, rec = run_sfp(f.game, f, MixedProfile.vertex((2, 2), (0, 1)), 2000, seed=3, record_noise=True)
    for u, x, acts in zip(rec.increments[:200], rec.conditioning_states[:200], rec.actions[:200]):
        delta = np.zeros(4)
        delta[acts[0]] = 1
        delta[2 + acts[1]] = 1
        np.testing.assert_allclose(u, delta - f.br_flat(x), atol=1e-14)


def test_interior_start_is_rounded_history():
    x0 = MixedProfile([[0.3337, 0.6663], [0.9, 0.1]])
    traj, _ = run_sfp(coordination_game(), [Logit(0.5)] * 2, x0, 10, seed=0)
    assert traj.index[0] == 1000
    assert np.max(np.abs(traj.states[0] - x0.vector)) <= 1e-3


def test_kernel_matches_python_path():
    g = three_player_game()
    f = BestResponseField(g, [Logit(0.3), Logit(0.5), Logit(0.9)])
    x0 = MixedProfile.uniform(g.action_counts)
    a, ra = run_sfp(g, f, x0, 3000, seed=11, stride=13, keep_last=50, record_noise=True)
    b, rb = run_sfp(g, f, x0, 3000, seed=11, stride=13, keep_last=50, record_noise=True, use_kernel=False)
    assert a.to_csv() == b.to_csv()
    np.testing.assert_array_equal(ra.actions, rb.actions)
    np.testing.assert_allclose(ra.increments, rb.increments, atol=1e-15)


def test_custom_choice_runs_through_python_path():
    c = CustomChoice("logit-half", lambda pi: logit(pi, 0.5))
    g = coordination_game()
    a, _ = run_sfp(g, [c, c], MixedProfile.uniform((2, 2)), 2000, seed=6, stride=1)
    b, _ = run_sfp(g, [Logit(0.5)] * 2, MixedProfile.uniform((2, 2)), 2000, seed=6, stride=1)
    assert a.to_csv() == b.to_csv()


def test_sfp_is_deterministic():
    g = coordination_game()
    runs = [run_sfp(g, [Logit(0.5)] * 2, MixedProfile.uniform((2, 2)), 50_000, seed=s)[0].to_csv()
            for s in (7, 7, 8)]
    assert runs[0] == runs[1] != runs[2]


def test_sfp_storage_layout():
    g = coordination_game()
    traj, _ = run_sfp(g, [Logit(0.5)] * 2, MixedProfile.vertex((2, 2), (0, 0)), 1000, seed=0,
                      stride=100, keep_last=5)
    assert traj.index.tolist() == [1, 101, 201, 301, 401, 501, 601, 701, 801, 901, 997, 998, 999, 1000, 1001]
    assert traj.meta["steps"] == 1000 and traj.meta["stride"] == 100


def test_every_profile_appears_in_each_window():
    f = coord_field(0.5)
    _, rec = run_sfp(f.game, f, MixedProfile.uniform((2, 2)), 300_000, seed=5, record_noise=True)
    codes = rec.actions[:, 0] * 2 + rec.actions[:, 1]
    for lo in range(0, 300_000, 100_000):
        assert set(np.unique(codes[lo:lo + 100_000]).tolist()) == {0, 1, 2, 3}


def test_noise_is_a_martingale_difference():
    f = coord_field(0.5)
    _, rec = run_sfp(f.game, f, MixedProfile.uniform((2, 2)), 10**6, seed=12, record_noise=True)
    rep = noise_stats(rec, f.game, f.choices, buckets=4, min_count=100)
    assert martingale_check(rep, k=4)
    assert sum(b.count for b in rep.buckets) <= 10**6


# -- diffusion -------------------------------------------------------------------------


def zero_field(d):
    return FieldHandle(dim=d, eval=lambda x: np.zeros(d), name="zero")


def test_diffusion_variance_matches_isometry():
    b, t_end = 1.0, 2.0
    ends = np.array([run_diffusion(zero_field(1), np.zeros(1), b, t_end, seed=s).final[0]
                     for s in range(1000)])
    # Euler-Maruyama uses gamma at the left end of each step
    dt = 0.01
    exact = sum(math.exp(-b * k * dt) * dt for k in range(int(t_end / dt)))
    assert exact == pytest.approx((1 - math.exp(-b * t_end)) / b, rel=0.01)
    assert np.var(ends) == pytest.approx(exact, rel=0.10)


def test_fast_decay_tracks_flow():
    F = linear_field(-np.eye(2))
    ok = 0
    for s in range(100):
        traj = run_diffusion(F, np.array([1.0, -0.5]), 20.0, 5.0, seed=s)
        ok += apt_distance(traj, F, 1.0, 4.0) <= 0.05
    assert ok >= 90


def test_diffusion_is_deterministic_and_validated():
    F = linear_field(-np.eye(2))
    a = run_diffusion(F, np.ones(2), 1.0, 1.0, seed=3)
    b = run_diffusion(F, np.ones(2), 1.0, 1.0, seed=3)
    assert a.to_csv() == b.to_csv()
    with pytest.raises(DomainError):
        run_diffusion(F, np.ones(2), 1.0, 1.0, dt=0.05)
    with pytest.raises(DomainError):
        run_diffusion(F, np.ones(2), 0.0, 1.0)


def test_normalized_increment_covariance_band():
    F = linear_field(-np.eye(2))
    t0 = 2.0
    phi1 = flow(F, np.eye(2)[0], 1.0)[0]
    ys = []
    for s in range(1000):
        traj = run_diffusion(F, np.zeros(2), 1.0, t0 + 1.0, seed=(77, s))
        x_t = interpolate(traj, t0)
        y = (traj.final - phi1 * x_t) / math.sqrt(math.exp(-(t0 + 1.0)))
        ys.append(y)
    ev = np.linalg.eigvalsh(np.cov(np.array(ys).T))
    K = 1.0 + 0.5
    lo = (1 - math.exp(-2 * K)) / (2 * K)
    hi = (math.exp(2 * K) - 1) / (2 * K)
    assert 0.8 * lo <= ev.min() and ev.max() <= 1.2 * hi
    # the exact normalized variance is 1 - 1/e
    np.testing.assert_allclose(ev, 1 - math.exp(-1), rtol=0.15)


# -- interpolation and shadowing -----------------------------------------------------


def small_traj():
    return Trajectory([0.0, 1.0, 1.5, 3.0], [[0.0, 1.0], [2.0, 0.0], [2.0, 2.0], [5.0, -1.0]])


def test_interpolate_knots_and_midpoints():
    tr = small_traj()
    for t, x in zip(tr.times, tr.states):
        assert np.array_equal(interpolate(tr, t), x)
    np.testing.assert_allclose(interpolate(tr, 1.25), (tr.states[1] + tr.states[2]) / 2)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.0, 3.0), b=st.floats(0.0, 3.0), lam=st.floats(0.0, 1.0))
def test_interpolation_is_affine_between_knots(a, b, lam):
    tr = small_traj()
    i = np.searchsorted(tr.times, a, side="right") - 1
    lo, hi = tr.times[min(i, 2)], tr.times[min(i, 2) + 1]
    a = min(max(a, lo), hi)
    b = min(max(b, lo), hi)
    mid = lam * a + (1 - lam) * b
    expect = lam * interpolate(tr, a) + (1 - lam) * interpolate(tr, b)
    np.testing.assert_allclose(interpolate(tr, mid), expect, atol=1e-12)


def test_interpolate_range():
    with pytest.raises(TimeRangeError):
        interpolate(small_traj(), 3.5)
    with pytest.raises(TimeRangeError):
        apt_distance(small_traj(), linear_field(-np.eye(2)), 2.5, 1.0)


def test_trajectory_invariants():
    with pytest.raises(Exception):
        Trajectory([0.0, 0.0], [[1.0], [2.0]])
    with pytest.raises(DivergenceError):
        Trajectory([0.0, 1.0], [[1.0], [np.nan]])


def test_trajectory_csv_round_trip():
    tr = small_traj()
    text = tr.to_csv()
    assert text.splitlines()[0] == "t,x_0,x_1"
    back = Trajectory.from_csv(text)
    np.testing.assert_array_equal(back.times, tr.times)
    np.testing.assert_array_equal(back.states, tr.states)


def test_sampled_flow_shadows_itself():
    F = coord_field(0.5).as_handle()
    x0 = np.array([0.2, 0.8, 0.6, 0.4])
    times = np.arange(0, 501) * 0.01
    traj = Trajectory(times, flow_path(F, x0, times, FlowOptions(step=0.01)))
    assert apt_distance(traj, F, 1.0, 2.0, FlowOptions(step=0.01)) <= 1e-7
    assert apt_distance(traj, F, 2.0, 0.0) == 0.0


# -- omega bound ---------------------------------------------------------------------------


def test_integrand_examples():
    assert float(omega_integrand(OmegaRate.moment(2, 2.0), 0.01, 0.1)) == pytest.approx(2.0, rel=1e-14)
    got = float(omega_integrand(OmegaRate.subgaussian(1.0, 2), 0.01, 0.1))
    assert got == pytest.approx(4 * math.exp(-1), rel=1e-14)
    assert got == pytest.approx(1.4715177646857693, rel=1e-14)


def test_rate_validation():
    with pytest.raises(DomainError):
        OmegaRate.moment(1.5, 1.0)
    with pytest.raises(DomainError):
        OmegaRate.moment(2, 0.0)


def test_bound_decreases_in_delta():
    rate = OmegaRate.moment(4, 1.0)
    s = StepSchedule.harmonic()
    vals = [omega_bound(rate, s, 9.0, d) for d in (0.3, 0.5, 1.0, 3.0, 30.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-9


def test_bound_requires_k0():
    rate = OmegaRate.moment(4, 1.0)
    s = StepSchedule.harmonic()
    k0 = k0_index(rate, s, 0.5)
    assert float(s.gamma(k0)) <= 0.125 < float(s.gamma(k0 - 1))
    with pytest.raises(DomainError):
        omega_bound(rate, s, float(s.tau(k0)) - 0.01, 0.5)


@pytest.mark.parametrize("t", [3.0, 5.5])
def test_moment_bound_against_quadrature(t):
    table = oracles.harmonic_tau_table(2_000_000)
    ref = oracles.omega_quadrature(t, 0.5, 1.0, 4, table=table)
    got = omega_bound(OmegaRate.moment(4, 1.0), StepSchedule.harmonic(), t, 0.5)
    assert abs(got - ref) <= 1e-6 * ref


def direct_sum(rate, sched, t, delta, n_max):
    i = sched.index_at(t)
    g = float(sched.gamma(i + 1))
    total = (float(sched.tau(i + 1)) - t) * float(omega_integrand(rate, g, delta))
    g = np.arange(i + 2, n_max, dtype=float) ** -sched.alpha
    if rate.case == "moment":
        terms = g * rate.B * g ** (rate.q / 2) / delta ** rate.q
    else:
        terms = g * 2 * rate.d * np.exp(-rate.B * delta**2 / g)
    return total + math.fsum(terms)


def test_subgaussian_and_power_cases_against_direct_sums():
    s = StepSchedule.harmonic()
    rate = OmegaRate.subgaussian(1.0, 3)
    assert omega_bound(rate, s, 4.0, 0.5) == pytest.approx(direct_sum(rate, s, 4.0, 0.5, 20_000), rel=1e-12)
    p = StepSchedule.power(0.75)
    rate = OmegaRate.moment(3, 2.0)
    # tail beyond n_max is about n^(1 - 1.875) / 0.875
    got = omega_bound(rate, p, 60.0, 1.0)
    ref = direct_sum(rate, p, 60.0, 1.0, 400_000)
    tail = 2.0 * 400_000 ** (1 - 0.75 * 2.5) / (0.75 * 2.5 - 1)
    assert got == pytest.approx(ref + tail, rel=1e-4)


def test_divergent_custom_tail():
    s = StepSchedule("custom", fn=lambda n: n.astype(float) ** -0.5)
    with pytest.raises(DomainError):
        omega_bound(OmegaRate.moment(2, 1.0), s, 5000.0, 1.0)


# -- noise statistics ---------------------------------------------------------------------


def test_q_form_examples():
    g = Game.bimatrix(np.zeros((2, 2)), np.zeros((2, 2)))
    f = BestResponseField(g, Logit(1.0))
    x = MixedProfile.uniform((2, 2))
    zeta = np.array([1.0, -1.0, 0.0, 0.0]) / math.sqrt(2)
    assert q_form(f, x, zeta) == pytest.approx(0.5, abs=1e-15)
    assert q_form(f, x, np.zeros(4)) == 0.0
    assert zeta @ analytic_q(f, x) @ zeta == pytest.approx(0.5, abs=1e-15)


def test_analytic_q_quadratic_form_agrees(rng):
    f = BestResponseField(three_player_game(), Logit(0.6))
    for _ in range(20):
        x = MixedProfile.random(f.counts, rng)
        z = rng.normal(size=f.dim)
        assert z @ analytic_q(f, x) @ z == pytest.approx(q_form(f, x, z), rel=1e-12)


def test_analytic_q_positive_definite_on_tangent_space(rng):
    for f in (coord_field(0.5), BestResponseField(three_player_game(), Logit(0.4))):
        for _ in range(100):
            ev = tangent_spectrum(analytic_q(f, MixedProfile.random(f.counts, rng)), f.counts)
            assert ev.min() > 0 and ev.max() <= 2


def test_empirical_covariance_near_equilibrium():
    f = coord_field(0.5)
    _, rec = run_sfp(f.game, f, MixedProfile.uniform((2, 2)), 300_000, seed=21, record_noise=True)
    rep = noise_stats(rec, f.game, f.choices, buckets=4, bounds=(1e-4, 2.0))
    b = rep.at(np.array([0.98, 0.02, 0.98, 0.02]))
    assert b.count >= 100_000
    assert b.rel_deviation <= 0.10
    assert rep.within_bounds


def test_noise_stats_needs_samples():
    f = coord_field(0.5)
    _, rec = run_sfp(f.game, f, MixedProfile.uniform((2, 2)), 50, seed=1, record_noise=True)
    with pytest.raises(InsufficientSamplesError):
        noise_stats(rec, f.game, f.choices, min_count=100)


def test_noise_record_csv():
    rec = NoiseRecord(np.array([[0.5, -0.5]]), np.array([[0.25, 0.75]]))
    lines = rec.to_csv().splitlines()
    assert len(lines) == 2
