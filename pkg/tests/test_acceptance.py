"""Acceptance checks; each prints one PASS/FAIL line (collected again in the terminal summary)."""

import contextlib
import json
import math

import numpy as np
import pytest

from sfplay.analysis import (
    ExperimentConfig,
    apt_decay,
    clopper_pearson,
    convergence_experiment,
    nonconvergence_experiment,
    order_experiment,
)
from sfplay.flow import (
    FlowOptions,
    Stability,
    check_cooperative_irreducible,
    enumerate_pne,
    finite_difference_jacobian,
    flow,
    linear_field,
)
from sfplay.games import MixedProfile, coordination_game, t_inverse, t_matrix, t_operator
from sfplay.response import BestResponseField, Logit
from sfplay.stochastic import (
    OmegaRate,
    StepSchedule,
    analytic_q,
    gaussian_noise,
    noise_stats,
    omega_bound,
    run_diffusion,
    run_robbins_monro,
    run_sfp,
    tangent_spectrum,
)

import oracles
from conftest import supermodular_fields

pytestmark = pytest.mark.slow


@contextlib.contextmanager
def criterion(record, label):
    """Record PASS when the block finishes, FAIL with the reason otherwise."""
    notes = []
    try:
        yield notes
    except BaseException as exc:
        reason = " ".join(str(exc).split())[:300]
        record(f"{label}: FAIL ({'; '.join(notes + [reason])})")
        raise
    record(f"{label}: PASS ({'; '.join(notes)})")


def coord_field(eta):
    return BestResponseField(coordination_game(), Logit(eta))


def test_sfp_converges_to_stable_equilibrium(acceptance_line):
    with criterion(acceptance_line, "criterion 1 (SFP convergence, eta=0.5)") as notes:
        cfg = ExperimentConfig(coordination_game(), [Logit(0.5)] * 2, runs=200, steps=10**6, seed=0,
                               tol_conv=1e-2)
        rep = convergence_experiment(cfg)
        lo, hi = clopper_pearson(rep.converged_with(Stability.NOT_LINEARLY_UNSTABLE), rep.runs)
        notes.append(f"stable fraction {rep.fraction_stable:.3f} (95% CI [{lo:.3f}, {hi:.3f}])")
        notes.append(f"verdicts {rep.counts()}; {rep.wall_clock:.0f}s on one core")
        assert rep.fraction_stable >= 0.95


def test_nonconvergence_to_unstable_equilibrium(acceptance_line):
    with criterion(acceptance_line, "criterion 2 (non-convergence, eta=0.5 as stated)") as notes:
        f = coord_field(0.5)
        cat = enumerate_pne(f)
        roots = oracles.symmetric_roots(0.5)
        notes.append(f"catalog has {len(cat)} equilibrium, oracle roots {[round(p, 7) for p in roots]}")
        unstable = [r for r in cat if r.label is Stability.LINEARLY_UNSTABLE]
        assert unstable, ("no LinearlyUnstable equilibrium exists at eta=0.5: p = sigma((3p-2)/eta) "
                          "has a single root, the three-root regime ends near eta=0.32")
        cfg = ExperimentConfig(f.game, f.choices, runs=500, steps=10**6, seed=0, catalog=list(cat))
        rep = nonconvergence_experiment(cfg, unstable[0], 1e-3)
        notes.append(f"hits {rep.hits}/500, upper95 {rep.upper95:.4f}")
        assert rep.fraction <= 0.01


def test_nonconvergence_in_three_equilibrium_regime(acceptance_line):
    with criterion(acceptance_line, "criterion 2 companion (non-convergence, eta=0.2)") as notes:
        f = coord_field(0.2)
        cat = enumerate_pne(f)
        target = cat[1]
        assert target.label is Stability.LINEARLY_UNSTABLE
        cfg = ExperimentConfig(f.game, f.choices, runs=500, steps=10**6, seed=0, catalog=list(cat))
        rep = nonconvergence_experiment(cfg, target, 1e-3)
        notes.append(f"hits {rep.hits}/500 = {rep.fraction:.4f}, Clopper-Pearson upper95 {rep.upper95:.4f}")
        notes.append(f"{rep.wall_clock:.0f}s on one core")
        assert rep.fraction <= 0.01


def test_catalog_matches_bisection_oracle(acceptance_line):
    with criterion(acceptance_line, "criterion 3 (PNE catalog vs bisection oracle)") as notes:
        for eta in (0.2, 0.5, 1.0, 10.0):
            cat = enumerate_pne(coord_field(eta))
            roots = oracles.symmetric_roots(eta)
            err = max(np.max(np.abs(r.point - np.array([1 - p, p, 1 - p, p]))) for r, p in zip(cat, roots))
            notes.append(f"eta={eta}: {len(cat)} vs {len(roots)} roots, max err {err:.1e}")
            assert len(cat) == len(roots)
            assert err <= 1e-8
        assert len(oracles.symmetric_roots(0.2)) == 3 and len(oracles.symmetric_roots(10.0)) == 1


def test_conjugate_flow_is_strongly_monotone(acceptance_line):
    with criterion(acceptance_line, "criterion 4 (order preservation and cooperativity)") as notes:
        rng = np.random.default_rng(2024)
        for name, f in supermodular_fields():
            rep = order_experiment(ExperimentConfig(f.game, f.choices, seed=0), pairs=50, times=(1, 5, 10))
            notes.append(f"{name}: {rep.preserved}/50, min margin {min(rep.min_margins.values()):.1e}")
            assert rep.rate == 1.0, rep.failures
            assert all(m > 0 for m in rep.min_margins.values())
            tm = t_matrix(f.counts)
            pts = [tm @ MixedProfile.random(f.counts, rng).vector for _ in range(1000)]
            res = check_cooperative_irreducible(f.conjugate_handle(), pts, tol=1e-9)
            assert res.ok, res.witness
            assert res.details["min_offdiag"] >= -1e-9


def test_equilibria_are_trapped_between_extremes(acceptance_line):
    with criterion(acceptance_line, "criterion 5 (interval trapping)") as notes:
        for name, f in supermodular_fields():
            cat = enumerate_pne(f)
            tails = [t_matrix(f.counts) @ r.point for r in cat]
            low, high = tails[0], tails[-1]
            worst = max(max(np.max(low - t), np.max(t - high)) for t in tails)
            notes.append(f"{name}: {len(cat)} PNE, worst excess {worst:.1e}")
            assert worst <= 1e-8


def test_noise_covariance(acceptance_line):
    with criterion(acceptance_line, "criterion 6 (noise covariance)") as notes:
        f = coord_field(0.5)
        pne = enumerate_pne(f)[0]
        _, rec = run_sfp(f.game, f, MixedProfile.uniform((2, 2)), 10**6, seed=0, record_noise=True)
        rep = noise_stats(rec, f.game, f.choices, buckets=4)
        b = rep.at(pne.point)
        notes.append(f"{b.count} increments in the equilibrium bucket, relative deviation {b.rel_deviation:.4f}")
        assert b.count >= 10**5
        assert b.rel_deviation <= 0.10
        rng = np.random.default_rng(6)
        smallest = min(tangent_spectrum(analytic_q(f, MixedProfile.random(f.counts, rng)), f.counts).min()
                       for _ in range(100))
        notes.append(f"min tangent eigenvalue over 100 points {smallest:.3e}")
        assert smallest > 0


def test_shadowing_distance_decays(acceptance_line):
    with criterion(acceptance_line, "criterion 7 (APT decay)") as notes:
        f = coord_field(0.5)
        d = apt_decay(f.game, f.choices, MixedProfile.uniform((2, 2)), at=(10**3, 10**4, 10**5), seeds=30)
        med = np.median(d, axis=0)
        notes.append("medians " + ", ".join(f"{m:.2e}" for m in med))
        assert np.all(np.diff(med) <= 0)
        assert med[-1] <= 0.02


def test_numerical_hygiene(acceptance_line):
    with criterion(acceptance_line, "criterion 8 (numerical hygiene)") as notes:
        x = flow(linear_field([[-1.0]]), np.array([1.0]), 1.0, FlowOptions(step=0.01))
        notes.append(f"RK4 error {abs(x[0] - math.exp(-1)):.1e}")
        assert abs(x[0] - math.exp(-1)) <= 1e-8

        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(100):
            pi = rng.normal(size=3) * 2
            eta = rng.uniform(0.1, 3.0)
            fd = finite_difference_jacobian(lambda z: Logit(eta)(z), pi, 1e-6)
            worst = max(worst, np.max(np.abs(Logit(eta).jacobian(pi) - fd)))
        for _, f in supermodular_fields():
            for _ in range(25):
                y = MixedProfile.random(f.counts, rng).vector
                worst = max(worst, np.max(np.abs(f.jacobian_flat(y) - finite_difference_jacobian(f.field_flat, y))))
        notes.append(f"Jacobian vs finite differences {worst:.1e}")
        assert worst <= 1e-5

        trip = max(np.max(np.abs(t_inverse(t_operator(p)).vector - p.vector))
                   for p in (MixedProfile.random((3, 4, 2), rng) for _ in range(1000)))
        notes.append(f"T round trip {trip:.1e}")
        assert trip <= 1e-12

        f = coord_field(0.5)
        x0 = MixedProfile.uniform((2, 2))

        def outputs():
            sfp, rec = run_sfp(f.game, f, x0, 10**5, seed=(5, 1), record_noise=True)
            rm, rrec = run_robbins_monro(f.as_handle(), x0.vector, gaussian_noise(0.1),
                                         StepSchedule.harmonic(), 10**4, seed=5)
            dif = run_diffusion(f.as_handle(), x0.vector, 1.0, 3.0, seed=5)
            exp = convergence_experiment(ExperimentConfig(f.game, f.choices, runs=3, steps=20_000, seed=5))
            return [sfp.to_csv(), rec.to_csv(), rm.to_csv(), rrec.to_csv(), dif.to_csv(),
                    json.dumps(exp.to_dict())]

        assert outputs() == outputs()
        notes.append("SFP, Robbins-Monro, diffusion and experiment outputs byte-identical")


def test_omega_bound_against_quadrature(acceptance_line):
    with criterion(acceptance_line, "criterion 9 (omega bound vs quadrature)") as notes:
        table = oracles.harmonic_tau_table(3_000_000)
        rate = OmegaRate.moment(4, 1.0)
        for t in (3.0, 5.5, 7.25):
            got = omega_bound(rate, StepSchedule.harmonic(), t, 0.5)
            ref = oracles.omega_quadrature(t, 0.5, 1.0, 4, table=table)
            rel = abs(got - ref) / ref
            notes.append(f"t={t}: rel err {rel:.1e}")
            assert rel <= 1e-6
