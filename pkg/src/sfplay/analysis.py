"""Monte-Carlo experiments on stochastic fictitious play.

A run's limit is judged from the last ``window`` stored states: if their
diameter (max-norm) is at most ``tol`` the run has settled, and it is
``converged`` when the final state is within ``10 * tol`` of a catalogued
equilibrium, ``stalled`` otherwise.  Unsettled runs are ``undecided``.
"""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, ExperimentError, PreconditionError
from .flow import (
    EquilibriumReport,
    FlowOptions,
    Stability,
    check_strong_monotonicity,
    compare_paths,
    enumerate_pne,
    flow_path,
    stacked_handle,
    tangent_basis,
)
from .games import Game, MixedProfile, is_supermodular, project_to_simplex, tail_sums
from .response import BestResponseField
from .stochastic import StepSchedule, Trajectory, apt_distance, make_rng, run_sfp


class Verdict(str, enum.Enum):
    CONVERGED = "ConvergedTo"
    STALLED = "Stalled"
    UNDECIDED = "Undecided"
    ERROR = "Error"


@dataclass
class RunVerdict:
    verdict: Verdict
    final_state: Optional[np.ndarray]
    diameter: float = math.nan
    pne_index: Optional[int] = None
    distance: float = math.nan
    apt_samples: Optional[list] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"verdict": self.verdict.value, "diameter": _num(self.diameter),
             "pne_index": self.pne_index, "distance": _num(self.distance),
             "final_state": None if self.final_state is None else [float(v) for v in self.final_state]}
        if self.apt_samples is not None:
            d["apt_samples"] = [[float(t), float(v)] for t, v in self.apt_samples]
        if self.error is not None:
            d["error"] = self.error
        return d


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def window_diameter(states: np.ndarray) -> float:
    """Largest max-norm distance between two rows (the spread of the bounding box)."""
    return float(np.max(states.max(axis=0) - states.min(axis=0)))


def detect_limit(traj: Trajectory, catalog: Sequence[EquilibriumReport], W: int, tol: float) -> RunVerdict:
    if not catalog:
        raise DomainError("equilibrium catalog is empty")
    if len(traj) < 2 * W:
        raise PreconditionError(f"trajectory has {len(traj)} states, need at least {2 * W}")
    diam = window_diameter(traj.states[-W:])
    final = traj.states[-1]
    dists = [float(np.max(np.abs(final - r.point))) for r in catalog]
    k = int(np.argmin(dists))
    if diam > tol:
        return RunVerdict(Verdict.UNDECIDED, final, diam, k, dists[k])
    if dists[k] <= 10 * tol:
        return RunVerdict(Verdict.CONVERGED, final, diam, k, dists[k])
    return RunVerdict(Verdict.STALLED, final, diam, k, dists[k])


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval for ``k`` successes in ``n`` trials."""
    a = 1 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


@dataclass
class ExperimentConfig:
    game: Game
    choices: Sequence
    runs: int = 100
    steps: int = 10**6
    seed: int = 0
    window: int = 1000
    tol_conv: float = 1e-2
    catalog: Optional[list] = None
    start: Optional[MixedProfile] = None
    start_index: int = 1000
    stride: int = 1000
    jobs: int = 1
    force: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise DomainError("runs must be at least 1")
        if self.window < 10:
            raise DomainError("window must be at least 10")
        if not self.tol_conv > 0:
            raise DomainError("tol_conv must be positive")

    @property
    def field(self) -> BestResponseField:
        return BestResponseField(self.game, self.choices)

    def resolved_catalog(self) -> list:
        if self.catalog is None:
            self.catalog = list(enumerate_pne(self.field))
        return self.catalog

    def to_dict(self) -> dict:
        return {
            "actions": list(self.game.action_counts),
            "choices": [c.to_dict() for c in self.field.choices],
            "runs": self.runs, "steps": self.steps, "seed": self.seed,
            "window": self.window, "tol_conv": self.tol_conv,
            "start": None if self.start is None else [b.tolist() for b in self.start.blocks],
            "start_index": self.start_index, "stride": self.stride,
        }


def _require_supermodular(cfg: ExperimentConfig):
    if not cfg.force and not is_supermodular(cfg.game, strict=True):
        raise PreconditionError("game is not strictly supermodular (pass force=True to override)")


def _one_run(job) -> RunVerdict:
    cfg, seed, start, catalog = job
    try:
        traj, _ = run_sfp(cfg.game, cfg.choices, start, cfg.steps, seed=seed,
                          start_index=cfg.start_index, stride=cfg.stride, keep_last=2 * cfg.window)
        return detect_limit(traj, catalog, cfg.window, cfg.tol_conv)
    except Exception as exc:  # a failing run is recorded, not fatal
        return RunVerdict(Verdict.ERROR, None, error=f"{type(exc).__name__}: {exc}")


def _run_all(cfg: ExperimentConfig, jobs: list) -> list:
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_one_run, jobs, chunksize=max(1, len(jobs) // (4 * cfg.jobs))))
    return [_one_run(j) for j in jobs]


@dataclass
class ConvergenceReport:
    config: dict
    catalog: list
    verdicts: list
    wall_clock: float = 0.0

    @property
    def runs(self) -> int:
        return len(self.verdicts)

    def counts(self) -> dict:
        out = {v.value: 0 for v in Verdict}
        for r in self.verdicts:
            out[r.verdict.value] += 1
        return out

    def basin_counts(self) -> list:
        out = [0] * len(self.catalog)
        for r in self.verdicts:
            if r.verdict is Verdict.CONVERGED:
                out[r.pne_index] += 1
        return out

    def converged_with(self, label: Stability) -> int:
        return sum(c for c, rep in zip(self.basin_counts(), self.catalog) if rep.label is label)

    @property
    def fraction_stable(self) -> float:
        return self.converged_with(Stability.NOT_LINEARLY_UNSTABLE) / self.runs

    @property
    def fraction_unstable(self) -> float:
        return self.converged_with(Stability.LINEARLY_UNSTABLE) / self.runs

    def aggregate(self) -> dict:
        n = self.runs
        k_s = self.converged_with(Stability.NOT_LINEARLY_UNSTABLE)
        k_u = self.converged_with(Stability.LINEARLY_UNSTABLE)
        return {
            "runs": n,
            "verdicts": self.counts(),
            "basins": [{"index": i, "label": rep.label.value, "point": [float(v) for v in rep.point],
                        "count": c, "frequency": c / n}
                       for i, (c, rep) in enumerate(zip(self.basin_counts(), self.catalog))],
            "fraction_stable": k_s / n,
            "fraction_stable_ci95": list(clopper_pearson(k_s, n)),
            "fraction_unstable": k_u / n,
            "fraction_unstable_ci95": list(clopper_pearson(k_u, n)),
        }

    def to_dict(self) -> dict:
        return {"config": self.config, "catalog": [r.to_dict() for r in self.catalog],
                "verdicts": [v.to_dict() for v in self.verdicts], "aggregate": self.aggregate()}

    def basins_csv(self) -> str:
        lines = ["index,label,count,frequency"]
        for b in self.aggregate()["basins"]:
            lines.append(f"{b['index']},{b['label']},{b['count']},{format(b['frequency'], '.17g')}")
        return "\n".join(lines) + "\n"


def _check_errors(verdicts, runs):
    failed = sum(v.verdict is Verdict.ERROR for v in verdicts)
    if failed > 0.1 * runs:
        first = next(v.error for v in verdicts if v.verdict is Verdict.ERROR)
        raise ExperimentError(f"{failed} of {runs} runs failed; first error: {first}")


def convergence_experiment(cfg: ExperimentConfig) -> ConvergenceReport:
    """Independent SFP runs from ``cfg.start`` (uniform by default), classified against the catalog."""
    _require_supermodular(cfg)
    catalog = cfg.resolved_catalog()
    start = cfg.start or MixedProfile.uniform(cfg.game.action_counts)
    jobs = [(cfg, (cfg.seed, r), start, catalog) for r in range(cfg.runs)]
    t0 = time.perf_counter()
    verdicts = _run_all(cfg, jobs)
    _check_errors(verdicts, cfg.runs)
    return ConvergenceReport(cfg.to_dict(), catalog, verdicts, time.perf_counter() - t0)


@dataclass
class NonconvergenceReport:
    config: dict
    target: EquilibriumReport
    target_index: int
    start_radius: float
    verdicts: list
    wall_clock: float = 0.0

    @property
    def hits(self) -> int:
        return sum(v.verdict is Verdict.CONVERGED and v.pne_index == self.target_index
                   for v in self.verdicts)

    @property
    def fraction(self) -> float:
        return self.hits / len(self.verdicts)

    @property
    def upper95(self) -> float:
        return clopper_pearson(self.hits, len(self.verdicts))[1]

    def to_dict(self) -> dict:
        n = len(self.verdicts)
        counts = {v.value: 0 for v in Verdict}
        for r in self.verdicts:
            counts[r.verdict.value] += 1
        return {"config": self.config, "target": self.target.to_dict(),
                "start_radius": self.start_radius,
                "verdicts": [v.to_dict() for v in self.verdicts],
                "aggregate": {"runs": n, "verdicts": counts, "hits": self.hits,
                              "fraction": self.fraction,
                              "fraction_ci95": list(clopper_pearson(self.hits, n))}}


def perturbed_start(target: np.ndarray, counts, radius: float, rng) -> MixedProfile:
    """Uniform point of the tangent ball of ``radius`` around ``target``, projected to the simplex."""
    basis = tangent_basis(counts)
    d = basis.shape[1]
    direction = basis @ rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    r = radius * rng.random() ** (1.0 / d)
    return MixedProfile.from_vector(project_to_simplex(target + r * direction, counts), counts)


def nonconvergence_experiment(cfg: ExperimentConfig, target: EquilibriumReport,
                              start_radius: float) -> NonconvergenceReport:
    """SFP runs started next to a linearly unstable equilibrium; counts runs converging to it."""
    if target.label is not Stability.LINEARLY_UNSTABLE:
        raise PreconditionError(f"target is {target.label.value}, not LinearlyUnstable")
    if start_radius < 0:
        raise DomainError("start_radius must be nonnegative")
    catalog = cfg.resolved_catalog()
    dists = [float(np.max(np.abs(r.point - target.point))) for r in catalog]
    idx = int(np.argmin(dists))
    if dists[idx] > 1e-6:
        catalog = catalog + [target]
        cfg.catalog = catalog
        idx = len(catalog) - 1
    counts = cfg.game.action_counts
    jobs = []
    for r in range(cfg.runs):
        start = perturbed_start(target.point, counts, start_radius, make_rng((cfg.seed, r, 1)))
        jobs.append((cfg, (cfg.seed, r), start, catalog))
    t0 = time.perf_counter()
    verdicts = _run_all(cfg, jobs)
    _check_errors(verdicts, cfg.runs)
    out = cfg.to_dict()
    out["start"] = "perturbed-target"
    return NonconvergenceReport(out, target, idx, start_radius, verdicts, time.perf_counter() - t0)


@dataclass
class OrderReport:
    pairs: int
    preserved: int
    times: tuple
    min_margins: dict
    failures: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.preserved / self.pairs

    def to_dict(self) -> dict:
        return {"pairs": self.pairs, "preserved": self.preserved, "rate": self.rate,
                "times": list(self.times),
                "min_margins": {format(t, "g"): m for t, m in self.min_margins.items()},
                "failures": self.failures}


def sample_ordered_pair(counts, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct tail-sum vectors ``v <= w`` (componentwise min/max of two random images)."""
    while True:
        a = tail_sums(MixedProfile.random(counts, rng).vector, counts)
        b = tail_sums(MixedProfile.random(counts, rng).vector, counts)
        v, w = np.minimum(a, b), np.maximum(a, b)
        if not np.array_equal(v, w):
            return v, w


def compare_pair(f: BestResponseField, v, w, times=(1.0, 5.0, 10.0), opts: FlowOptions | None = None):
    """Strong-monotonicity check of the conjugate dynamic for an ordered pair in either orientation."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.all(w <= v):
        v, w = w, v
    return check_strong_monotonicity(f.conjugate_handle(), v, w, times, opts=opts)


def order_experiment(cfg: ExperimentConfig, pairs: int = 50, times=(1.0, 5.0, 10.0)) -> OrderReport:
    """Sample ordered pairs and check that the conjugate flow keeps them strictly ordered."""
    _require_supermodular(cfg)
    f = cfg.field
    rng = make_rng((cfg.seed, 2))
    times = tuple(sorted(float(t) for t in times))
    preserved = 0
    margins = {t: math.inf for t in times}
    failures = []
    samples = [sample_ordered_pair(f.counts, rng) for _ in range(pairs)]
    handle = f.conjugate_handle()
    # every pair is integrated at once as one product system
    starts = np.concatenate([np.concatenate(vw) for vw in samples])
    paths = flow_path(stacked_handle(handle, 2 * pairs), starts, times)
    paths = paths.reshape(len(times), pairs, 2, handle.dim)
    for k in range(pairs):
        res = compare_paths(times, paths[:, k, 0], paths[:, k, 1])
        preserved += res.ok
        for t, m in res.details["margins"].items():
            margins[t] = min(margins[t], m)
        if not res.ok:
            failures.append({"pair": k, **res.witness})
    return OrderReport(pairs, preserved, times, margins, failures)


def apt_decay(game: Game, choices, x0: MixedProfile, at: Sequence[int] = (10**3, 10**4, 10**5),
              seeds: int = 30, horizon: float = 1.0, base_seed: int = 0) -> np.ndarray:
    """``d_X(tau_n, horizon)`` for each ``n`` in ``at`` and each seed; shape ``(seeds, len(at))``.

    Runs are stored densely so interpolation reproduces the affine process.
    """
    f = BestResponseField(game, choices)
    handle = f.as_handle()
    sched = StepSchedule.harmonic()
    start_n = 1 if x0.is_vertex() else 1000
    t_last = float(sched.tau(max(at))) + horizon
    n_end = sched.index_at(t_last) + 2
    out = np.empty((seeds, len(at)))
    for s in range(seeds):
        traj, _ = run_sfp(game, f, x0, n_end - start_n, seed=(base_seed, s),
                          start_index=start_n, stride=1, keep_last=0)
        for j, n in enumerate(at):
            out[s, j] = apt_distance(traj, handle, float(sched.tau(n)), horizon)
    return out


def with_catalog(cfg: ExperimentConfig, catalog: list) -> ExperimentConfig:
    return replace(cfg, catalog=list(catalog))
