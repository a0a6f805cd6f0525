"""Stochastic approximation processes and their pseudo-trajectory metrics.

Three simulators share the ``Trajectory`` container:

* ``run_robbins_monro``: ``x_{n+1} = x_n + gamma_{n+1} (F(x_n) + U_{n+1})``;
* ``run_sfp``: stochastic fictitious play, i.e. the recursion above with
  ``gamma_n = 1/n``, ``F = br - id`` and ``U_{n+1} = delta_{a_{n+1}} - br(x_n)``;
* ``run_diffusion``: Euler-Maruyama for ``dX = F(X) dt + sqrt(gamma(t)) dB``.

Discrete processes are time-stamped with ``tau_n = gamma_1 + ... + gamma_n``
so that linear interpolation of the stored knots gives the affine
interpolated process.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .errors import (
    DivergenceError,
    DomainError,
    InsufficientSamplesError,
    StructuralError,
    TimeRangeError,
)
from .flow import FieldHandle, FlowOptions, flow_path, tangent_basis
from .games import Game, MixedProfile, split_blocks, t_matrix
from .response import BestResponseField, Logit

EULER_GAMMA = 0.5772156649015329
MEMORY_BUDGET = 64 * 2**20
CHUNK = 1 << 16


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by ``seed`` (int or int tuple)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# ---------------------------------------------------------------------------
# step sizes


class StepSchedule:
    """Step sizes ``gamma_n`` (n >= 1), their sums ``tau_n`` and ``gamma_bar(t)``.

    ``kind`` is ``"harmonic"`` (1/n), ``"power"`` (n**-alpha with alpha in
    (0.5, 1]) or ``"custom"`` (``fn`` maps an integer array to step sizes).
    """

    def __init__(self, kind: str = "harmonic", alpha: float = 1.0,
                 fn: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        if kind == "power" and alpha == 1.0:
            kind = "harmonic"
        if kind == "power" and not 0.5 < alpha <= 1.0:
            raise DomainError(f"power-law exponent must lie in (0.5, 1], got {alpha}")
        if kind == "custom" and fn is None:
            raise DomainError("custom schedule needs a step function")
        if kind not in ("harmonic", "power", "custom"):
            raise DomainError(f"unknown schedule kind {kind!r}")
        self.kind = kind
        self.alpha = 1.0 if kind == "harmonic" else float(alpha)
        self.fn = fn
        self._tau = np.zeros(1)
        if kind == "custom":
            self._check_custom()

    @classmethod
    def harmonic(cls) -> "StepSchedule":
        return cls("harmonic")

    @classmethod
    def power(cls, alpha: float) -> "StepSchedule":
        return cls("power", alpha)

    def _check_custom(self):
        n = np.arange(1, 200_001)
        g = self.gamma(n)
        if not np.all(g > 0) or np.any(np.diff(g) > 0):
            raise DomainError("custom step sizes must be positive and nonincreasing")
        # the sum of gamma over [K, 10K] must not shrink like a convergent series
        s1 = g[1999:19999].sum()
        s2 = g[19999:199999].sum()
        if s2 < 0.999 * s1:
            raise DomainError("custom step sizes look summable; the step sum must diverge")

    def gamma(self, n):
        n = np.asarray(n)
        if np.any(n < 1):
            raise DomainError("step indices start at 1")
        if self.kind == "custom":
            return np.asarray(self.fn(n), dtype=float)
        return np.power(n.astype(float), -self.alpha)

    def _extend(self, n_max: int):
        have = self._tau.size - 1
        if n_max <= have:
            return
        new = max(n_max, 2 * have, 1024)
        steps = self.gamma(np.arange(have + 1, new + 1))
        self._tau = np.concatenate([self._tau, self._tau[-1] + np.cumsum(steps)])

    def tau(self, n):
        """``tau_n``; ``tau_0 = 0``."""
        n = np.asarray(n)
        if self.kind == "harmonic":
            return np.where(n == 0, 0.0, special.digamma(n + 1.0) + EULER_GAMMA)
        self._extend(int(np.max(n)))
        return self._tau[n]

    def index_at(self, t: float) -> int:
        """The ``i`` with ``tau_i <= t < tau_{i+1}``."""
        if t < 0:
            raise DomainError("time must be nonnegative")
        if self.kind == "harmonic":
            i = max(int(math.exp(t - EULER_GAMMA)) - 1, 0)
            while float(self.tau(i + 1)) <= t:
                i += 1
            while i > 0 and float(self.tau(i)) > t:
                i -= 1
            return i
        while self._tau[-1] <= t:
            self._extend(2 * self._tau.size)
        return int(np.searchsorted(self._tau, t, side="right") - 1)

    def gamma_bar(self, t: float) -> float:
        return float(self.gamma(self.index_at(t) + 1))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "power":
            d["alpha"] = self.alpha
        return d


# ---------------------------------------------------------------------------
# containers


@dataclass
class Trajectory:
    """Time-stamped states of a simulated process.

    ``index`` holds the iteration number of each stored state for discrete
    processes (``None`` for diffusions).
    """

    times: np.ndarray
    states: np.ndarray
    meta: dict = field(default_factory=dict)
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] != self.times.size:
            raise StructuralError("times and states have different lengths")
        if np.any(np.diff(self.times) <= 0):
            raise StructuralError("trajectory times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise DivergenceError("trajectory contains non-finite states")

    def __len__(self):
        return self.times.size

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self) -> str:
        """CSV text with header ``t,x_0,...`` and 17 significant digits."""
        buf = io.StringIO()
        d = self.states.shape[1]
        buf.write(",".join(["t"] + [f"x_{k}" for k in range(d)]) + "\n")
        for t, row in zip(self.times, self.states):
            buf.write(",".join(format(v, ".17g") for v in (t, *row)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: Optional[dict] = None) -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "t":
            raise StructuralError("trajectory CSV must start with a 't,x_0,...' header")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        if data.size == 0:
            raise StructuralError("trajectory CSV has no rows")
        return cls(data[:, 0], data[:, 1:], meta or {})


@dataclass
class NoiseRecord:
    """Increments ``U_{n+1}`` with the states ``x_n`` they were drawn at."""

    increments: np.ndarray
    conditioning_states: np.ndarray
    actions: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.increments.shape != self.conditioning_states.shape:
            raise StructuralError("increments and conditioning states differ in shape")

    def to_csv(self) -> str:
        buf = io.StringIO()
        d = self.increments.shape[1]
        buf.write(",".join([f"x_{k}" for k in range(d)] + [f"u_{k}" for k in range(d)]) + "\n")
        for x, u in zip(self.conditioning_states, self.increments):
            buf.write(",".join(format(v, ".17g") for v in (*x, *u)) + "\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# noise generators for Robbins-Monro runs


def zero_noise(x, rng):
    return np.zeros_like(x)


def gaussian_noise(scale: float = 1.0):
    def noise(x, rng):
        return scale * rng.standard_normal(x.shape)
    return noise


def uniform_noise(half_width: float = 1.0):
    def noise(x, rng):
        return rng.uniform(-half_width, half_width, x.shape)
    return noise


def _auto_stride(n_steps: int, dim: int, keep_last: int) -> int:
    per_state = 8 * (dim + 2)
    budget = max(MEMORY_BUDGET // per_state - keep_last, 1)
    return max(1, math.ceil(n_steps / budget))


def run_robbins_monro(F: FieldHandle, x0, noise, sched: StepSchedule, n_steps: int, seed=0,
                      stride: int = 1, record_noise: bool = True):
    """Iterate the Robbins-Monro recursion; returns ``(Trajectory, NoiseRecord)``.

    ``noise(x, rng)`` must return a conditionally mean-zero increment.
    Every ``stride``-th iterate is stored, plus the last one.
    """
    rng = make_rng(seed)
    x = np.array(x0, dtype=float)
    if x.shape != (F.dim,):
        raise StructuralError(f"initial state has shape {x.shape}, field dimension is {F.dim}")
    gammas = sched.gamma(np.arange(1, n_steps + 1)) if n_steps else np.zeros(0)
    keep = [0]
    states = [x.copy()]
    incs = np.empty((n_steps if record_noise else 0, F.dim))
    conds = np.empty_like(incs)
    for n in range(n_steps):
        u = np.asarray(noise(x, rng), dtype=float)
        if record_noise:
            incs[n] = u
            conds[n] = x
        x = x + gammas[n] * (F.eval(x) + u)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > F.bound:
            raise DivergenceError(f"Robbins-Monro iterate diverged at step {n + 1}", step=n + 1)
        if (n + 1) % stride == 0 or n + 1 == n_steps:
            keep.append(n + 1)
            states.append(x.copy())
    idx = np.array(keep)
    meta = {"process": "robbins-monro", "schedule": sched.to_dict(), "seed": _seed_json(seed),
            "field": F.name, "steps": n_steps, "stride": stride}
    traj = Trajectory(sched.tau(idx), np.array(states), meta, idx)
    return traj, NoiseRecord(incs, conds)


def _seed_json(seed):
    return list(seed) if isinstance(seed, (tuple, list)) else seed


def _start_counts(x0: MixedProfile, n0: int) -> np.ndarray:
    """Integer play counts summing to ``n0`` per block, closest to ``n0 * x0``."""
    out = []
    for b in x0.blocks:
        raw = b * n0
        c = np.floor(raw).astype(np.int64)
        short = n0 - int(c.sum())
        if short:
            order = np.argsort(-(raw - c), kind="stable")
            c[order[:short]] += 1
        out.append(c)
    return np.concatenate(out)


def run_sfp(game: Game, choices, x0: MixedProfile, n_steps: int, seed=0,
            start_index: Optional[int] = None, stride: Optional[int] = None,
            keep_last: int = 10_000, record_noise: bool = False, use_kernel: bool = True):
    """Simulate stochastic fictitious play; returns ``(Trajectory, NoiseRecord | None)``.

    The state after ``n`` plays is the empirical action frequency ``counts / n``.
    A pure ``x0`` is the first play (``n = 1``); any other ``x0`` is realised
    as a synthetic history of ``start_index`` plays (default 1000) whose
    frequencies are the nearest achievable to ``x0``.

    Actions are drawn by inverse CDF on ``br`` from a Philox stream keyed by
    ``seed``; uniform number ``k * N + i`` belongs to step ``k``, player ``i``.
    States are stored every ``stride`` plays (chosen to fit a 64 MB budget
    when ``None``) and at each of the last ``keep_last`` plays.
    """
    field_ = choices if isinstance(choices, BestResponseField) else BestResponseField(game, choices)
    x0.check_game(game)
    if start_index is None:
        start_index = 1 if x0.is_vertex() else 1000
    if start_index < 1:
        raise DomainError("start_index must be at least 1")
    dim = game.dimension
    if stride is None:
        stride = _auto_stride(n_steps, dim, keep_last)
    if stride < 1:
        raise DomainError("stride must be at least 1")
    counts = _start_counts(x0, start_index)
    n0 = start_index
    n_end = n0 + n_steps
    dense_from = max(n_steps - keep_last + 1, 1)
    steps = np.arange(1, n_steps + 1)
    n_store = 1 + int(np.count_nonzero((steps % stride == 0) | (steps >= dense_from) | (steps == n_steps)))
    states = np.empty((n_store, dim))
    index = np.empty(n_store, dtype=np.int64)
    states[0] = counts / n0
    index[0] = n0
    rec_rows = n_steps if record_noise else 0
    noise = np.empty((rec_rows, dim))
    cond = np.empty((rec_rows, dim))
    actions = np.empty((rec_rows, game.num_players), dtype=np.int64)

    rng = make_rng(seed)
    n, pos, rec = n0, 1, 0
    if use_kernel and field_.all_logit:
        from ._kernels import sfp_logit_chunk

        digits = np.array(list(game.pure_profiles()), dtype=np.int64)
        payoffs = game.payoffs.reshape(game.num_players, -1).copy()
        offsets = np.concatenate([[0], np.cumsum(game.action_counts)]).astype(np.int64)
        inv_eta = np.array([1.0 / c.eta for c in field_.choices])
        done = 0
        while done < n_steps:
            k = min(CHUNK, n_steps - done)
            u = rng.random((k, game.num_players))
            n, pos, rec = sfp_logit_chunk(payoffs, digits, offsets, inv_eta, counts, n, u,
                                          n0, stride, dense_from, n_end, states, index, pos,
                                          noise, cond, actions, rec)
            done += k
    else:
        offsets = np.concatenate([[0], np.cumsum(game.action_counts)])
        done = 0
        while done < n_steps:
            k = min(CHUNK, n_steps - done)
            u = rng.random((k, game.num_players))
            for row in u:
                x = counts / n
                br = field_.br_flat(x)
                acts = []
                for i in range(game.num_players):
                    lo, hi = offsets[i], offsets[i + 1]
                    cdf = np.cumsum(br[lo:hi])
                    hit = np.nonzero(row[i] < cdf)[0]
                    acts.append(int(hit[0]) if hit.size else hi - lo - 1)
                if record_noise:
                    actions[rec] = acts
                    cond[rec] = x
                    noise[rec] = -br
                for i, a in enumerate(acts):
                    counts[offsets[i] + a] += 1
                    if record_noise:
                        noise[rec, offsets[i] + a] += 1.0
                rec += int(record_noise)
                n += 1
                step = n - n0
                if step % stride == 0 or step >= dense_from or n == n_end:
                    states[pos] = counts / n
                    index[pos] = n
                    pos += 1
            done += k
    assert pos == n_store
    meta = {
        "process": "sfp",
        "seed": _seed_json(seed),
        "steps": n_steps,
        "start_index": n0,
        "stride": stride,
        "keep_last": keep_last,
        "choices": [c.to_dict() for c in field_.choices],
        "counts": counts.tolist(),
    }
    traj = Trajectory(StepSchedule.harmonic().tau(index), states, meta, index)
    rec_out = NoiseRecord(noise, cond, actions) if record_noise else None
    return traj, rec_out


def run_diffusion(F: FieldHandle, x0, rate: float, t_end: float, dt: float = 0.01, seed=0,
                  gamma0: float = 1.0, stride: int = 1) -> Trajectory:
    """Euler-Maruyama for ``dX = F(X) dt + sqrt(gamma(t)) dB`` with ``gamma(t) = gamma0 exp(-rate t)``."""
    if not 0 < dt <= 0.01:
        raise DomainError(f"dt must lie in (0, 0.01], got {dt}")
    if not rate > 0:
        raise DomainError("decay rate must be positive")
    rng = make_rng(seed)
    x = np.array(x0, dtype=float)
    if x.shape != (F.dim,):
        raise StructuralError(f"initial state has shape {x.shape}, field dimension is {F.dim}")
    n_steps = int(round(t_end / dt))
    times = [0.0]
    states = [x.copy()]
    for k in range(n_steps):
        t = k * dt
        g = gamma0 * math.exp(-rate * t)
        x = x + F.eval(x) * dt + math.sqrt(g * dt) * rng.standard_normal(F.dim)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > F.bound:
            raise DivergenceError(f"diffusion diverged at step {k + 1}", step=k + 1)
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            times.append((k + 1) * dt)
            states.append(x.copy())
    meta = {"process": "diffusion", "rate": rate, "gamma0": gamma0, "dt": dt,
            "seed": _seed_json(seed), "field": F.name}
    return Trajectory(np.array(times), np.array(states), meta)


# ---------------------------------------------------------------------------
# interpolation and shadowing


def interpolate(traj: Trajectory, t):
    """Piecewise-affine interpolation of the stored knots at time(s) ``t``."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = traj.times[0], traj.times[-1]
    if np.any(t_arr < lo) or np.any(t_arr > hi):
        raise TimeRangeError(f"time outside recorded range [{lo}, {hi}]")
    if len(traj) == 1:
        out = np.repeat(traj.states[:1], t_arr.size, axis=0)
    else:
        i = np.clip(np.searchsorted(traj.times, t_arr, side="right") - 1, 0, len(traj) - 2)
        t0 = traj.times[i]
        t1 = traj.times[i + 1]
        s = ((t_arr - t0) / (t1 - t0))[:, None]
        out = traj.states[i] + s * (traj.states[i + 1] - traj.states[i])
        exact = t_arr == t0
        out[exact] = traj.states[i[exact]]
    return out[0] if np.ndim(t) == 0 else out


def apt_distance(traj: Trajectory, F: FieldHandle, t: float, T_horizon: float,
                 opts: FlowOptions | None = None) -> float:
    """``sup_{0<=h<=T} max|X(t+h) - Phi_h(X(t))|`` on a grid of spacing ``min(0.01, step)``."""
    opts = opts or FlowOptions()
    if T_horizon < 0:
        raise DomainError("horizon must be nonnegative")
    if t < traj.times[0] or t + T_horizon > traj.times[-1]:
        raise TimeRangeError(
            f"window [{t}, {t + T_horizon}] outside recorded range [{traj.times[0]}, {traj.times[-1]}]"
        )
    h = min(0.01, opts.step)
    n = int(np.floor(T_horizon / h + 1e-9))
    offsets = np.arange(n + 1) * h
    if T_horizon - offsets[-1] > 1e-12:
        offsets = np.append(offsets, T_horizon)
    start = interpolate(traj, t)
    ref = flow_path(F, start, offsets, FlowOptions(step=h, max_time=max(opts.max_time, T_horizon)))
    path = interpolate(traj, np.minimum(t + offsets, traj.times[-1]))
    return float(np.max(np.abs(path - ref)))


# ---------------------------------------------------------------------------
# omega rates


@dataclass(frozen=True)
class OmegaRate:
    """Deviation-probability rate: ``moment`` (q, B) or ``subgaussian`` (B, d)."""

    case: str
    B: float
    q: float = 2.0
    d: int = 1

    def __post_init__(self):
        if self.case not in ("moment", "subgaussian"):
            raise DomainError(f"unknown rate case {self.case!r}")
        if not self.B > 0:
            raise DomainError("B must be positive")
        if self.case == "moment" and self.q < 2:
            raise DomainError("moment order q must be at least 2")
        if self.case == "subgaussian" and self.d < 1:
            raise DomainError("dimension d must be positive")

    @classmethod
    def moment(cls, q: float, B: float) -> "OmegaRate":
        return cls("moment", B, q=q)

    @classmethod
    def subgaussian(cls, B: float, d: int) -> "OmegaRate":
        return cls("subgaussian", B, d=d)


def omega_integrand(rate: OmegaRate, gamma_bar, delta: float):
    """``r(s, delta, T)`` as a function of the current step ``gamma_bar(s)``."""
    g = np.asarray(gamma_bar, dtype=float)
    if rate.case == "moment":
        return rate.B * g ** (rate.q / 2) / delta ** rate.q
    return 2 * rate.d * np.exp(-rate.B * delta**2 / g)


def k0_index(rate: OmegaRate, sched: StepSchedule, delta: float, limit: int = 10**9) -> int:
    """First ``k`` with ``gamma_k <= B delta^2 / 2``."""
    thresh = rate.B * delta**2 / 2
    if sched.kind != "custom":
        k = max(1, math.ceil(thresh ** (-1.0 / sched.alpha)) - 2)
        while float(sched.gamma(k)) > thresh:
            k += 1
        while k > 1 and float(sched.gamma(k - 1)) <= thresh:
            k -= 1
        return k
    start = 1
    while start < limit:
        g = sched.gamma(np.arange(start, start + CHUNK))
        hit = np.nonzero(g <= thresh)[0]
        if hit.size:
            return start + int(hit[0])
        start += CHUNK
    raise DomainError("step sizes never fall below B delta^2 / 2")


def _series_tail(fn, start: int, rel: float = 1e-17, limit: int = 10**9) -> float:
    """Sum ``fn(k)`` over ``k >= start`` for a positive, eventually decreasing summand.

    Terms are summed in blocks ``[k, 2k)``.  Summation stops once the last
    term is negligible; if the block sums stop shrinking the series is
    declared divergent (a ``k**-1`` tail keeps them constant).
    """
    total = 0.0
    k = start
    prev = None
    piece = 1 << 22
    while k < limit:
        end = min(max(2 * k, k + 1024), limit)
        block = 0.0
        last = 0.0
        for lo in range(k, end, piece):
            terms = fn(np.arange(lo, min(lo + piece, end)))
            block += float(terms.sum())
            last = float(terms[-1])
        total += block
        if last <= rel * total or last == 0.0:
            return total
        if prev is not None and k >= 1 << 16 and block >= 0.99 * prev:
            raise DomainError("tail series diverges: block sums do not decrease")
        prev = block
        k = end
    raise DomainError("tail series did not converge")


def omega_bound(rate: OmegaRate, sched: StepSchedule, t: float, delta: float,
                T_horizon: float = 1.0, check_k0: bool = True) -> float:
    """``omega(t, delta, T) = integral over [t, inf) of r(s, delta, T) ds``.

    ``gamma_bar`` is constant (= ``gamma_{i+1}``) on ``[tau_i, tau_{i+1})``,
    so the integral is a partial first piece plus a series.  For the moment
    case with harmonic or power-law steps the series is a Hurwitz zeta
    value; otherwise it is summed until the terms are negligible.  The rate
    does not depend on ``T_horizon``; it is accepted for interface symmetry.
    """
    if not delta > 0:
        raise DomainError("delta must be positive")
    if t < 0:
        raise DomainError("t must be nonnegative")
    if check_k0:
        k0 = k0_index(rate, sched, delta)
        if t < float(sched.tau(k0)):
            raise DomainError(f"t = {t} is before tau_k0 = {float(sched.tau(k0))} (k0 = {k0})")
    i = sched.index_at(t)
    g_next = float(sched.gamma(i + 1))
    head = (float(sched.tau(i + 1)) - t) * float(omega_integrand(rate, g_next, delta))
    first = i + 2
    if rate.case == "moment" and sched.kind != "custom":
        expo = sched.alpha * (1 + rate.q / 2)
        if expo <= 1:
            raise DomainError("tail series diverges for this schedule and moment order")
        tail = rate.B / delta**rate.q * float(special.zeta(expo, first))
    else:
        def term(k):
            g = sched.gamma(k)
            return g * omega_integrand(rate, g, delta)
        tail = _series_tail(term, first)
    return head + tail


# ---------------------------------------------------------------------------
# noise statistics


def analytic_q(f: BestResponseField, x) -> np.ndarray:
    """Conditional covariance of the SFP noise at ``x``: block-diagonal ``diag(p) - p p^T``."""
    vec = x.vector if isinstance(x, MixedProfile) else np.asarray(x, dtype=float)
    br = f.br_flat(vec)
    return _q_from_br(br[None, :], f.counts)[0]


def _q_from_br(br: np.ndarray, counts) -> np.ndarray:
    dim = br.shape[1]
    q = np.zeros((br.shape[0], dim, dim))
    off = 0
    for m in counts:
        p = br[:, off:off + m]
        blk = -p[:, :, None] * p[:, None, :]
        idx = np.arange(m)
        blk[:, idx, idx] += p
        q[:, off:off + m, off:off + m] = blk
        off += m
    return q


def q_form(f: BestResponseField, x, zeta) -> float:
    """``Q(x)(zeta) = sum_i sum_a <delta_a - br_i, zeta_i>^2 br_i(a)``."""
    vec = x.vector if isinstance(x, MixedProfile) else np.asarray(x, dtype=float)
    br = f.br_flat(vec)
    total = 0.0
    for p, z in zip(split_blocks(br, f.counts), split_blocks(np.asarray(zeta, dtype=float), f.counts)):
        for a in range(p.size):
            total += (z[a] - p @ z) ** 2 * p[a]
    return float(total)


@dataclass
class BucketStats:
    cell: tuple
    count: int
    center: np.ndarray
    q_empirical: np.ndarray
    q_analytic: np.ndarray
    rel_deviation: float
    empirical_range: tuple
    analytic_range: tuple
    mean_increment: np.ndarray
    std_increment: np.ndarray


@dataclass
class NoiseStatsReport:
    buckets: list
    skipped: int
    bounds: Optional[tuple] = None
    counts: tuple = ()
    cells: int = 4

    @property
    def max_rel_deviation(self) -> float:
        return max(b.rel_deviation for b in self.buckets)

    @property
    def densest(self) -> BucketStats:
        return max(self.buckets, key=lambda b: b.count)

    def at(self, point) -> BucketStats:
        """The bucket whose grid cell contains ``point``."""
        cell = tuple(int(c) for c in bucket_codes(np.atleast_2d(point), self.counts, self.cells)[0])
        for b in self.buckets:
            if b.cell == cell:
                return b
        raise InsufficientSamplesError(f"cell {cell} holds too few increments")

    @property
    def spectral_range(self) -> tuple:
        return (min(b.empirical_range[0] for b in self.buckets),
                max(b.empirical_range[1] for b in self.buckets))

    @property
    def within_bounds(self) -> Optional[bool]:
        if self.bounds is None:
            return None
        lo, hi = self.spectral_range
        return self.bounds[0] <= lo and hi <= self.bounds[1]


def bucket_codes(states: np.ndarray, counts, buckets: int) -> np.ndarray:
    """Grid cell of each state over its tail-sum coordinates."""
    cells = min(int(buckets), 8)
    if cells < 1:
        raise DomainError("buckets must be positive")
    v = states @ t_matrix(counts).T
    return np.clip(np.floor(v * cells), 0, cells - 1).astype(np.int64)


def noise_stats(rec: NoiseRecord, game: Game, choices, buckets: int = 4, min_count: int = 100,
                bounds: Optional[tuple] = None) -> NoiseStatsReport:
    """Compare empirical and analytic noise covariance per conditioning bucket.

    Buckets with fewer than ``min_count`` increments are skipped; if none is
    left ``InsufficientSamplesError`` is raised.  The analytic covariance of a
    bucket is the average of ``Q(x_n)`` over its conditioning states.
    """
    f = choices if isinstance(choices, BestResponseField) else BestResponseField(game, choices)
    u = rec.increments
    x = rec.conditioning_states
    if u.shape[1] != game.dimension:
        raise StructuralError("noise record does not match the game")
    codes = bucket_codes(x, f.counts, buckets)
    keys, inverse, sizes = np.unique(codes, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    basis = tangent_basis(f.counts)
    out = []
    skipped = 0
    for b, key in enumerate(keys):
        if sizes[b] < min_count:
            skipped += 1
            continue
        sel = inverse == b
        ub = u[sel]
        xb = x[sel]
        q_emp = ub.T @ ub / ub.shape[0]
        q_ana = np.zeros_like(q_emp)
        for lo in range(0, xb.shape[0], CHUNK):
            q_ana += _q_from_br(f.br_batch(xb[lo:lo + CHUNK]), f.counts).sum(axis=0)
        q_ana /= xb.shape[0]
        dev = float(np.linalg.norm(q_emp - q_ana) / np.linalg.norm(q_ana))
        ev_e = np.linalg.eigvalsh(basis.T @ q_emp @ basis)
        ev_a = np.linalg.eigvalsh(basis.T @ q_ana @ basis)
        out.append(BucketStats(
            tuple(int(c) for c in key), int(sizes[b]), xb.mean(axis=0), q_emp, q_ana, dev,
            (float(ev_e[0]), float(ev_e[-1])), (float(ev_a[0]), float(ev_a[-1])),
            ub.mean(axis=0), ub.std(axis=0),
        ))
    if not out:
        raise InsufficientSamplesError(f"no bucket holds at least {min_count} increments")
    return NoiseStatsReport(out, skipped, bounds, tuple(f.counts), min(int(buckets), 8))


def martingale_check(report: NoiseStatsReport, k: float = 4.0) -> bool:
    """Every bucket mean of the increments lies within ``k`` standard errors of zero."""
    for b in report.buckets:
        se = k * b.std_increment / math.sqrt(b.count)
        if np.any(np.abs(b.mean_increment) > se + 1e-15):
            return False
    return True


def tangent_spectrum(q: np.ndarray, counts) -> np.ndarray:
    """Eigenvalues of a symmetric matrix restricted to the tangent space of the simplices."""
    basis = tangent_basis(counts)
    return np.linalg.eigvalsh(basis.T @ q @ basis)


def logit_choices(game: Game, eta: float) -> list:
    return [Logit(eta)] * game.num_players
