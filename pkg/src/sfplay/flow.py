"""Deterministic dynamics: RK4 flow, equilibria, stability and monotonicity."""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DivergenceError, DomainError, NonConvergenceError, PreconditionError
from .games import MixedProfile, tail_sums

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Chart:
    """Affine chart ``x = origin + lift @ z`` of an invariant affine subspace.

    ``reduce`` maps full coordinates of a tangent vector to chart coordinates.
    """

    origin: np.ndarray
    lift: np.ndarray
    reduce: np.ndarray

    def to_full(self, z):
        return self.origin + self.lift @ z

    def to_chart(self, x):
        return self.reduce @ x


def simplex_chart(counts: Sequence[int]) -> Chart:
    """Chart of the product of simplices obtained by dropping each block's last entry."""
    dim = sum(counts)
    red = dim - len(counts)
    lift = np.zeros((dim, red))
    reduce = np.zeros((red, dim))
    origin = np.zeros(dim)
    r = c = 0
    for m in counts:
        for j in range(m - 1):
            lift[r + j, c + j] = 1.0
            lift[r + m - 1, c + j] = -1.0
            reduce[c + j, r + j] = 1.0
        origin[r + m - 1] = 1.0
        r += m
        c += m - 1
    return Chart(origin, lift, reduce)


@dataclass(frozen=True)
class FieldHandle:
    """A vector field on R^d with optional Jacobian, projection and chart.

    ``batch``, when given, evaluates the field on every row of a ``(k, d)``
    array; it lets several states be integrated as one stacked system.
    """

    dim: int
    eval: Callable[[np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None
    chart: Optional[Chart] = None
    name: str = ""
    bound: float = 1e6
    batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return self.eval(x)

    def jacobian(self, x, fd_step: float = 1e-6) -> np.ndarray:
        if self.jac is not None:
            return np.asarray(self.jac(np.asarray(x, dtype=float)), dtype=float)
        return finite_difference_jacobian(self.eval, x, fd_step)


def linear_field(matrix) -> FieldHandle:
    """Handle of ``x' = A x``."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    return FieldHandle(dim=a.shape[0], eval=lambda x: a @ x, jac=lambda x: a, name="linear")


def finite_difference_jacobian(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class FlowOptions:
    step: float = 0.01
    method: str = "rk4"
    max_time: float = 1e4

    def __post_init__(self):
        if not 0 < self.step <= 0.1:
            raise DomainError(f"flow step must lie in (0, 0.1], got {self.step}")
        if self.method != "rk4":
            raise DomainError(f"unsupported integration method {self.method!r}")
        if not self.max_time > 0:
            raise DomainError("max_time must be positive")


def _rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _advance(F: FieldHandle, x, duration, h):
    n = int(np.floor(duration / h + 1e-9))
    rem = duration - n * h
    for _ in range(n):
        x = _rk4_step(F.eval, x, h)
    if rem > 1e-12 * max(1.0, duration):
        x = _rk4_step(F.eval, x, rem)
    if not np.all(np.isfinite(x)) or np.abs(x).max() > F.bound:
        raise DivergenceError(f"flow of {F.name or 'field'} left the bounding box")
    return x


def flow_path(F: FieldHandle, x0, times: Sequence[float], opts: FlowOptions | None = None,
              project: bool = True) -> np.ndarray:
    """States of the RK4 flow at each of the nondecreasing ``times``."""
    opts = opts or FlowOptions()
    times = np.asarray(times, dtype=float)
    if times.size and (times[0] < 0 or np.any(np.diff(times) < 0)):
        raise DomainError("flow times must be nonnegative and nondecreasing")
    if times.size and times[-1] > opts.max_time:
        raise DomainError(f"flow time {times[-1]} exceeds max_time {opts.max_time}")
    x = np.array(x0, dtype=float)
    if x.shape != (F.dim,):
        raise DomainError(f"initial state has shape {x.shape}, field dimension is {F.dim}")
    out = np.empty((times.size, F.dim))
    t = 0.0
    for k, target in enumerate(times):
        if target > t:
            x = _advance(F, x, target - t, opts.step)
            t = target
        out[k] = F.project(x) if (project and F.project is not None) else x
    return out


def flow(F: FieldHandle, x0, t: float, opts: FlowOptions | None = None, project: bool = True) -> np.ndarray:
    """RK4 approximation of the flow map at time ``t``."""
    if t < 0:
        raise DomainError("flow time must be nonnegative")
    if t == 0:
        return np.array(x0, dtype=float)
    return flow_path(F, x0, [t], opts, project)[0]


# ---------------------------------------------------------------------------
# equilibria


class Stability(str, enum.Enum):
    LINEARLY_UNSTABLE = "LinearlyUnstable"
    NOT_LINEARLY_UNSTABLE = "NotLinearlyUnstable"
    MARGINAL = "Marginal"


@dataclass(frozen=True)
class EquilibriumReport:
    point: np.ndarray
    residual: float
    eigenvalues: np.ndarray
    label: Stability
    eps_spec: float = 1e-6
    counts: Optional[tuple] = None

    @property
    def max_real(self) -> float:
        return float(np.max(self.eigenvalues.real)) if self.eigenvalues.size else -np.inf

    @property
    def profile(self) -> MixedProfile:
        if self.counts is None:
            raise DomainError("report does not describe a mixed profile")
        return MixedProfile.from_vector(self.point, self.counts, tol=1e-9)

    def to_dict(self) -> dict:
        return {
            "point": [float(v) for v in self.point],
            "residual": float(self.residual),
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "label": self.label.value,
            "eps_spec": self.eps_spec,
        }


def _label(eigs: np.ndarray, eps_spec: float) -> Stability:
    top = float(np.max(eigs.real)) if eigs.size else -np.inf
    if top > eps_spec:
        return Stability.LINEARLY_UNSTABLE
    if top >= -eps_spec:
        return Stability.MARGINAL
    return Stability.NOT_LINEARLY_UNSTABLE


def _as_handle(f):
    from .response import BestResponseField

    if isinstance(f, BestResponseField):
        return f.as_handle(), f.counts
    return f, None


def classify_stability(f, p, eps_spec: float = 1e-6, eq_tol: float = 1e-8) -> EquilibriumReport:
    """Linear stability of an equilibrium from the spectrum of DF on the chart.

    ``f`` is a ``BestResponseField`` or a ``FieldHandle``.  For handles with a
    chart the Jacobian is restricted to the chart's tangent space.
    """
    handle, counts = _as_handle(f)
    x = np.asarray(p.vector if isinstance(p, MixedProfile) else p, dtype=float)
    residual = float(np.max(np.abs(handle.eval(x)))) if x.size else 0.0
    if residual > eq_tol:
        raise PreconditionError(f"point is not an equilibrium (residual {residual:.3g} > {eq_tol:g})")
    jac = handle.jacobian(x)
    if handle.chart is not None:
        jac = handle.chart.reduce @ jac @ handle.chart.lift
    eigs = np.linalg.eigvals(jac)
    eigs = eigs[np.lexsort((eigs.imag, eigs.real))]
    return EquilibriumReport(x, residual, eigs, _label(eigs, eps_spec), eps_spec, counts)


def _residual(handle, x):
    return float(np.max(np.abs(handle.eval(x))))


def _newton(handle: FieldHandle, x, tol, max_iter=100):
    """Newton iteration on the chart with backtracking; keeps iterates feasible."""
    chart = handle.chart
    res = _residual(handle, x)
    for _ in range(max_iter):
        if res <= tol * 1e-3:
            break
        jac = chart.reduce @ handle.jacobian(x) @ chart.lift
        try:
            dz = np.linalg.solve(jac, -chart.reduce @ handle.eval(x))
        except np.linalg.LinAlgError:
            break
        dx = chart.lift @ dz
        alpha = 1.0
        for _ in range(40):
            cand = x + alpha * dx
            if np.all(cand >= 0.0):
                cres = _residual(handle, cand)
                if cres < res:
                    break
            alpha *= 0.5
        else:
            break
        x, res = cand, cres
    return x, res


def find_pne(f, x0, tol: float = 1e-10, max_iter: int = 10_000, damping: float = 0.5,
             method: str = "damped", eps_spec: float = 1e-6) -> EquilibriumReport:
    """Locate a fixed point of ``br`` and classify it.

    ``method="damped"`` runs ``x <- (1 - damping) x + damping br(x)`` until the
    residual ``max|br(x) - x|`` drops below ``tol`` and then polishes with
    Newton steps.  Damped iteration is repelled by linearly unstable fixed
    points; ``method="newton"`` starts Newton directly from ``x0`` and can
    reach them.
    """
    from .response import BestResponseField

    if not tol > 0:
        raise DomainError("tol must be positive")
    if not isinstance(f, BestResponseField):
        raise DomainError("find_pne needs a BestResponseField")
    handle = f.as_handle()
    x = np.array(x0.vector if isinstance(x0, MixedProfile) else x0, dtype=float)
    if method == "damped":
        res = np.inf
        for _ in range(max_iter):
            b = f.br_flat(x)
            res = float(np.max(np.abs(b - x)))
            if res <= tol:
                break
            x = (1.0 - damping) * x + damping * b
        else:
            raise NonConvergenceError(
                f"damped iteration did not reach tol {tol:g} in {max_iter} steps", x, res
            )
        x, res = _newton(handle, x, tol)
    elif method == "newton":
        x, res = _newton(handle, x, tol, max_iter=min(max_iter, 200))
        if res > tol:
            raise NonConvergenceError(f"Newton stopped at residual {res:.3g}", x, res)
    else:
        raise DomainError(f"unknown method {method!r}")
    x = handle.project(x)
    return classify_stability(f, x, eps_spec=eps_spec, eq_tol=max(tol, 1e-8))


class PneCatalog(list):
    """List of equilibrium reports; ``dropped`` counts failed starts."""

    dropped: int = 0


def _t_key(report: EquilibriumReport):
    return float(tail_sums(report.point, report.counts).sum())


def enumerate_pne(f, seeds: int = 20, tol: float = 1e-10, seed: int = 0,
                  max_iter: int = 10_000, eps_spec: float = 1e-6) -> PneCatalog:
    """Multistart search for all fixed points of ``br``.

    Starts from every pure profile and ``seeds`` uniform random profiles,
    each with both the damped and the Newton solver.  Points closer than
    ``10 * tol`` are merged.  The result is sorted by the total tail mass,
    a linear extension of the stochastic dominance order.
    """
    if seeds < 1:
        raise DomainError("seeds must be at least 1")
    rng = np.random.default_rng(seed)
    counts = f.counts
    starts = [MixedProfile.vertex(counts, a).vector
              for a in itertools.product(*(range(m) for m in counts))]
    starts += [MixedProfile.random(counts, rng).vector for _ in range(seeds)]
    found = PneCatalog()
    dropped = 0
    for x0 in starts:
        for method in ("damped", "newton"):
            try:
                rep = find_pne(f, x0, tol=tol, max_iter=max_iter, method=method, eps_spec=eps_spec)
            except NonConvergenceError:
                dropped += 1
                continue
            if all(np.max(np.abs(rep.point - r.point)) > 10 * tol for r in found):
                found.append(rep)
    found.sort(key=_t_key)
    found.dropped = dropped
    if dropped:
        log.debug("enumerate_pne: %d of %d starts did not converge", dropped, 2 * len(starts))
    return found


# ---------------------------------------------------------------------------
# cooperativity and monotonicity


@dataclass(frozen=True)
class CheckResult:
    ok: bool
    witness: Optional[dict] = None
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def check_cooperative_irreducible(F: FieldHandle, sample_points, tol: float = 1e-9) -> CheckResult:
    """Off-diagonal entries of DF are >= -tol and their support is strongly connected."""
    min_offdiag = np.inf
    for k, x in enumerate(sample_points):
        x = np.asarray(x.vector if isinstance(x, MixedProfile) else x, dtype=float)
        jac = F.jacobian(x)
        off = jac.copy()
        np.fill_diagonal(off, 0.0)
        if off.size > 1:
            mask = ~np.eye(jac.shape[0], dtype=bool)
            min_offdiag = min(min_offdiag, float(off[mask].min()))
        bad = np.argwhere((off < -tol) & ~np.eye(jac.shape[0], dtype=bool))
        if bad.size:
            i, j = (int(v) for v in bad[0])
            return CheckResult(False, {"point_index": k, "point": x.tolist(), "reason": "negative",
                                       "entry": [i, j], "value": float(jac[i, j])})
        adj = (np.abs(off) > tol).astype(int)
        ncomp, labels = connected_components(adj, directed=True, connection="strong")
        if ncomp > 1:
            return CheckResult(False, {"point_index": k, "point": x.tolist(), "reason": "reducible",
                                       "components": labels.tolist()})
    return CheckResult(True, None, {"min_offdiag": min_offdiag})


def check_strong_monotonicity(F: FieldHandle, x0, y0, times: Sequence[float],
                              order: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                              opts: FlowOptions | None = None, t_strict: float = 0.1,
                              margin: float = 1e-10) -> CheckResult:
    """Integrate both states and compare them in the given order coordinates.

    ``order`` maps a state to the coordinates compared componentwise
    (identity by default).  Requires ``x0 <= y0`` and ``x0 != y0``.  Passes
    when ``x(t) <= y(t)`` at every requested time and, for ``t >= t_strict``,
    every coordinate of ``y(t) - x(t)`` is at least ``margin``.
    """
    order = order or (lambda s: np.asarray(s))
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if np.array_equal(x0, y0):
        raise DomainError("strong monotonicity needs distinct initial states")
    if np.any(order(x0) > order(y0)):
        raise DomainError("initial states are not ordered")
    times = sorted(float(t) for t in times)
    if F.batch is not None:
        pair = stacked_handle(F, 2)
        both = flow_path(pair, np.concatenate([x0, y0]), times, opts).reshape(len(times), 2, F.dim)
        xs, ys = both[:, 0], both[:, 1]
    else:
        xs = flow_path(F, x0, times, opts)
        ys = flow_path(F, y0, times, opts)
    return compare_paths(times, xs, ys, order, t_strict, margin)


def compare_paths(times, xs, ys, order=None, t_strict: float = 0.1, margin: float = 1e-10) -> CheckResult:
    """Order check of two already integrated paths sampled at ``times``."""
    order = order or (lambda s: np.asarray(s))
    margins = {}
    ok = True
    witness = None
    for t, xt, yt in zip(times, xs, ys):
        gap = order(yt) - order(xt)
        margins[t] = float(gap.min())
        need = margin if t >= t_strict else 0.0
        if ok and gap.min() < need:
            ok = False
            witness = {"time": t, "coordinate": int(np.argmin(gap)), "gap": float(gap.min())}
    return CheckResult(ok, witness, {"margins": margins})


def stacked_handle(F: FieldHandle, k: int) -> FieldHandle:
    """The product system of ``k`` copies of ``F`` on a flat ``k * dim`` state."""
    d = F.dim
    project = None
    if F.project is not None:
        project = lambda z: np.concatenate([F.project(row) for row in z.reshape(k, d)])
    return FieldHandle(dim=k * d, eval=lambda z: F.batch(z.reshape(k, d)).reshape(-1),
                       project=project, name=F.name, bound=F.bound)


def tangent_basis(counts: Sequence[int]) -> np.ndarray:
    """Orthonormal basis (columns) of the tangent space of the product of simplices."""
    from scipy.linalg import null_space

    dim = sum(counts)
    cols = []
    off = 0
    for m in counts:
        basis = null_space(np.ones((1, m)))
        block = np.zeros((dim, m - 1))
        block[off:off + m] = basis
        cols.append(block)
        off += m
    return np.concatenate(cols, axis=1)
