"""Finite normal-form games, mixed profiles and the tail-sum order.

Players and actions are addressed by 0-based indices.  The total order on
each action set is the index order, so action ``k`` is "higher" than action
``k - 1``.

Mixed profiles are stored as one flat vector (the blocks of all players
concatenated); ``blocks`` splits it on demand.  Most numerical routines in
the package work on such flat vectors directly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, StructuralError

SIMPLEX_TOL = 1e-12
TIMAGE_TOL = 1e-12


def _offsets(counts: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(counts)]).astype(int)


def split_blocks(vec: np.ndarray, counts: Sequence[int]) -> list[np.ndarray]:
    """Split a flat vector into consecutive blocks of the given sizes."""
    off = _offsets(counts)
    return [vec[off[i]:off[i + 1]] for i in range(len(counts))]


def project_to_simplex(vec: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    """Clip negative entries and renormalize every block to sum to one."""
    out = np.clip(np.asarray(vec, dtype=float), 0.0, None)
    for b in split_blocks(out, counts):
        s = b.sum()
        if s <= 0.0 or not np.isfinite(s):
            raise DomainError("cannot project a block with no positive mass")
        b /= s
    return out


class Game:
    """An N-player game in normal form with dense payoff tensors.

    ``payoffs[i]`` is player ``i``'s tensor of shape ``action_counts``,
    indexed by the pure profile in player order.
    """

    def __init__(self, payoffs):
        arr = np.array(payoffs, dtype=float)
        if arr.ndim < 3:
            raise StructuralError("payoffs must have shape (N, m1, ..., mN) with N >= 2")
        n = arr.shape[0]
        if arr.ndim != n + 1:
            raise StructuralError(
                f"{n} payoff tensors need {n} action axes, got {arr.ndim - 1}"
            )
        if any(m < 2 for m in arr.shape[1:]):
            raise StructuralError("every player needs at least two actions")
        if not np.all(np.isfinite(arr)):
            raise DomainError("payoff entries must be finite")
        arr.flags.writeable = False
        self._payoffs = arr

    @classmethod
    def from_flat(cls, actions: Sequence[int], payoffs: Sequence[Sequence[float]]) -> "Game":
        """Build a game from per-player flat row-major payoff arrays."""
        actions = [int(m) for m in actions]
        if len(payoffs) != len(actions):
            raise StructuralError(
                f"expected {len(actions)} payoff arrays, got {len(payoffs)}"
            )
        size = math.prod(actions)
        tensors = []
        for i, flat in enumerate(payoffs):
            flat = np.asarray(flat, dtype=float)
            if flat.size != size:
                raise StructuralError(
                    f"payoff array of player {i} has {flat.size} entries, expected {size}"
                )
            tensors.append(flat.reshape(actions))
        return cls(np.stack(tensors))

    @classmethod
    def bimatrix(cls, a, b) -> "Game":
        """Two-player game; rows index player 0's actions in both matrices."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape or a.ndim != 2:
            raise StructuralError("bimatrix payoffs must be two matrices of equal shape")
        return cls(np.stack([a, b]))

    @property
    def payoffs(self) -> np.ndarray:
        return self._payoffs

    @property
    def num_players(self) -> int:
        return self._payoffs.shape[0]

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(int(m) for m in self._payoffs.shape[1:])

    @property
    def dimension(self) -> int:
        return sum(self.action_counts)

    def pure_profiles(self) -> Iterable[tuple[int, ...]]:
        return itertools.product(*(range(m) for m in self.action_counts))

    def __eq__(self, other):
        return isinstance(other, Game) and np.array_equal(self._payoffs, other._payoffs)

    def __hash__(self):
        return hash((self._payoffs.shape, self._payoffs.tobytes()))

    def __repr__(self):
        return f"Game(actions={list(self.action_counts)})"


def coordination_game(high: float = 2.0, low: float = 1.0) -> Game:
    """Symmetric 2x2 coordination game with u1 = u2^T = [[high, 0], [0, low]]."""
    u = np.array([[high, 0.0], [0.0, low]])
    return Game.bimatrix(u, u.T)


def matching_pennies() -> Game:
    u = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return Game.bimatrix(u, -u)


class MixedProfile:
    """A point of the product of simplices, one probability block per player.

    Blocks within ``SIMPLEX_TOL`` of the simplex are accepted and projected
    back onto it exactly; anything further away raises ``DomainError``.
    """

    __slots__ = ("_vec", "_counts")

    def __init__(self, blocks: Sequence[Sequence[float]], tol: float = SIMPLEX_TOL):
        blocks = [np.asarray(b, dtype=float).ravel() for b in blocks]
        counts = tuple(b.size for b in blocks)
        vec = np.concatenate(blocks) if blocks else np.zeros(0)
        self._init(vec, counts, tol)

    def _init(self, vec, counts, tol):
        if not counts:
            raise StructuralError("a profile needs at least one block")
        if not np.all(np.isfinite(vec)):
            raise DomainError("profile entries must be finite")
        for i, b in enumerate(split_blocks(vec, counts)):
            if b.size == 0:
                raise StructuralError(f"block {i} is empty")
            if b.min() < -tol or abs(b.sum() - 1.0) > tol:
                raise DomainError(
                    f"block {i} is not a probability vector (min={b.min():.3g}, sum={b.sum():.17g})"
                )
        vec = project_to_simplex(vec, counts)
        vec.flags.writeable = False
        self._vec = vec
        self._counts = counts

    @classmethod
    def from_vector(cls, vec, counts: Sequence[int], tol: float = SIMPLEX_TOL) -> "MixedProfile":
        vec = np.array(vec, dtype=float).ravel()
        counts = tuple(int(m) for m in counts)
        if vec.size != sum(counts):
            raise StructuralError(f"vector of size {vec.size} does not match blocks {counts}")
        obj = cls.__new__(cls)
        obj._init(vec, counts, tol)
        return obj

    @classmethod
    def uniform(cls, counts: Sequence[int]) -> "MixedProfile":
        return cls([np.full(m, 1.0 / m) for m in counts])

    @classmethod
    def vertex(cls, counts: Sequence[int], profile: Sequence[int]) -> "MixedProfile":
        """The pure profile in which player ``i`` plays ``profile[i]``."""
        if len(profile) != len(counts):
            raise StructuralError("pure profile length does not match number of players")
        blocks = []
        for m, a in zip(counts, profile):
            if not 0 <= a < m:
                raise StructuralError(f"action {a} out of range for {m} actions")
            b = np.zeros(m)
            b[a] = 1.0
            blocks.append(b)
        return cls(blocks)

    @classmethod
    def random(cls, counts: Sequence[int], rng: np.random.Generator) -> "MixedProfile":
        """Uniformly distributed point of the product of simplices."""
        return cls([rng.dirichlet(np.ones(m)) for m in counts])

    @property
    def vector(self) -> np.ndarray:
        return self._vec

    @property
    def action_counts(self) -> tuple[int, ...]:
        return self._counts

    @property
    def blocks(self) -> list[np.ndarray]:
        return split_blocks(self._vec, self._counts)

    @property
    def num_players(self) -> int:
        return len(self._counts)

    def is_vertex(self) -> bool:
        return all(np.count_nonzero(b) == 1 for b in self.blocks)

    def check_game(self, game: Game) -> None:
        if self._counts != game.action_counts:
            raise StructuralError(
                f"profile blocks {self._counts} do not match game actions {game.action_counts}"
            )

    def __eq__(self, other):
        return (
            isinstance(other, MixedProfile)
            and self._counts == other._counts
            and np.array_equal(self._vec, other._vec)
        )

    def __hash__(self):
        return hash((self._counts, self._vec.tobytes()))

    def __repr__(self):
        return f"MixedProfile({[b.tolist() for b in self.blocks]})"


class TImage:
    """Tail sums of a mixed profile; block ``i`` has ``m_i - 1`` entries."""

    __slots__ = ("_vec", "_counts")

    def __init__(self, blocks: Sequence[Sequence[float]], tol: float = TIMAGE_TOL):
        blocks = [np.asarray(b, dtype=float).ravel() for b in blocks]
        counts = tuple(b.size + 1 for b in blocks)
        vec = np.concatenate(blocks)
        self._init(vec, counts, tol)

    def _init(self, vec, counts, tol):
        if not np.all(np.isfinite(vec)):
            raise DomainError("T-image entries must be finite")
        for i, b in enumerate(split_blocks(vec, [m - 1 for m in counts])):
            if b.size == 0:
                raise StructuralError(f"block {i} is empty")
            if b.max() > 1.0 + tol or b.min() < -tol or np.any(np.diff(b) > tol):
                raise DomainError(
                    f"block {i} is not a non-increasing sequence in [0, 1]: {b.tolist()}"
                )
        vec = vec.copy()
        vec.flags.writeable = False
        self._vec = vec
        self._counts = counts

    @classmethod
    def from_vector(cls, vec, counts: Sequence[int], tol: float = TIMAGE_TOL) -> "TImage":
        """``counts`` are the action counts of the underlying game."""
        vec = np.array(vec, dtype=float).ravel()
        counts = tuple(int(m) for m in counts)
        if vec.size != sum(counts) - len(counts):
            raise StructuralError(f"vector of size {vec.size} does not match actions {counts}")
        obj = cls.__new__(cls)
        obj._init(vec, counts, tol)
        return obj

    @property
    def vector(self) -> np.ndarray:
        return self._vec

    @property
    def action_counts(self) -> tuple[int, ...]:
        return self._counts

    @property
    def blocks(self) -> list[np.ndarray]:
        return split_blocks(self._vec, [m - 1 for m in self._counts])

    def __repr__(self):
        return f"TImage({[b.tolist() for b in self.blocks]})"


# ---------------------------------------------------------------------------
# payoffs


def _contract_except(tensor: np.ndarray, blocks: Sequence[np.ndarray], keep: Sequence[int]) -> np.ndarray:
    """Contract ``tensor`` with every block whose axis is not in ``keep``.

    Axes are processed from last to first so earlier axis numbers stay valid.
    """
    out = tensor
    for j in range(len(blocks) - 1, -1, -1):
        if j in keep:
            continue
        out = np.tensordot(out, blocks[j], axes=([j], [0]))
    return out


def expected_payoff(game: Game, i: int, x: MixedProfile) -> float:
    """Expected payoff of player ``i`` when everybody mixes according to ``x``."""
    _check_player(game, i)
    x.check_game(game)
    return float(_contract_except(game.payoffs[i], x.blocks, keep=()))


def marginal_payoff_vector(game: Game, i: int, x_minus: Sequence[np.ndarray] | MixedProfile) -> np.ndarray:
    """Payoff of each pure action of player ``i`` against the opponents' mix.

    ``x_minus`` holds the N-1 opponent blocks in player order.  A full
    ``MixedProfile`` is also accepted, in which case block ``i`` is ignored.
    """
    _check_player(game, i)
    counts = game.action_counts
    if isinstance(x_minus, MixedProfile):
        x_minus.check_game(game)
        blocks = x_minus.blocks
    else:
        opp = [np.asarray(b, dtype=float) for b in x_minus]
        if len(opp) != game.num_players - 1:
            raise StructuralError(
                f"expected {game.num_players - 1} opponent blocks, got {len(opp)}"
            )
        blocks = opp[:i] + [np.ones(counts[i])] + opp[i:]
        for j, b in enumerate(blocks):
            if b.shape != (counts[j],):
                raise StructuralError(f"block for player {j} has shape {b.shape}, expected ({counts[j]},)")
    return _contract_except(game.payoffs[i], blocks, keep=(i,))


def _check_player(game: Game, i: int) -> None:
    if not 0 <= i < game.num_players:
        raise StructuralError(f"player index {i} out of range for {game.num_players} players")


# ---------------------------------------------------------------------------
# supermodularity


@dataclass(frozen=True)
class SupermodularityWitness:
    """A violation of increasing differences.

    Raising player ``player`` from ``lower`` to ``higher`` gains ``gain_low``
    when ``opponent`` plays ``opp_low`` but ``gain_high`` when the opponent
    plays ``opp_high > opp_low``; ``context`` fixes the remaining players.
    """

    player: int
    higher: int
    lower: int
    opponent: int
    opp_low: int
    opp_high: int
    context: dict
    gain_low: float
    gain_high: float

    def to_dict(self) -> dict:
        return {
            "player": self.player,
            "higher": self.higher,
            "lower": self.lower,
            "opponent": self.opponent,
            "opp_low": self.opp_low,
            "opp_high": self.opp_high,
            "context": {str(k): v for k, v in self.context.items()},
            "gain_low": self.gain_low,
            "gain_high": self.gain_high,
        }


@dataclass(frozen=True)
class SupermodularityResult:
    supermodular: bool
    strict: bool
    witness: SupermodularityWitness | None = None
    near_ties: list = field(default_factory=list)

    def __bool__(self):
        return self.supermodular


def _difference_tensors(game: Game):
    """Yield (i, j, D) with D the cross difference of u_i along axes i and j.

    ``D[..., a_i, ..., a_j, ...]`` equals
    u_i(a_i+1, a_j+1) - u_i(a_i, a_j+1) - u_i(a_i+1, a_j) + u_i(a_i, a_j).
    """
    for i in range(game.num_players):
        gain = np.diff(game.payoffs[i], axis=i)
        for j in range(game.num_players):
            if j != i:
                yield i, j, np.diff(gain, axis=j)


def is_supermodular(game: Game, strict: bool = False, margin: float = 0.0,
                    tie_tol: float = 1e-9) -> SupermodularityResult:
    """Check increasing differences for every player/opponent pair.

    Increasing differences on consecutive actions imply them for every pair
    of actions, so only adjacent cross differences are inspected.  With
    ``strict`` every cross difference must exceed ``margin``; otherwise it
    must be at least ``-margin``.  In strict mode cross differences in
    ``(margin, margin + tie_tol * scale]`` are reported as near ties.
    """
    scale = max(1.0, float(np.abs(game.payoffs).max()))
    near_ties = []
    for i, j, d in _difference_tensors(game):
        bad = d <= margin if strict else d < -margin
        if np.any(bad):
            idx = tuple(int(k) for k in np.argwhere(bad)[0])
            return SupermodularityResult(False, strict, _witness(game, i, j, idx))
        if strict:
            for idx in np.argwhere(d <= margin + tie_tol * scale):
                near_ties.append((i, j, tuple(int(k) for k in idx), float(d[tuple(idx)])))
    return SupermodularityResult(True, strict, None, near_ties)


def _witness(game: Game, i: int, j: int, idx: tuple[int, ...]) -> SupermodularityWitness:
    u = game.payoffs[i]
    lo = list(idx)
    context = {k: lo[k] for k in range(game.num_players) if k not in (i, j)}

    def gain(aj):
        hi_prof = list(lo)
        hi_prof[i] = idx[i] + 1
        hi_prof[j] = aj
        lo_prof = list(lo)
        lo_prof[j] = aj
        return float(u[tuple(hi_prof)] - u[tuple(lo_prof)])

    return SupermodularityWitness(
        player=i, higher=idx[i] + 1, lower=idx[i], opponent=j,
        opp_low=idx[j], opp_high=idx[j] + 1, context=context,
        gain_low=gain(idx[j]), gain_high=gain(idx[j] + 1),
    )


# ---------------------------------------------------------------------------
# tail-sum operator


def t_matrix(counts: Sequence[int]) -> np.ndarray:
    """Matrix of the linear tail-sum map from profile to T-coordinates."""
    rows = sum(counts) - len(counts)
    mat = np.zeros((rows, sum(counts)))
    r = c = 0
    for m in counts:
        for j in range(m - 1):
            mat[r + j, c + j + 1:c + m] = 1.0
        r += m - 1
        c += m
    return mat


def t_inverse_affine(counts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(c, M)`` with ``x = c + M v`` inverting the tail-sum map."""
    cols = sum(counts) - len(counts)
    mat = np.zeros((sum(counts), cols))
    const = np.zeros(sum(counts))
    r = c = 0
    for m in counts:
        const[r] = 1.0
        for j in range(m - 1):
            # x_j = v_{j-1} - v_j with v_{-1} = 1, x_{m-1} = v_{m-2}
            mat[r + j, c + j] -= 1.0
            mat[r + j + 1, c + j] += 1.0
        r += m
        c += m - 1
    return const, mat


def tail_sums(vec: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    """Flat-vector form of ``t_operator`` without validation."""
    out = []
    for b in split_blocks(np.asarray(vec, dtype=float), counts):
        out.append(np.cumsum(b[::-1])[::-1][1:])
    return np.concatenate(out)


def tail_differences(vec: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    """Flat-vector form of ``t_inverse`` without validation."""
    out = []
    for v in split_blocks(np.asarray(vec, dtype=float), [m - 1 for m in counts]):
        out.append(-np.diff(np.concatenate([[1.0], v, [0.0]])))
    return np.concatenate(out)


def t_operator(x: MixedProfile) -> TImage:
    """Per-player tail sums: entry ``j`` of block ``i`` is the mass on actions above ``j``."""
    v = np.clip(tail_sums(x.vector, x.action_counts), 0.0, 1.0)
    return TImage.from_vector(v, x.action_counts)


def t_inverse(v: TImage) -> MixedProfile:
    return MixedProfile.from_vector(tail_differences(v.vector, v.action_counts), v.action_counts)


def t_leq(x: MixedProfile, y: MixedProfile) -> bool:
    """First-order stochastic dominance order: ``T(x) <= T(y)`` componentwise."""
    if x.action_counts != y.action_counts:
        raise StructuralError("profiles have different block shapes")
    return bool(np.all(tail_sums(x.vector, x.action_counts) <= tail_sums(y.vector, y.action_counts)))
