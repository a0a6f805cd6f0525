"""Smooth choice functions and the perturbed best-response vector field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DomainError, StructuralError
from .games import (
    Game,
    MixedProfile,
    TImage,
    _contract_except,
    project_to_simplex,
    split_blocks,
    t_inverse_affine,
    t_matrix,
)


_TINY = np.finfo(float).tiny


def logit(pi, eta: float) -> np.ndarray:
    """Softmax of ``pi / eta`` with max subtraction (safe for tiny ``eta``).

    Weights that underflow are floored at the smallest normal double so the
    result stays strictly positive.
    """
    if not eta > 0 or not np.isfinite(eta):
        raise DomainError(f"logit temperature must be positive, got {eta!r}")
    pi = np.asarray(pi, dtype=float)
    if not np.all(np.isfinite(pi)):
        raise DomainError("logit payoffs must be finite")
    z = (pi - pi.max()) / eta
    w = np.maximum(np.exp(z), _TINY)
    return w / w.sum()


def logit_jacobian(p: np.ndarray, eta: float) -> np.ndarray:
    """Derivative of the logit map, given its output ``p``."""
    return (np.diag(p) - np.outer(p, p)) / eta


@dataclass(frozen=True)
class Logit:
    eta: float

    def __post_init__(self):
        if not (self.eta > 0 and np.isfinite(self.eta)):
            raise DomainError(f"logit temperature must be positive, got {self.eta!r}")

    def __call__(self, pi):
        return logit(pi, self.eta)

    def jacobian(self, pi) -> np.ndarray:
        return logit_jacobian(logit(pi, self.eta), self.eta)

    def to_dict(self) -> dict:
        return {"kind": "logit", "eta": self.eta}


@dataclass(frozen=True)
class CustomChoice:
    """A user supplied choice map ``R^m -> interior of the simplex``.

    ``jac`` is optional; without it Jacobian based routines fall back to
    finite differences where they can and refuse otherwise.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, pi):
        p = np.asarray(self.fn(np.asarray(pi, dtype=float)), dtype=float)
        if p.shape != np.shape(pi):
            raise ContractViolation(f"choice {self.name!r} returned shape {p.shape}")
        if not np.all(p > 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractViolation(
                f"choice {self.name!r} must return an interior simplex point, got {p.tolist()}"
            )
        return p

    def jacobian(self, pi) -> np.ndarray:
        if self.jac is None:
            raise ContractViolation(f"choice {self.name!r} has no Jacobian")
        return np.asarray(self.jac(np.asarray(pi, dtype=float)), dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "custom", "name": self.name}


ChoiceSpec = Logit | CustomChoice

# Custom choice maps addressable from JSON by name.
CHOICE_REGISTRY: dict[str, CustomChoice] = {}


def register_choice(choice: CustomChoice) -> CustomChoice:
    CHOICE_REGISTRY[choice.name] = choice
    return choice


def choice_from_dict(d: dict) -> ChoiceSpec:
    kind = d.get("kind")
    if kind == "logit":
        return Logit(float(d["eta"]))
    if kind == "custom":
        try:
            return CHOICE_REGISTRY[d["name"]]
        except KeyError:
            raise DomainError(f"unknown custom choice {d.get('name')!r}") from None
    raise DomainError(f"unknown choice kind {kind!r}")


class BestResponseField:
    """The perturbed best response ``br`` of a game and the field ``br(x) - x``.

    All ``*_flat`` methods take and return flat vectors in full coordinates;
    the others take ``MixedProfile``/``TImage`` values.
    """

    def __init__(self, game: Game, choices: Sequence[ChoiceSpec] | ChoiceSpec):
        if isinstance(choices, (Logit, CustomChoice)):
            choices = [choices] * game.num_players
        choices = tuple(choices)
        if len(choices) != game.num_players:
            raise StructuralError(
                f"need one choice spec per player ({game.num_players}), got {len(choices)}"
            )
        self.game = game
        self.choices = choices
        self.counts = game.action_counts
        self.dim = game.dimension
        self._tmat = t_matrix(self.counts)
        self._tinv_c, self._tinv_m = t_inverse_affine(self.counts)
        # player i's tensor with its own axis first; the opponents' axes
        # follow in player order and are contracted last-to-first by matmul
        self._own_first = [np.ascontiguousarray(np.moveaxis(game.payoffs[i], i, 0))
                           for i in range(game.num_players)]
        self._offsets = np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def all_logit(self) -> bool:
        return all(isinstance(c, Logit) for c in self.choices)

    # -- full coordinates -------------------------------------------------

    def payoff_vectors(self, vec: np.ndarray) -> list[np.ndarray]:
        vec = np.asarray(vec, dtype=float)
        off = self._offsets
        n = len(self.counts)
        out = []
        for i, t in enumerate(self._own_first):
            for j in range(n - 1, -1, -1):
                if j != i:
                    t = t @ vec[off[j]:off[j + 1]]
            out.append(t)
        return out

    def br_flat(self, vec: np.ndarray) -> np.ndarray:
        parts = []
        for c, pi in zip(self.choices, self.payoff_vectors(vec)):
            if type(c) is Logit:
                w = np.maximum(np.exp((pi - pi.max()) / c.eta), _TINY)
                parts.append(w / w.sum())
            else:
                parts.append(c(pi))
        return np.concatenate(parts)

    def br_batch(self, xs: np.ndarray) -> np.ndarray:
        """``br`` applied to every row of ``xs``."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        n = self.game.num_players
        letters = "abcdefghijklmnopqrstuvwxy"[:n]
        blocks = split_blocks(xs.T, self.counts)
        out = []
        for i, choice in enumerate(self.choices):
            opp = [j for j in range(n) if j != i]
            spec = letters + "," + ",".join(letters[j] + "z" for j in opp) + "->z" + letters[i]
            pi = np.einsum(spec, self.game.payoffs[i], *(blocks[j] for j in opp))
            if isinstance(choice, Logit):
                z = (pi - pi.max(axis=1, keepdims=True)) / choice.eta
                w = np.maximum(np.exp(z), _TINY)
                out.append(w / w.sum(axis=1, keepdims=True))
            else:
                out.append(np.stack([choice(row) for row in pi]))
        return np.concatenate(out, axis=1)

    def field_flat(self, vec: np.ndarray) -> np.ndarray:
        return self.br_flat(vec) - vec

    def field_batch(self, xs: np.ndarray) -> np.ndarray:
        return self.br_batch(xs) - xs

    def br_jacobian_flat(self, vec: np.ndarray) -> np.ndarray:
        """Derivative of ``br`` in full coordinates; diagonal blocks are zero."""
        vec = np.asarray(vec, dtype=float)
        blocks = split_blocks(vec, self.counts)
        off = np.concatenate([[0], np.cumsum(self.counts)])
        out = np.zeros((self.dim, self.dim))
        for i, choice in enumerate(self.choices):
            pi = _contract_except(self.game.payoffs[i], blocks, keep=(i,))
            dc = choice.jacobian(pi)
            for j in range(self.game.num_players):
                if j == i:
                    continue
                # d pi_i / d x_j, with axes ordered (i, j) after contraction
                dpi = _contract_except(self.game.payoffs[i], blocks, keep=(i, j))
                if j < i:
                    dpi = dpi.T
                out[off[i]:off[i + 1], off[j]:off[j + 1]] = dc @ dpi
        return out

    def jacobian_flat(self, vec: np.ndarray) -> np.ndarray:
        return self.br_jacobian_flat(vec) - np.eye(self.dim)

    # -- tail-sum coordinates ---------------------------------------------

    def conjugate_flat(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        x = self._tinv_c + self._tinv_m @ v
        return self._tmat @ self.br_flat(x) - v

    def conjugate_batch(self, vs: np.ndarray) -> np.ndarray:
        xs = self._tinv_c + vs @ self._tinv_m.T
        return self.br_batch(xs) @ self._tmat.T - vs

    def conjugate_jacobian_flat(self, v: np.ndarray) -> np.ndarray:
        x = self._tinv_c + self._tinv_m @ np.asarray(v, dtype=float)
        return self._tmat @ self.br_jacobian_flat(x) @ self._tinv_m - np.eye(v.size)

    # -- profile level API ------------------------------------------------

    def best_response(self, x: MixedProfile) -> MixedProfile:
        x.check_game(self.game)
        return MixedProfile.from_vector(self.br_flat(x.vector), self.counts)

    def vector_field(self, x: MixedProfile) -> np.ndarray:
        x.check_game(self.game)
        return self.field_flat(x.vector)

    def jacobian(self, x: MixedProfile) -> np.ndarray:
        x.check_game(self.game)
        return self.jacobian_flat(x.vector)

    def conjugate_field(self, v: TImage) -> np.ndarray:
        if v.action_counts != self.counts:
            raise StructuralError("T-image does not match the game")
        return self.conjugate_flat(v.vector)

    # -- handles for the flow module --------------------------------------

    def as_handle(self):
        """Field handle of the perturbed best-response dynamic on the simplex."""
        from .flow import FieldHandle, simplex_chart

        counts = self.counts
        return FieldHandle(
            dim=self.dim,
            eval=self.field_flat,
            jac=self.jacobian_flat,
            project=lambda v: project_to_simplex(v, counts),
            chart=simplex_chart(counts),
            name="pbr",
            batch=self.field_batch,
        )

    def conjugate_handle(self):
        """Field handle of the conjugate dynamic in tail-sum coordinates."""
        from .flow import FieldHandle

        return FieldHandle(
            dim=self.dim - len(self.counts),
            eval=self.conjugate_flat,
            jac=self.conjugate_jacobian_flat,
            name="pbr-conjugate",
            batch=self.conjugate_batch,
        )


# functional aliases


def best_response(f: BestResponseField, x: MixedProfile) -> MixedProfile:
    return f.best_response(x)


def vector_field(f: BestResponseField, x: MixedProfile) -> np.ndarray:
    return f.vector_field(x)


def jacobian(f: BestResponseField, x: MixedProfile) -> np.ndarray:
    return f.jacobian(x)


def conjugate_field(f: BestResponseField, v: TImage) -> np.ndarray:
    return f.conjugate_field(v)
