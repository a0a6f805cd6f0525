"""JSON/CSV (de)serialization and atomic file output."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DomainError, StructuralError
from .games import Game, MixedProfile
from .response import BestResponseField, Logit, choice_from_dict


def game_from_dict(d: dict) -> Game:
    try:
        players = int(d["players"])
        actions = [int(m) for m in d["actions"]]
        payoffs = d["payoffs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError(f"game JSON needs 'players', 'actions', 'payoffs': {exc}") from None
    if players != len(actions):
        raise StructuralError(f"'players' is {players} but {len(actions)} action counts given")
    return Game.from_flat(actions, payoffs)


def game_to_dict(g: Game) -> dict:
    return {
        "players": g.num_players,
        "actions": list(g.action_counts),
        "payoffs": [g.payoffs[i].ravel().tolist() for i in range(g.num_players)],
    }


def profile_from_dict(d: dict, game: Game | None = None) -> MixedProfile:
    try:
        blocks = d["blocks"]
    except (KeyError, TypeError):
        raise StructuralError("profile JSON needs a 'blocks' list") from None
    x = MixedProfile(blocks)
    if game is not None:
        x.check_game(game)
    return x


def profile_to_dict(x: MixedProfile) -> dict:
    return {"blocks": [b.tolist() for b in x.blocks]}


def choices_from_json(data, num_players: int) -> list:
    """One ChoiceSpec object for all players, or a list with one per player."""
    if isinstance(data, dict):
        return [choice_from_dict(data)] * num_players
    if isinstance(data, list):
        if len(data) != num_players:
            raise StructuralError(f"expected {num_players} choice specs, got {len(data)}")
        return [choice_from_dict(d) for d in data]
    raise StructuralError("choices JSON must be an object or a list of objects")


def dumps(obj) -> str:
    """Deterministic JSON text; floats use the shortest round-trip representation."""
    return json.dumps(_plain(obj), indent=2, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temporary file in the target directory, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def field_from_files(game_path, choices_path=None, eta=None) -> BestResponseField:
    game = game_from_dict(load_json(game_path))
    if choices_path is not None:
        choices = choices_from_json(load_json(choices_path), game.num_players)
    elif eta is not None:
        choices = [Logit(eta)] * game.num_players
    else:
        raise DomainError("either a choices file or --eta is required")
    return BestResponseField(game, choices)
