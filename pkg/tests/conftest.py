import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sfplay import BestResponseField, Game, Logit, coordination_game  # noqa: E402

_ACCEPTANCE_LINES: list[str] = []


def ladder_game(m: int = 3, cost: float = 0.7) -> Game:
    """Two players, actions 0..m-1, u_i = a_i a_j - cost a_i^2 (cross differences equal 1)."""
    a = np.arange(m, dtype=float)
    u = np.outer(a, a) - cost * a[:, None] ** 2
    return Game.bimatrix(u, u.T)


def three_player_game(cost: float = 0.9) -> Game:
    """Three players with two actions each, u_i = a_i (sum of the others) - cost a_i."""
    pay = np.zeros((3, 2, 2, 2))
    for a in np.ndindex(2, 2, 2):
        for i in range(3):
            pay[(i, *a)] = a[i] * (sum(a) - a[i]) - cost * a[i]
    return Game(pay)


def supermodular_fields():
    return [
        ("coordination-0.5", BestResponseField(coordination_game(), Logit(0.5))),
        ("coordination-0.2", BestResponseField(coordination_game(), Logit(0.2))),
        ("ladder-3x3", BestResponseField(ladder_game(), Logit(0.5))),
        ("three-player", BestResponseField(three_player_game(), Logit(0.3))),
    ]


@pytest.fixture
def coord():
    return coordination_game()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_line():
    def record(text: str):
        _ACCEPTANCE_LINES.append(text)
        print(text)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
