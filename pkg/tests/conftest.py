import numpy as np
import pytest

from pcnav import builtin_worlds_dir
from pcnav.sim import FloorplanWorld, load_worlds, parse_map


def world_from_ascii(rows, cell: float = 0.1, height: float = 2.0,
                     ceiling: int = 0, name: str = "test") -> FloorplanWorld:
    """Build a world from ASCII rows (top row = max y)."""
    if isinstance(rows, str):
        rows = rows.strip().splitlines()
    body = "\n".join(line.strip() for line in rows)
    text = f"cellsize {cell}\nheight {height}\nceiling {ceiling}\n{body}\n"
    return parse_map(text, name=name)


@pytest.fixture(scope="session")
def simple_worlds():
    return load_worlds(builtin_worlds_dir("simple"))


@pytest.fixture(scope="session")
def complex_worlds():
    return load_worlds(builtin_worlds_dir("complex"))


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
