"""
Pytest configuration and fixtures.
Provides benchmark markets, small grids and control stacks, and a scratch result store.
"""

from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from app.core.config import settings
from app.models.grid import Partition
from app.models.market import BlackScholesMarket, ExerciseSchedule, FbsdeProblem
from app.services.file_storage_service import ResultStore
from app.services.market_models import make_basket_call_problem, make_geometric_put_problem
from app.services.mlp import ControlStack
from app.services.path_engine import build_partition

REPO_ROOT = Path(__file__).parent.parent


@pytest.fixture(autouse=True, scope="session")
def bundled_config_dir() -> Generator[None, None, None]:
    """Point settings at the repository's config/ regardless of the working directory."""
    previous = settings.CONFIG_DIR
    settings.CONFIG_DIR = str(REPO_ROOT / "config")
    yield
    settings.CONFIG_DIR = previous


@pytest.fixture(name="market1")
def market1_fixture() -> BlackScholesMarket:
    """Single-asset benchmark market: r=2%, sigma=20%, S0=K=100, T=1."""
    return BlackScholesMarket.uniform(1)


@pytest.fixture(name="market5")
def market5_fixture() -> BlackScholesMarket:
    return BlackScholesMarket.uniform(5)


@pytest.fixture(name="put1")
def put1_fixture(market1: BlackScholesMarket) -> FbsdeProblem:
    return make_geometric_put_problem(market1)


@pytest.fixture(name="put3")
def put3_fixture() -> FbsdeProblem:
    """Three correlated assets with unequal parameters."""
    market = BlackScholesMarket(
        rate=0.03,
        dividends=(0.0, 0.01, 0.02),
        vols=(0.2, 0.3, 0.25),
        correlation=((1.0, 0.3, 0.1), (0.3, 1.0, 0.2), (0.1, 0.2, 1.0)),
        spots=(95.0, 100.0, 105.0),
        strike=100.0,
    )
    return make_geometric_put_problem(market)


@pytest.fixture(name="call2")
def call2_fixture() -> FbsdeProblem:
    return make_basket_call_problem(BlackScholesMarket.uniform(2, rho=0.4))


@pytest.fixture(name="grid4")
def grid4_fixture() -> Partition:
    return build_partition(4, 1.0)


@pytest.fixture(name="bermudan_grid")
def bermudan_grid_fixture() -> Partition:
    """n=10 with N=5 exercise periods."""
    return build_partition(10, 1.0, ExerciseSchedule.uniform(5, 1.0))


@pytest.fixture(name="tiny_controls")
def tiny_controls_fixture(put3: FbsdeProblem) -> ControlStack:
    """Randomly initialised 4-step stack with small hidden layers and nonzero biases."""
    controls = ControlStack.initialize(put3, 4, seed=11, layer_sizes=[3, 5, 4, 3])
    rng = np.random.default_rng(5)
    for p in controls.params:
        for b in p.biases:
            b += rng.normal(scale=0.3, size=b.shape)
    return controls


@pytest.fixture(name="store")
def store_fixture(tmp_path: Path) -> ResultStore:
    return ResultStore(tmp_path / "results")
