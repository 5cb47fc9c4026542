import numpy as np
import pytest

from timecon.services.bsde import BSDEProblem
from timecon.services.lattice import TimeGrid, TreeMode, build_tree
from timecon.settings import reset_settings


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    for key in ("TIMECON_PATH_CAP", "TIMECON_POLICY_CAP", "TIMECON_OUTPUT_DIR", "TIMECON_WORKERS"):
        monkeypatch.delenv(key, raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def path_tree():
    return build_tree(TimeGrid(1.0, 3), 1, TreeMode.PATH)


@pytest.fixture
def recombining_tree():
    return build_tree(TimeGrid(1.0, 4), 1, TreeMode.RECOMBINING)


@pytest.fixture
def drift_problem():
    """Y_0 = E[B_T] + sum_k E[u_k] dt: the best adapted policy always plays the top control."""
    return BSDEProblem(
        value_dim=1,
        generator=lambda nodes, y, z, u: np.asarray(u, dtype=float).reshape(-1, 1),
        terminal=lambda nodes: nodes.brownian[:, :1],
        utility=lambda y: np.asarray(y)[..., 0],
        control_set=np.array([-1.0, 0.0, 1.0]),
        name="drift",
    )
