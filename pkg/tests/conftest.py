import numpy as np
import pytest

from mgskip.gossip import MultiGossipOperator
from mgskip.problems import centralized_solve, gen_least_squares
from mgskip.topology import build_ring, metropolis_weights


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run multi-seed sweeps")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed Monte Carlo sweeps (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def ring15():
    return metropolis_weights(build_ring(15))


@pytest.fixture(scope="session")
def ring15_gossip(ring15):
    return MultiGossipOperator.build(ring15, eta_form="standard")


@pytest.fixture(scope="session")
def ring15_problem(ring15):
    """Synthetic least squares on ring-15 with κ = 0.5/(1-ρ)."""
    kappa = 0.5 / (1.0 - ring15.rho)
    return gen_least_squares(15, 10, 1.0, kappa, seed=0)


@pytest.fixture(scope="session")
def ring15_reference(ring15_problem):
    return centralized_solve(ring15_problem)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec_file(tmp_path):
    """Small ring-8 experiment: two MG-Skip entries and the PUDA p=1 preset."""
    path = tmp_path / "small.env"
    path.write_text(
        "\n".join(
            [
                "problem.kind = least_squares",
                "problem.d = 4",
                "problem.kappa = 5",
                "problem.seed = 3",
                "graph.kind = ring",
                "graph.n = 8",
                "algorithm.fast.kind = mgskip",
                "algorithm.fast.p = 0.5",
                "algorithm.full.kind = mgskip",
                "algorithm.full.p = 1",
                "algorithm.engine.kind = puda",
                "algorithm.engine.preset = mgskip_p1",
                "run.T = 1500",
                "run.tol = 1e-6",
                "run.seeds = 0..1",
                "run.baseline = full",
                "",
            ]
        ),
        encoding="utf-8",
    )
    return path
