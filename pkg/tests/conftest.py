import json
from pathlib import Path

import numpy as np
import pytest

from trafficcal.data import ScenarioSpec, default_geometry, generate_scenario
from trafficcal.domain import BoundaryConditions, FreewayGeometry, ParamBounds, TrafficParams

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def hand():
    return json.loads((FIXTURES / "hand_fixtures.json").read_text())


def two_cell(hand_fx, horizon=1, eta=None):
    fx = hand_fx["two_cell_step"]
    g = FreewayGeometry(fx["geometry"]["cell_lengths"], fx["geometry"]["buffer_capacities"],
                        fx["geometry"]["sim_step"], 1, horizon)
    theta = TrafficParams(**{k: np.array(v) for k, v in fx["params"].items()})
    b = fx["boundary"]
    eta = b["mainline_ratios"] if eta is None else eta
    bc = BoundaryConditions(fx["state"]["densities"], np.tile(np.array(b["demands"])[:, None], (1, horizon + 1)),
                            np.tile(np.array(eta, dtype=float)[:, None], (1, horizon + 1)),
                            np.full(horizon + 1, b["downstream_speed"]))
    return g, theta, bc


def small_geometry(K=3, horizon=24, m=4):
    return FreewayGeometry(np.full(K, 0.5), np.full(K, 2400.0), 5.0 / 3600.0, m, horizon)


def random_boundary(rng, K, T, peak=1.0):
    t = np.arange(T + 1) / max(T, 1)
    alpha = np.zeros((K, T + 1))
    alpha[0] = rng.uniform(800, 1200) + peak * rng.uniform(300, 900) * np.exp(-0.5 * ((t - 0.5) / 0.2) ** 2)
    for k in range(1, K):
        if rng.uniform() < 0.6:
            alpha[k] = rng.uniform(0, 300) * np.exp(-0.5 * ((t - rng.uniform(0.3, 0.7)) / 0.2) ** 2)
    eta = np.ones((K, T + 1))
    for k in range(K - 1):
        if rng.uniform() < 0.4:
            eta[k] = rng.uniform(0.85, 0.98)
    v_down = np.full(T + 1, rng.uniform(40, 110))
    return BoundaryConditions(rng.uniform(0, 40, size=K), alpha, eta, v_down)


def random_params(rng, bounds: ParamBounds):
    from trafficcal.domain import from_unit
    return from_unit(rng.uniform(0.02, 0.98, size=bounds.lower.to_vector().size), bounds)


@pytest.fixture(scope="session")
def small_scenario():
    g = default_geometry(K=4, period_hours=1.0)
    b = ParamBounds.uniform(4)
    spec = ScenarioSpec(g, b, onramp_cells=(2, 3), offramp_cells=(2,), periods=6, seed=3)
    ds, truth = generate_scenario(spec)
    return g, b, ds, truth


# -- acceptance report -------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
