import re

import numpy as np
import pytest

from trafficcal.data import ScenarioSpec, generate_scenario
from trafficcal.domain import MeasurementSeries, ObservationMask, ParamBounds
from trafficcal.evaluation import (METRIC_COLUMNS, derived_density, evaluate, heatmap_svg, metrics_csv,
                                   period_heatmaps, period_metrics, pooled_scores)

from conftest import FIXTURES, small_geometry


def noiseless(periods=3):
    g = small_geometry(K=3, horizon=48, m=4)
    b = ParamBounds.uniform(3)
    ds, truth = generate_scenario(ScenarioSpec(g, b, onramp_cells=(2,), offramp_cells=(2,), periods=periods,
                                               noise=0.0, seed=2))
    return g, b, ds, truth


def test_truth_gives_zero_error():
    g, b, ds, truth = noiseless()
    ev = evaluate(truth.as_dict(), ds, g)
    agg = ev.aggregate()
    for c in METRIC_COLUMNS[1:]:
        assert agg[c] == 0.0
    assert agg["congestion_agreement"] == 1.0
    s = pooled_scores(ev, ds)
    assert s["relative_rmse_speed"] == 0.0 and s["relative_rmse_flow"] == 0.0


def test_missing_periods_flagged():
    g, b, ds, truth = noiseless()
    params = truth.as_dict()
    params.pop(ds[1].period_id)
    ev = evaluate(params, ds, g)
    assert ev.missing == [ds[1].period_id]
    assert len(ev.periods) == 2


def test_metrics_csv_header_golden():
    g, b, ds, truth = noiseless(2)
    text = metrics_csv(evaluate({p.period_id: b.midpoint() for p in ds}, ds, g))
    golden = (FIXTURES / "metrics_header.csv").read_text().strip()
    lines = text.strip().splitlines()
    assert lines[0] == golden == ",".join(METRIC_COLUMNS)
    assert lines[-1].startswith("ALL,")
    assert len(lines) == 2 + len(ds)


def test_masked_entries_excluded():
    K, n = 2, 3
    payload = np.ones((3 * K, n)) * 50.0
    bits = np.ones_like(payload, dtype=bool)
    bits[2 * K, 0] = False
    meas = MeasurementSeries.from_stacked(payload, ObservationMask(bits))
    sim = payload.copy()
    sim[2 * K, 0] = 0.0
    m = period_metrics("x", sim, meas)
    assert m.rmse_speed == 0.0 and m.mre_speed == 0.0
    sim[2 * K, 1] = 60.0
    m = period_metrics("x", sim, meas)
    assert m.rmse_speed == pytest.approx(np.sqrt(100.0 / 5))
    assert m.mre_speed == pytest.approx(0.2 / 5)


def test_aggregate_rms_over_periods():
    g, b, ds, truth = noiseless()
    ev = evaluate({p.period_id: b.midpoint() for p in ds}, ds, g)
    vals = np.array([m.rmse_speed for m in ev.periods])
    assert ev.aggregate()["rmse_speed"] == pytest.approx(np.sqrt(np.mean(vals ** 2)))


def test_derived_density():
    assert np.allclose(derived_density(np.array([1000.0, 5.0]), np.array([50.0, 0.0])), [20.0, 0.0])


def test_heatmap_dimensions():
    g, b, ds, truth = noiseless(1)
    ev = evaluate(truth.as_dict(), ds, g)
    maps = period_heatmaps(ds[0], ev.simulated[ds[0].period_id], 130.0, 220.0)
    K, n = 3, g.n_obs
    for svg in maps.values():
        panels = re.findall(r'data-rows="(\d+)" data-cols="(\d+)"', svg)
        assert panels == [(str(K), str(n))] * 2
        assert svg.count("<rect") == 2 * K * n + 10


def test_heatmap_color_ramp_and_mask():
    data = np.array([[0.0, 100.0]])
    svg = heatmap_svg([("a", data)], 100.0, mask=np.array([[True, False]]))
    rects = re.findall(r'fill="(#[0-9a-f]{6})"', svg)
    assert rects[0] == "#d73027"
    assert rects[1] == "#bbbbbb"
    with pytest.raises(ValueError):
        heatmap_svg([("a", data), ("b", np.zeros((2, 2)))], 1.0)
