import numpy as np
import pytest

from trafficcal.data import (BOUNDARY_FILE, MEASUREMENT_FILE, Bernoulli, DataError, FromPool, ScenarioSpec,
                             SensorOutage, apply_mask_pattern, default_geometry, generate_scenario, load_periods,
                             load_truth, mask_pool, save_periods, split_by_period, TRUTH_FILE)
from trafficcal.domain import ObservationMask, ParamBounds


def test_default_shape():
    g = default_geometry()
    ds, truth = generate_scenario(ScenarioSpec(g, ParamBounds.uniform(9), periods=2, seed=0))
    assert ds[0].measurements.stacked().shape == (27, 36)
    assert g.horizon == 2160 and g.n_obs == 36
    assert len(truth.params) == 2
    for p in ds:
        assert p.measurements.mask.is_full


def test_generation_deterministic(small_scenario):
    g, b, ds, truth = small_scenario
    spec = ScenarioSpec(g, b, onramp_cells=(2, 3), offramp_cells=(2,), periods=6, seed=3)
    ds2, truth2 = generate_scenario(spec)
    assert ds == ds2
    assert truth.params == truth2.params
    ds3, _ = generate_scenario(ScenarioSpec(g, b, onramp_cells=(2, 3), offramp_cells=(2,), periods=6, seed=4))
    assert ds3 != ds


def test_truth_within_ranges(small_scenario):
    g, b, ds, truth = small_scenario
    for th in truth.params:
        assert b.contains(th)
        assert np.all((th.free_flow_speeds >= 85) & (th.free_flow_speeds <= 115))


def test_spec_validation():
    g = default_geometry(K=4, period_hours=1.0)
    b = ParamBounds.uniform(4)
    with pytest.raises(ValueError):
        ScenarioSpec(g, b, noise=-0.1)
    with pytest.raises(ValueError):
        ScenarioSpec(g, b, truth_free_flow_speed=(50.0, 100.0))
    with pytest.raises(ValueError):
        ScenarioSpec(g, ParamBounds.uniform(3))


def test_round_trip(tmp_path, small_scenario):
    g, b, ds, truth = small_scenario
    masked = [apply_mask_pattern(ds[0], Bernoulli(0.3), seed=1)] + list(ds[1:])
    save_periods(masked, tmp_path, truth)
    back = load_periods(tmp_path, g, "train")
    assert back == masked
    assert load_truth(tmp_path / TRUTH_FILE).params == truth.params


def test_blank_cell_is_one_masked_entry(tmp_path, small_scenario):
    g, b, ds, _ = small_scenario
    save_periods(ds[:1], tmp_path)
    path = tmp_path / MEASUREMENT_FILE
    lines = path.read_text().splitlines()
    header = lines[1].split(",")
    col = header.index("vbar_3")
    row = lines[5].split(",")
    row[col] = ""
    lines[5] = ",".join(row)
    path.write_text("\n".join(lines) + "\n")
    back = load_periods(tmp_path, g)[0]
    bits = back.measurements.mask.bits
    assert (~bits).sum() == 1
    assert not bits[2 * 4 + 2, 3]


def test_missing_column_named(tmp_path, small_scenario):
    g, b, ds, _ = small_scenario
    save_periods(ds[:1], tmp_path)
    path = tmp_path / MEASUREMENT_FILE
    text = path.read_text().replace(",fbar_2,", ",fbar_x,", 1)
    path.write_text(text)
    with pytest.raises(DataError, match="fbar_2"):
        load_periods(tmp_path, g)


def test_out_of_order_time_rejected(tmp_path, small_scenario):
    g, b, ds, _ = small_scenario
    save_periods(ds[:1], tmp_path)
    path = tmp_path / BOUNDARY_FILE
    lines = path.read_text().splitlines()
    lines[3], lines[4] = lines[4], lines[3]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="out of order"):
        load_periods(tmp_path, g)


def test_blank_boundary_rejected(tmp_path, small_scenario):
    g, b, ds, _ = small_scenario
    save_periods(ds[:1], tmp_path)
    path = tmp_path / BOUNDARY_FILE
    lines = path.read_text().splitlines()
    row = lines[3].split(",")
    row[2] = ""
    lines[3] = ",".join(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="blank"):
        load_periods(tmp_path, g)


def test_missing_file(tmp_path, small_scenario):
    g = small_scenario[0]
    with pytest.raises(DataError):
        load_periods(tmp_path, g)


def test_mask_rates(small_scenario):
    _, _, ds, _ = small_scenario
    p = ds[0]
    assert apply_mask_pattern(p, Bernoulli(0.0), seed=2) == p
    all_gone = apply_mask_pattern(p, Bernoulli(1.0), seed=2)
    assert not all_gone.measurements.mask.bits.any()
    assert np.all(all_gone.measurements.stacked() == 0.0)
    masked, orig = apply_mask_pattern(p, Bernoulli(0.5), seed=2, keep_truth=True)
    assert orig is p
    assert np.all(masked.measurements.stacked()[~masked.measurements.mask.bits] == 0.0)
    with pytest.raises(ValueError):
        Bernoulli(1.5)


def test_sensor_outage(small_scenario):
    _, _, ds, _ = small_scenario
    K = 4
    out = apply_mask_pattern(ds[0], SensorOutage((3,)))
    bits = out.measurements.mask.bits
    for ch in range(3):
        assert not bits[ch * K + 2].any()
    assert (~bits).sum() == 3 * bits.shape[1]


def test_from_pool_and_mask_pool():
    pool = mask_pool((6, 5), [0.0, 1.0], 4, seed=0)
    assert pool[0].is_full and not pool[1].bits.any()
    bits = FromPool(pool).sample((6, 5), np.random.default_rng(0))
    assert bits.shape == (6, 5)
    with pytest.raises(ValueError):
        FromPool(()).sample((6, 5), np.random.default_rng(0))
    with pytest.raises(ValueError):
        FromPool((ObservationMask.full((3, 5)),)).sample((6, 5), np.random.default_rng(0))


def test_split_by_period():
    g = default_geometry(K=4, period_hours=1.0)
    ds, _ = generate_scenario(ScenarioSpec(g, ParamBounds.uniform(4), onramp_cells=(2,), offramp_cells=(2,),
                                           periods=10, seed=0))
    tr, te = split_by_period(ds, 0.5, seed=1)
    assert len(tr) == len(te) == 5
    ids = [p.period_id for p in tr + te]
    assert len(set(ids)) == 10
    assert all(p.split_tag == "train" for p in tr) and all(p.split_tag == "test" for p in te)
    tr2, te2 = split_by_period(ds, 0.5, seed=1)
    assert [p.period_id for p in te2] == [p.period_id for p in te]
    tr3, te3 = split_by_period(ds, ["p0002", "p0007"])
    assert [p.period_id for p in te3] == ["p0002", "p0007"]
    with pytest.raises(ValueError):
        split_by_period(ds, ["nope"])
    with pytest.raises(ValueError):
        split_by_period(ds, [p.period_id for p in ds])
