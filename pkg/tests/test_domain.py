import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficcal.domain import (BoundaryConditions, FreewayGeometry, MeasurementSeries, ObservationMask, ParamBounds,
                               PeriodDataset, TrafficParams, clamp_params, from_unit, param_dim, param_names,
                               sigmoid, to_unit, unit_jacobian, unit_to_vector, unit_vjp, validate_geometry,
                               vector_to_unit)


def uniform_params(K, v=100.0, qn=2000.0, qd=1800.0, rmax=180.0, w=20.0):
    return TrafficParams(np.full(K - 1, v), np.full(K - 1, qn), np.full(K - 1, qd), np.full(K, rmax), np.full(K, w))


def test_param_dim_and_names():
    assert param_dim(9) == 42
    names = param_names(3)
    assert len(names) == param_dim(3)
    assert names[0] == "v_1" and names[-1] == "w_3"


def test_geometry_invariants():
    with pytest.raises(ValueError):
        FreewayGeometry([0.5], [2400.0], 0.001, 1, 10)
    with pytest.raises(ValueError):
        FreewayGeometry([0.5, -1], [2400.0, 2400.0], 0.001, 1, 10)
    with pytest.raises(ValueError):
        FreewayGeometry([0.5, 0.5], [2400.0, 2400.0], 0.001, 4, 10)
    g = FreewayGeometry([0.5, 0.5], [2400.0, 2400.0], 0.001, 5, 10)
    assert g.n_obs == 2
    assert FreewayGeometry.from_dict(g.to_dict()).fingerprint() == g.fingerprint()


def test_traffic_params_invariants():
    with pytest.raises(ValueError):
        uniform_params(3, qd=2100.0)
    with pytest.raises(ValueError):
        uniform_params(3, rmax=15.0)  # critical density 20 above jam density
    with pytest.raises(ValueError):
        uniform_params(3, w=0.0)
    th = uniform_params(3)
    assert TrafficParams.from_vector(th.to_vector(), 3) == th
    assert TrafficParams.from_dict(th.to_dict()) == th


def test_cfl_examples():
    K = 3
    g = FreewayGeometry(np.full(K, 0.5), np.full(K, 2400.0), 1 / 720, 1, 10)
    assert validate_geometry(g, uniform_params(K, v=100.0, qn=2000.0, qd=1800.0)).ok
    g2 = FreewayGeometry(np.full(K, 0.5), np.full(K, 2400.0), 0.01, 1, 10)
    rep = validate_geometry(g2, uniform_params(K, v=60.0, qn=1000.0, qd=900.0, w=20.0))
    assert not rep.ok
    assert any("v*dt = 0.6" in s for s in rep.violations)


def test_bounds_reject_critical_above_jam():
    with pytest.raises(ValueError):
        ParamBounds.uniform(3, free_flow_speed=(20.0, 130.0), nominal_capacity=(1500.0, 2600.0),
                            jam_density=(100.0, 220.0))


def test_clamp_params_examples(hand):
    b = ParamBounds.uniform(3)
    mid = clamp_params(np.zeros(param_dim(3)), b)
    assert np.allclose(mid.to_vector(), b.midpoint().to_vector())
    big = clamp_params(np.full(param_dim(3), 40.0), b)
    assert np.allclose(big.free_flow_speeds, b.upper.free_flow_speeds)
    with pytest.raises(ValueError):
        clamp_params(np.zeros(5), b)
    assert 10 * sigmoid(1.0) == pytest.approx(hand["scalars"]["sigmoid_scaled_10_at_1"], abs=1e-12)
    assert 10 * sigmoid(1.0) == pytest.approx(7.3106, abs=1e-4)


def test_midpoint_drop_uses_ratio():
    b = ParamBounds.uniform(3, drop_ratio=(0.7, 1.0))
    mid = b.midpoint()
    assert np.allclose(mid.dropped_capacities, 0.85 * mid.nominal_capacities)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=param_dim(4), max_size=param_dim(4)))
def test_clamp_params_always_valid(raw):
    b = ParamBounds.uniform(4)
    th = clamp_params(np.array(raw), b)  # constructing TrafficParams validates its invariants
    x, lo, hi = th.to_vector(), b.lower.to_vector(), b.upper.to_vector()
    assert np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9)
    assert np.all(th.dropped_capacities <= th.nominal_capacities)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=param_dim(3), max_size=param_dim(3)))
def test_unit_roundtrip(u):
    b = ParamBounds.uniform(3)
    u = np.array(u)
    assert np.allclose(vector_to_unit(unit_to_vector(u, b), b), u, atol=1e-10)
    assert np.allclose(to_unit(from_unit(u, b), b), u, atol=1e-10)


def test_unit_jacobian_and_vjp_match_fd():
    b = ParamBounds.uniform(3)
    rng = np.random.default_rng(0)
    u = rng.uniform(0.1, 0.9, size=param_dim(3))
    J = unit_jacobian(u, b)
    eps = 1e-6
    fd = np.stack([(unit_to_vector(u + eps * e, b) - unit_to_vector(u - eps * e, b)) / (2 * eps)
                   for e in np.eye(u.size)], axis=1)
    assert np.allclose(J, fd, rtol=1e-6, atol=1e-6)
    gth = rng.standard_normal(u.size)
    assert np.allclose(unit_vjp(u, gth, b), gth @ J, rtol=1e-10, atol=1e-8)


def test_boundary_validation():
    with pytest.raises(ValueError):
        BoundaryConditions([0, 0], -np.ones((2, 3)), np.ones((2, 3)), np.ones(3))
    with pytest.raises(ValueError):
        BoundaryConditions([0, 0], np.ones((2, 3)), 2 * np.ones((2, 3)), np.ones(3))
    bc = BoundaryConditions([1, 2], np.ones((2, 3)), np.ones((2, 3)), np.ones(3))
    assert BoundaryConditions.from_dict(bc.to_dict()) == bc


def test_measurements_and_mask():
    payload = np.arange(12, dtype=float).reshape(6, 2)
    bits = np.ones((6, 2), dtype=bool)
    bits[5, 1] = False
    m = MeasurementSeries.from_stacked(payload, ObservationMask(bits))
    assert m.mask.missing_rate == pytest.approx(1 / 12)
    z = m.with_mask(ObservationMask(bits))
    assert z.stacked()[5, 1] == 0.0
    assert MeasurementSeries.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        MeasurementSeries.from_stacked(-payload)
    with pytest.raises(ValueError):
        ObservationMask(np.full((6, 2), 2))
    pd = PeriodDataset("a", BoundaryConditions([1, 2], np.ones((2, 5)), np.ones((2, 5)), np.ones(5)), m)
    assert PeriodDataset.from_dict(pd.to_dict()).measurements == m
    with pytest.raises(ValueError):
        pd.with_split("validation")
