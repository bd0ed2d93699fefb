"""Shared domain types for the freeway corridor model.

Units are fixed throughout the package: veh/h for flows, veh/km for
densities, km/h for speeds, km for lengths and hours for time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

PARAM_GROUPS = ("free_flow_speeds", "nominal_capacities", "dropped_capacities", "jam_densities", "wave_speeds")
PARAM_UNITS = {
    "free_flow_speeds": "km/h",
    "nominal_capacities": "veh/h",
    "dropped_capacities": "veh/h",
    "jam_densities": "veh/km",
    "wave_speeds": "km/h",
}
PARAM_SHORT = {
    "free_flow_speeds": "v",
    "nominal_capacities": "Q_nom",
    "dropped_capacities": "Q_drop",
    "jam_densities": "rho_max",
    "wave_speeds": "w",
}


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def param_dim(K: int) -> int:
    """Length of the flattened parameter vector for ``K`` cells."""
    return 3 * (K - 1) + 2 * K


def group_sizes(K: int) -> tuple[int, ...]:
    return (K - 1, K - 1, K - 1, K, K)


def param_names(K: int) -> list[str]:
    names = []
    for group, n in zip(PARAM_GROUPS, group_sizes(K)):
        names.extend(f"{PARAM_SHORT[group]}_{k + 1}" for k in range(n))
    return names


@dataclass(frozen=True)
class FreewayGeometry:
    """Static corridor description.

    ``sim_step`` is the model step in hours; measurements are aggregated
    every ``obs_multiple`` steps and a period spans ``horizon`` steps.
    """

    cell_lengths: np.ndarray
    buffer_capacities: np.ndarray
    sim_step: float
    obs_multiple: int
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "cell_lengths", _frozen(self.cell_lengths))
        object.__setattr__(self, "buffer_capacities", _frozen(self.buffer_capacities))
        object.__setattr__(self, "sim_step", float(self.sim_step))
        object.__setattr__(self, "obs_multiple", int(self.obs_multiple))
        object.__setattr__(self, "horizon", int(self.horizon))
        K = self.cell_lengths.size
        if self.cell_lengths.ndim != 1 or K < 2:
            raise ValueError("geometry needs at least 2 cells")
        if self.buffer_capacities.shape != (K,):
            raise ValueError(f"buffer_capacities must have length {K}")
        if np.any(self.cell_lengths <= 0) or np.any(self.buffer_capacities <= 0):
            raise ValueError("cell lengths and buffer capacities must be positive")
        if not self.sim_step > 0:
            raise ValueError("sim_step must be positive")
        if self.obs_multiple < 1:
            raise ValueError("obs_multiple must be a positive integer")
        if self.horizon < 0 or self.horizon % self.obs_multiple:
            raise ValueError("horizon must be a nonnegative multiple of obs_multiple")

    @property
    def cell_count(self) -> int:
        return int(self.cell_lengths.size)

    @property
    def n_obs(self) -> int:
        return self.horizon // self.obs_multiple

    @property
    def obs_interval(self) -> float:
        """Aggregation interval in hours."""
        return self.sim_step * self.obs_multiple

    def fingerprint(self) -> str:
        parts = [",".join(repr(float(x)) for x in self.cell_lengths),
                 ",".join(repr(float(x)) for x in self.buffer_capacities),
                 repr(self.sim_step), str(self.obs_multiple), str(self.horizon)]
        return "|".join(parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cell_lengths": self.cell_lengths.tolist(),
            "buffer_capacities": self.buffer_capacities.tolist(),
            "sim_step": self.sim_step,
            "obs_multiple": self.obs_multiple,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FreewayGeometry":
        return cls(d["cell_lengths"], d["buffer_capacities"], d["sim_step"], d["obs_multiple"], d["horizon"])


@dataclass(frozen=True)
class TrafficParams:
    """Calibrated CTM parameters.

    Free-flow speeds and capacities cover cells ``1..K-1``; the last cell
    discharges at the measured downstream speed, so it only carries a jam
    density and a wave speed.
    """

    free_flow_speeds: np.ndarray
    nominal_capacities: np.ndarray
    dropped_capacities: np.ndarray
    jam_densities: np.ndarray
    wave_speeds: np.ndarray

    def __post_init__(self):
        for name in PARAM_GROUPS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        K = self.jam_densities.size
        if K < 2 or self.wave_speeds.shape != (K,):
            raise ValueError("jam_densities and wave_speeds must have the same length K >= 2")
        for name in PARAM_GROUPS[:3]:
            if getattr(self, name).shape != (K - 1,):
                raise ValueError(f"{name} must have length K-1 = {K - 1}")
        flat = self.to_vector()
        if not np.all(np.isfinite(flat)) or np.any(flat <= 0):
            raise ValueError("all traffic parameters must be finite and strictly positive")
        if np.any(self.dropped_capacities > self.nominal_capacities):
            raise ValueError("dropped capacity exceeds nominal capacity")
        if np.any(self.critical_densities >= self.jam_densities[:-1]):
            raise ValueError("critical density must stay below jam density")

    @property
    def cell_count(self) -> int:
        return int(self.jam_densities.size)

    @property
    def critical_densities(self) -> np.ndarray:
        return self.nominal_capacities / self.free_flow_speeds

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name in PARAM_GROUPS])

    @classmethod
    def from_vector(cls, x, K: int) -> "TrafficParams":
        x = np.asarray(x, dtype=float)
        if x.shape != (param_dim(K),):
            raise ValueError(f"expected parameter vector of length {param_dim(K)}, got {x.shape}")
        return cls(*split_groups(x, K))

    def to_dict(self) -> dict[str, list[float]]:
        return {name: getattr(self, name).tolist() for name in PARAM_GROUPS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrafficParams":
        return cls(*(d[name] for name in PARAM_GROUPS))

    def __eq__(self, other):
        if not isinstance(other, TrafficParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_GROUPS)

    __hash__ = None


def split_groups(x: np.ndarray, K: int) -> list[np.ndarray]:
    """Split a flattened parameter array (last axis) into its five groups."""
    edges = np.cumsum(group_sizes(K))[:-1]
    return np.split(x, edges, axis=-1)


@dataclass(frozen=True)
class ParamBounds:
    """Feasible box for the parameters.

    Dropped capacities are bounded relative to the nominal ones: the
    drop ratio ``Q_drop / Q_nom`` lives in ``[drop_ratio_min, 1]``, which
    keeps ``Q_drop <= Q_nom`` by construction.  ``lower``/``upper`` give
    the implied absolute box.
    """

    lower: TrafficParams
    upper: TrafficParams
    drop_ratio_min: float

    def __post_init__(self):
        lo, hi = self.lower.to_vector(), self.upper.to_vector()
        if self.lower.cell_count != self.upper.cell_count:
            raise ValueError("bounds have inconsistent cell counts")
        if not np.all(lo < hi):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if not 0.0 < self.drop_ratio_min < 1.0:
            raise ValueError("drop_ratio_min must lie in (0, 1)")
        if self.upper.nominal_capacities.max() / self.lower.free_flow_speeds.min() >= self.lower.jam_densities.min():
            raise ValueError("bounds allow critical density >= jam density: need max(Q_nom)/min(v) < min(rho_max)")

    @classmethod
    def uniform(cls, K: int, free_flow_speed=(60.0, 130.0), nominal_capacity=(1500.0, 2600.0),
                drop_ratio=(0.7, 1.0), jam_density=(100.0, 220.0), wave_speed=(8.0, 40.0)) -> "ParamBounds":
        """Same (low, high) range for every cell."""
        if drop_ratio[1] != 1.0:
            raise ValueError("drop ratio upper bound is fixed at 1")

        def make(i):
            q = nominal_capacity[i]
            qd = q * (drop_ratio[0] if i == 0 else 1.0)
            return TrafficParams(np.full(K - 1, free_flow_speed[i]), np.full(K - 1, q), np.full(K - 1, qd),
                                 np.full(K, jam_density[i]), np.full(K, wave_speed[i]))

        return cls(make(0), make(1), float(drop_ratio[0]))

    @property
    def cell_count(self) -> int:
        return self.lower.cell_count

    def unit_lower(self) -> np.ndarray:
        """Lower edge of each coordinate of the rescaled (unit-cube) space."""
        K = self.cell_count
        lo = self.lower.to_vector().copy()
        v, qn, qd, rm, w = split_groups(lo, K)
        qd[:] = self.drop_ratio_min
        return lo

    def unit_upper(self) -> np.ndarray:
        K = self.cell_count
        hi = self.upper.to_vector().copy()
        v, qn, qd, rm, w = split_groups(hi, K)
        qd[:] = 1.0
        return hi

    def midpoint(self) -> TrafficParams:
        return from_unit(np.full(param_dim(self.cell_count), 0.5), self)

    def contains(self, theta: TrafficParams) -> bool:
        u = to_unit(theta, self)
        return bool(np.all(u >= 0.0) and np.all(u <= 1.0))

    def to_dict(self) -> dict[str, Any]:
        return {"lower": self.lower.to_dict(), "upper": self.upper.to_dict(), "drop_ratio_min": self.drop_ratio_min}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ParamBounds":
        return cls(TrafficParams.from_dict(d["lower"]), TrafficParams.from_dict(d["upper"]), d["drop_ratio_min"])


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def unit_to_vector(u: np.ndarray, bounds: ParamBounds) -> np.ndarray:
    """Map unit-cube coordinates (last axis) to flattened physical parameters.

    Works on batches.  The dropped-capacity coordinate is a drop ratio:
    ``Q_drop = Q_nom * (s_min + (1 - s_min) * u)``.
    """
    K = bounds.cell_count
    lo, hi = bounds.unit_lower(), bounds.unit_upper()
    x = lo + (hi - lo) * np.asarray(u, dtype=float)
    v, qn, ratio, rm, w = split_groups(x, K)
    return np.concatenate([v, qn, qn * ratio, rm, w], axis=-1)


def vector_to_unit(x: np.ndarray, bounds: ParamBounds) -> np.ndarray:
    K = bounds.cell_count
    v, qn, qd, rm, w = split_groups(np.asarray(x, dtype=float), K)
    y = np.concatenate([v, qn, qd / qn, rm, w], axis=-1)
    lo, hi = bounds.unit_lower(), bounds.unit_upper()
    return (y - lo) / (hi - lo)


def from_unit(u: np.ndarray, bounds: ParamBounds) -> TrafficParams:
    return TrafficParams.from_vector(unit_to_vector(u, bounds), bounds.cell_count)


def to_unit(theta: TrafficParams, bounds: ParamBounds) -> np.ndarray:
    return vector_to_unit(theta.to_vector(), bounds)


def unit_jacobian(u: np.ndarray, bounds: ParamBounds) -> np.ndarray:
    """d(physical vector)/d(unit coordinates) for a single point, dense."""
    K = bounds.cell_count
    n = param_dim(K)
    lo, hi = bounds.unit_lower(), bounds.unit_upper()
    span = hi - lo
    J = np.diag(span)
    y = lo + span * u
    iq, is_ = np.arange(K - 1) + (K - 1), np.arange(K - 1) + 2 * (K - 1)
    qn, ratio = y[iq], y[is_]
    J[is_, iq] = span[iq] * ratio
    J[is_, is_] = qn * span[is_]
    return J


def unit_vjp(u: np.ndarray, grad_theta: np.ndarray, bounds: ParamBounds) -> np.ndarray:
    """Pull a gradient w.r.t. physical parameters back to unit coordinates (batched on the last axis)."""
    K = bounds.cell_count
    lo, hi = bounds.unit_lower(), bounds.unit_upper()
    span = hi - lo
    y = lo + span * u
    _, qn, ratio, _, _ = split_groups(y, K)
    g = grad_theta * span
    _, gq, gs, _, _ = split_groups(g, K)
    _, _, g_drop, _, _ = split_groups(grad_theta, K)
    _, span_q, span_s, _, _ = split_groups(span, K)
    gq = gq + g_drop * span_q * ratio
    gs = g_drop * qn * span_s
    out = g.copy()
    out[..., K - 1:2 * (K - 1)] = gq
    out[..., 2 * (K - 1):3 * (K - 1)] = gs
    return out


def clamp_params(theta_raw, bounds: ParamBounds) -> TrafficParams:
    """Squash an unconstrained vector into the feasible box with a sigmoid.

    Each coordinate maps as ``lo + (hi - lo) * sigmoid(raw)``; the result
    is strictly inside the bounds for finite input (up to float
    saturation for ``|raw|`` beyond ~36).
    """
    theta_raw = np.asarray(theta_raw, dtype=float)
    K = bounds.cell_count
    if theta_raw.shape != (param_dim(K),):
        raise ValueError(f"expected raw vector of length {param_dim(K)}, got shape {theta_raw.shape}")
    return from_unit(sigmoid(theta_raw), bounds)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_geometry(g: FreewayGeometry, theta: TrafficParams, max_downstream_speed: float | None = None
                      ) -> ValidationReport:
    """Check the CFL condition: no wave crosses a full cell in one step.

    ``max_downstream_speed`` optionally checks the last cell's discharge
    speed too, which is a boundary input rather than a parameter.
    """
    if theta.cell_count != g.cell_count:
        return ValidationReport((f"parameter cell count {theta.cell_count} != geometry cell count {g.cell_count}",))
    out = []
    dt, L = g.sim_step, g.cell_lengths
    for k in range(g.cell_count - 1):
        if theta.free_flow_speeds[k] * dt > L[k]:
            out.append(f"cell {k + 1}: v*dt = {theta.free_flow_speeds[k] * dt:.6g} km > length {L[k]:.6g} km")
    for k in range(g.cell_count):
        if theta.wave_speeds[k] * dt > L[k]:
            out.append(f"cell {k + 1}: w*dt = {theta.wave_speeds[k] * dt:.6g} km > length {L[k]:.6g} km")
    if max_downstream_speed is not None and max_downstream_speed * dt > L[-1]:
        out.append(f"cell {g.cell_count}: downstream speed*dt = {max_downstream_speed * dt:.6g} km > length {L[-1]:.6g} km")
    return ValidationReport(tuple(out))


@dataclass(frozen=True)
class BoundaryConditions:
    """Per-period inputs: initial densities and the ``K x (T+1)`` input series."""

    initial_densities: np.ndarray
    demands: np.ndarray
    mainline_ratios: np.ndarray
    downstream_speed: np.ndarray

    def __post_init__(self):
        for name in ("initial_densities", "demands", "mainline_ratios", "downstream_speed"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        K = self.initial_densities.size
        if self.demands.ndim != 2 or self.demands.shape[0] != K:
            raise ValueError(f"demands must be K x (T+1) with K={K}")
        if self.mainline_ratios.shape != self.demands.shape:
            raise ValueError("mainline_ratios must match demands in shape")
        if self.downstream_speed.shape != (self.demands.shape[1],):
            raise ValueError("downstream_speed must have length T+1")
        arrays = (self.initial_densities, self.demands, self.mainline_ratios, self.downstream_speed)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("boundary conditions must be finite")
        if np.any(self.initial_densities < 0) or np.any(self.demands < 0) or np.any(self.downstream_speed < 0):
            raise ValueError("densities, demands and downstream speeds must be nonnegative")
        if np.any(self.mainline_ratios < 0) or np.any(self.mainline_ratios > 1):
            raise ValueError("mainline ratios must lie in [0, 1]")

    @property
    def cell_count(self) -> int:
        return int(self.initial_densities.size)

    @property
    def horizon(self) -> int:
        return int(self.demands.shape[1] - 1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "initial_densities": self.initial_densities.tolist(),
            "demands": self.demands.tolist(),
            "mainline_ratios": self.mainline_ratios.tolist(),
            "downstream_speed": self.downstream_speed.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BoundaryConditions":
        return cls(d["initial_densities"], d["demands"], d["mainline_ratios"], d["downstream_speed"])

    def __eq__(self, other):
        if not isinstance(other, BoundaryConditions):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in ("initial_densities", "demands", "mainline_ratios", "downstream_speed"))

    __hash__ = None


@dataclass(frozen=True)
class TrafficState:
    densities: np.ndarray
    queues: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "densities", _frozen(self.densities))
        object.__setattr__(self, "queues", _frozen(self.queues))
        if self.densities.shape != self.queues.shape or self.densities.ndim != 1:
            raise ValueError("densities and queues must be 1-D arrays of equal length")

    def check(self, theta: TrafficParams, tol: float = 0.0) -> list[str]:
        """Invariant violations under ``theta`` (empty list when valid)."""
        out = []
        for k, (rho, cap) in enumerate(zip(self.densities, theta.jam_densities)):
            if rho < -tol or rho > cap + tol:
                out.append(f"cell {k + 1}: density {rho:.6g} outside [0, {cap:.6g}]")
        for k, q in enumerate(self.queues):
            if q < -tol:
                out.append(f"buffer {k + 1}: negative queue {q:.6g}")
        return out


class ObservationMask:
    """Binary indicator of observed (1) vs missing (0) measurement entries."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.dtype != bool:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("observation mask must be binary")
            arr = arr.astype(bool)
        arr = arr.copy()
        arr.setflags(write=False)
        self.bits = arr

    @classmethod
    def full(cls, shape) -> "ObservationMask":
        return cls(np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.bits.shape

    @property
    def missing_rate(self) -> float:
        return float(1.0 - self.bits.mean()) if self.bits.size else 0.0

    @property
    def is_full(self) -> bool:
        return bool(self.bits.all())

    def __eq__(self, other):
        return isinstance(other, ObservationMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __repr__(self):
        return f"ObservationMask(shape={self.shape}, missing_rate={self.missing_rate:.3f})"


@dataclass(frozen=True)
class MeasurementSeries:
    """Aggregated detector output, each channel ``K x (T/m)``.

    ``mask`` covers the stacked payload ``[ramp; mainline; speed]`` of
    shape ``3K x (T/m)``, i.e. one column is the observation vector y(t).
    """

    ramp_flows: np.ndarray
    mainline_flows: np.ndarray
    speeds: np.ndarray
    mask: ObservationMask = None

    def __post_init__(self):
        for name in ("ramp_flows", "mainline_flows", "speeds"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        shape = self.ramp_flows.shape
        if self.ramp_flows.ndim != 2 or self.mainline_flows.shape != shape or self.speeds.shape != shape:
            raise ValueError("measurement channels must share one K x (T/m) shape")
        full_shape = (3 * shape[0], shape[1])
        mask = self.mask
        if mask is None:
            mask = ObservationMask.full(full_shape)
        elif not isinstance(mask, ObservationMask):
            mask = ObservationMask(mask)
        if mask.shape != full_shape:
            raise ValueError(f"mask shape {mask.shape} != payload shape {full_shape}")
        object.__setattr__(self, "mask", mask)
        payload = self.stacked()
        observed = payload[mask.bits]
        if np.any(~np.isfinite(observed)) or np.any(observed < 0):
            raise ValueError("observed measurements must be finite and nonnegative")

    @classmethod
    def from_stacked(cls, payload: np.ndarray, mask=None) -> "MeasurementSeries":
        payload = np.asarray(payload, dtype=float)
        K = payload.shape[0] // 3
        if payload.shape[0] != 3 * K:
            raise ValueError("stacked payload must have 3K rows")
        return cls(payload[:K], payload[K:2 * K], payload[2 * K:], mask)

    @property
    def cell_count(self) -> int:
        return int(self.ramp_flows.shape[0])

    @property
    def n_obs(self) -> int:
        return int(self.ramp_flows.shape[1])

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.ramp_flows, self.mainline_flows, self.speeds], axis=0)

    def with_mask(self, mask, zero_fill: bool = True) -> "MeasurementSeries":
        mask = mask if isinstance(mask, ObservationMask) else ObservationMask(mask)
        payload = self.stacked()
        if zero_fill:
            payload = np.where(mask.bits, payload, 0.0)
        return MeasurementSeries.from_stacked(payload, mask)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ramp_flows": self.ramp_flows.tolist(),
            "mainline_flows": self.mainline_flows.tolist(),
            "speeds": self.speeds.tolist(),
            "mask": self.mask.bits.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MeasurementSeries":
        return cls(d["ramp_flows"], d["mainline_flows"], d["speeds"], ObservationMask(np.array(d["mask"])))

    def __eq__(self, other):
        if not isinstance(other, MeasurementSeries):
            return NotImplemented
        return (np.array_equal(self.stacked(), other.stacked()) and self.mask == other.mask)

    __hash__ = None


@dataclass(frozen=True)
class PeriodDataset:
    period_id: str
    boundary: BoundaryConditions
    measurements: MeasurementSeries
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        if self.boundary.cell_count != self.measurements.cell_count:
            raise ValueError("boundary and measurements disagree on the cell count")

    def check_geometry(self, g: FreewayGeometry) -> None:
        if self.boundary.cell_count != g.cell_count:
            raise ValueError(f"period {self.period_id}: {self.boundary.cell_count} cells, geometry has {g.cell_count}")
        if self.boundary.horizon != g.horizon:
            raise ValueError(f"period {self.period_id}: horizon {self.boundary.horizon} != geometry horizon {g.horizon}")
        if self.measurements.n_obs != g.n_obs:
            raise ValueError(f"period {self.period_id}: {self.measurements.n_obs} observation steps, expected {g.n_obs}")

    def with_split(self, tag: str) -> "PeriodDataset":
        return PeriodDataset(self.period_id, self.boundary, self.measurements, tag)

    def with_measurements(self, measurements: MeasurementSeries) -> "PeriodDataset":
        return PeriodDataset(self.period_id, self.boundary, measurements, self.split_tag)

    def to_dict(self) -> dict[str, Any]:
        return {"period_id": self.period_id, "boundary": self.boundary.to_dict(),
                "measurements": self.measurements.to_dict(), "split_tag": self.split_tag}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PeriodDataset":
        return cls(d["period_id"], BoundaryConditions.from_dict(d["boundary"]),
                   MeasurementSeries.from_dict(d["measurements"]), d["split_tag"])
