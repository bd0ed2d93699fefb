"""Cell transmission model with capacity drop and the loop-detector observation model.

This is the reference simulator: one period at a time, vectorized over
cells, with a full trace.  Batched simulation for training and search
lives in :mod:`trafficcal._kernel` and is checked against this module.

Off-ramp accounting comes in two modes.  ``"consistent"`` (default)
treats ``min{...}`` as the total cell outflow, with a fraction ``eta``
continuing downstream and ``1 - eta`` leaving at the off-ramp.
``"paper-literal"`` removes ``f_k / (1 - eta_k)`` from cell ``k`` exactly
as the printed density update reads; it needs ``eta_k < 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (BoundaryConditions, FreewayGeometry, MeasurementSeries, ObservationMask, TrafficParams,
                     TrafficState)

OFFRAMP_MODES = ("consistent", "paper-literal")
LITERAL_ETA_MARGIN = 1e-6
# density excursions beyond this (relative to jam density) are reported as CFL failures
ROUNDOFF_TOL = 1e-9


class SimulationError(RuntimeError):
    """A density update left [0, rho_max] by more than round-off."""

    def __init__(self, message: str, t: int | None = None, k: int | None = None):
        super().__init__(message)
        self.t = t
        self.k = k


def _check_mode(mode: str) -> None:
    if mode not in OFFRAMP_MODES:
        raise ValueError(f"unknown off-ramp mode {mode!r}; choose from {OFFRAMP_MODES}")


# -- per-cell reference functions -------------------------------------------------
# k is 0-based throughout the code; messages use 1-based cell numbers.

def effective_capacity(k: int, rho_k: float, theta: TrafficParams) -> float:
    """Nominal capacity at or below critical density, dropped capacity above."""
    qn = float(theta.nominal_capacities[k])
    crit = qn / float(theta.free_flow_speeds[k])
    return qn if rho_k <= crit else float(theta.dropped_capacities[k])


def ramp_flow(k: int, state: TrafficState, boundary: BoundaryConditions, t: int, theta: TrafficParams,
              g: FreewayGeometry) -> float:
    """Flow from buffer ``k`` into cell ``k``."""
    demand = float(boundary.demands[k, t]) + float(state.queues[k]) / g.sim_step
    supply = float(theta.wave_speeds[k]) * (float(theta.jam_densities[k]) - float(state.densities[k]))
    return min(demand, float(g.buffer_capacities[k]), supply)


def cell_flow(k: int, state: TrafficState, boundary: BoundaryConditions, t: int, theta: TrafficParams,
              g: FreewayGeometry, r_next: float | None = None) -> float:
    """Mainline flow leaving cell ``k`` towards ``k + 1``.

    On-ramp inflow ``r_next`` into the receiving cell is served first; the
    remaining supply is clamped at zero.  The last cell discharges at the
    measured downstream speed.
    """
    K = g.cell_count
    rho = float(state.densities[k])
    if k == K - 1:
        return float(boundary.downstream_speed[t]) * rho
    if r_next is None:
        raise ValueError("r_next is required for cells upstream of the last one")
    send = float(theta.free_flow_speeds[k]) * rho
    receive = float(theta.wave_speeds[k + 1]) * (float(theta.jam_densities[k + 1]) - float(state.densities[k + 1]))
    receive = max(receive - r_next, 0.0)
    return float(boundary.mainline_ratios[k, t]) * min(send, effective_capacity(k, rho, theta), receive)


# -- vectorized step --------------------------------------------------------------

class HardOps:
    """Exact min / threshold operators of the CTM."""

    @staticmethod
    def min3(a, b, c):
        return np.minimum(np.minimum(a, b), c)

    @staticmethod
    def positive(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def capacity(rho, theta: TrafficParams):
        return np.where(rho <= theta.critical_densities, theta.nominal_capacities, theta.dropped_capacities)


@dataclass(frozen=True)
class StepFlows:
    """Flows at one time step.

    ``ramp`` is r_k, ``mainline`` is f_k (towards k+1, or out of the
    corridor for the last cell), ``outflow`` is everything leaving cell k
    including the off-ramp, ``speeds`` is the per-cell traffic speed.
    """

    ramp: np.ndarray
    mainline: np.ndarray
    outflow: np.ndarray
    speeds: np.ndarray


def compute_flows(rho, q, alpha, eta, v_down, theta: TrafficParams, g: FreewayGeometry, ops=HardOps,
                  mode: str = "consistent") -> StepFlows:
    dt = g.sim_step
    supply = theta.wave_speeds * (theta.jam_densities - rho)
    r = ops.min3(alpha + q / dt, g.buffer_capacities, supply)
    send = theta.free_flow_speeds * rho[:-1]
    cap = ops.capacity(rho[:-1], theta)
    receive = ops.positive(supply[1:] - r[1:])
    total = ops.min3(send, cap, receive)
    f = np.empty_like(rho)
    f[:-1] = eta[:-1] * total
    f[-1] = v_down * rho[-1]
    if mode == "consistent":
        out = np.empty_like(rho)
        out[:-1] = total
        out[-1] = f[-1]
        carried = out
    else:
        if np.any(eta >= 1.0 - LITERAL_ETA_MARGIN):
            raise ValueError("paper-literal off-ramp mode needs mainline ratios < 1")
        out = f / (1.0 - eta)
        carried = f
    free = np.append(theta.free_flow_speeds, v_down)
    with np.errstate(divide="ignore", invalid="ignore"):
        speeds = np.where(rho > 0, carried / np.where(rho > 0, rho, 1.0), free)
    return StepFlows(r, f, out, speeds)


def step(state: TrafficState, boundary: BoundaryConditions, t: int, theta: TrafficParams, g: FreewayGeometry,
         mode: str = "consistent", ops=HardOps, check: bool = True) -> tuple[TrafficState, StepFlows]:
    """Advance one step by flow conservation; returns the next state and the flows at ``t``."""
    _check_mode(mode)
    rho, q = state.densities, state.queues
    flows = compute_flows(rho, q, boundary.demands[:, t], boundary.mainline_ratios[:, t],
                          float(boundary.downstream_speed[t]), theta, g, ops, mode)
    inflow = flows.ramp.copy()
    inflow[1:] += flows.mainline[:-1]
    rho_next = rho + g.sim_step / g.cell_lengths * (inflow - flows.outflow)
    q_next = q + g.sim_step * (boundary.demands[:, t] - flows.ramp)
    if check:
        tol = ROUNDOFF_TOL * theta.jam_densities
        bad = np.flatnonzero((rho_next < -tol) | (rho_next > theta.jam_densities + tol))
        if bad.size:
            k = int(bad[0])
            raise SimulationError(
                f"t={t}, cell {k + 1}: density {rho_next[k]:.6g} leaves [0, {theta.jam_densities[k]:.6g}] "
                "(CFL condition violated?)", t=t, k=k)
    return TrafficState(rho_next, q_next), flows


@dataclass(frozen=True)
class SimulationTrace:
    """States for t = 0..T and flows for t = 0..T (flows at T feed the last detector window)."""

    densities: np.ndarray
    queues: np.ndarray
    ramp_inflows: np.ndarray
    intercell_flows: np.ndarray
    outflows: np.ndarray
    speeds: np.ndarray
    free_speeds: np.ndarray

    @property
    def horizon(self) -> int:
        return self.densities.shape[0] - 1

    def state(self, t: int) -> TrafficState:
        return TrafficState(self.densities[t], self.queues[t])

    def storage(self, lengths) -> np.ndarray:
        """Vehicles held in cells and buffers at each t."""
        return self.densities @ np.asarray(lengths) + self.queues.sum(axis=1)

    def scaled(self, c: float) -> "SimulationTrace":
        """Trace with every flow multiplied by ``c`` (speeds kept)."""
        return SimulationTrace(self.densities, self.queues, c * self.ramp_inflows, c * self.intercell_flows,
                               c * self.outflows, self.speeds, self.free_speeds)


def simulate(boundary: BoundaryConditions, theta: TrafficParams, g: FreewayGeometry, mode: str = "consistent",
             ops=HardOps, check: bool = True) -> SimulationTrace:
    _check_mode(mode)
    K, T = g.cell_count, g.horizon
    if boundary.cell_count != K or boundary.horizon != T:
        raise ValueError(f"boundary is {boundary.cell_count} cells x {boundary.horizon} steps, "
                         f"geometry expects {K} x {T}")
    if theta.cell_count != K:
        raise ValueError("parameter cell count does not match geometry")
    shape = (T + 1, K)
    dens, queues = np.empty(shape), np.empty(shape)
    ramp, main, out, spd, free = (np.empty(shape) for _ in range(5))
    state = TrafficState(boundary.initial_densities, np.zeros(K))
    for t in range(T + 1):
        dens[t], queues[t] = state.densities, state.queues
        if t < T:
            state, flows = step(state, boundary, t, theta, g, mode, ops, check)
        else:
            flows = compute_flows(state.densities, state.queues, boundary.demands[:, t],
                                  boundary.mainline_ratios[:, t], float(boundary.downstream_speed[t]),
                                  theta, g, ops, mode)
        ramp[t], main[t], out[t], spd[t] = flows.ramp, flows.mainline, flows.outflow, flows.speeds
        free[t, :-1] = theta.free_flow_speeds
        free[t, -1] = boundary.downstream_speed[t]
    return SimulationTrace(dens, queues, ramp, main, out, spd, free)


def conservation_residual(trace: SimulationTrace, boundary: BoundaryConditions, g: FreewayGeometry
                          ) -> tuple[float, float]:
    """(|inflow - outflow - change in storage|, cumulative inflow) over the horizon, in vehicles."""
    T, dt = trace.horizon, g.sim_step
    inflow = dt * boundary.demands[:, :T].sum()
    exits = trace.outflows[:T].copy()
    exits[:, :-1] -= trace.intercell_flows[:T, :-1]
    outflow = dt * exits.sum()
    storage = trace.storage(g.cell_lengths)
    return abs(inflow - outflow - (storage[-1] - storage[0])), float(inflow)


def observe(trace: SimulationTrace, g: FreewayGeometry) -> MeasurementSeries:
    """Aggregate a trace into detector windows of ``m`` steps.

    Window ``j`` averages steps ``j*m + 1 .. (j+1)*m``.  Flows are plain
    means; speed is the flow-weighted mean, or the free-flow speed when
    no vehicle passed during the window.
    """
    payload = observe_array(trace, g)
    return MeasurementSeries.from_stacked(payload, ObservationMask.full(payload.shape))


def observe_array(trace: SimulationTrace, g: FreewayGeometry) -> np.ndarray:
    """Stacked ``[ramp; mainline; speed]`` windows as a ``3K x T/m`` array."""
    m, T = g.obs_multiple, trace.horizon
    if T % m:
        raise ValueError(f"horizon {T} is not a multiple of the aggregation multiple {m}")
    n, K = T // m, trace.densities.shape[1]

    def windows(a):
        return a[1:].reshape(n, m, K)

    r = windows(trace.ramp_inflows).mean(axis=1)
    f_w = windows(trace.intercell_flows)
    f = f_w.mean(axis=1)
    fsum = f_w.sum(axis=1)
    fv = (f_w * windows(trace.speeds)).sum(axis=1)
    free = windows(trace.free_speeds).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(fsum > 0, fv / np.where(fsum > 0, fsum, 1.0), free)
    return np.concatenate([r.T, f.T, v.T], axis=0)
