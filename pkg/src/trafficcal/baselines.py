"""Optimization baselines: per-cell fundamental-diagram fitting and simulated annealing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .batch import BoundaryBatch, observe_batch
from .domain import (FreewayGeometry, MeasurementSeries, ParamBounds, PeriodDataset, TrafficParams, param_dim,
                     unit_to_vector)


# -- fundamental diagram fitting ---------------------------------------------------

@dataclass(frozen=True)
class FlowDensityCloud:
    """Per-cell ``(density, flow)`` points; ``points[k]`` is an ``(n_k, 2)`` array."""

    points: tuple[np.ndarray, ...]

    def __post_init__(self):
        pts = []
        for k, p in enumerate(self.points):
            p = np.asarray(p, dtype=float).reshape(-1, 2)
            if not np.all(np.isfinite(p)):
                raise ValueError(f"cell {k + 1}: non-finite points")
            if np.any(p[:, 0] <= 0):
                raise ValueError(f"cell {k + 1}: densities must be positive")
            p = p.copy()
            p.setflags(write=False)
            pts.append(p)
        object.__setattr__(self, "points", tuple(pts))

    @property
    def cell_count(self) -> int:
        return len(self.points)

    @classmethod
    def from_measurements(cls, meas: MeasurementSeries, min_speed: float = 1e-6) -> "FlowDensityCloud":
        """Density is ``f / v`` per window; windows with a masked flow or speed, or near-zero speed, are dropped."""
        f, v = meas.mainline_flows, meas.speeds
        ok = meas.mask.bits[meas.cell_count:2 * meas.cell_count] & meas.mask.bits[2 * meas.cell_count:]
        pts = []
        for k in range(meas.cell_count):
            sel = ok[k] & (v[k] > min_speed) & (f[k] > 0)
            pts.append(np.column_stack([f[k, sel] / v[k, sel], f[k, sel]]))
        return cls(tuple(pts))

    @classmethod
    def merge(cls, clouds: Sequence["FlowDensityCloud"]) -> "FlowDensityCloud":
        K = clouds[0].cell_count
        return cls(tuple(np.concatenate([c.points[k] for c in clouds]) for k in range(K)))


@dataclass(frozen=True)
class FDFit:
    free_flow_speed: float
    nominal_capacity: float
    jam_density: float
    wave_speed: float
    flags: tuple[str, ...] = ()

    @property
    def critical_density(self) -> float:
        return self.nominal_capacity / self.free_flow_speed


def _triangular_lsq(rho, q):
    """Best split over sorted densities: (sse, v, a, b) with free ``q = v*rho`` and congested ``q = a + b*rho``."""
    order = np.argsort(rho, kind="stable")
    r, y = rho[order], q[order]
    n = r.size
    best = None
    # the free branch needs one point, the congested line two distinct densities
    for s in range(1, n - 1):
        rf, yf, rc, yc = r[:s], y[:s], r[s:], y[s:]
        if rc[-1] - rc[0] <= 0:
            continue
        v = float(rf @ yf / (rf @ rf))
        b, a = np.polyfit(rc, yc, 1)
        if b >= 0 or v <= b:
            continue
        sse = float(np.sum((yf - v * rf) ** 2) + np.sum((yc - a - b * rc) ** 2))
        if best is None or sse < best[0] - 1e-12 * max(1.0, abs(best[0])):
            best = (sse, v, float(a), float(b))
    return best


def fit_fd(cloud: FlowDensityCloud, bounds: ParamBounds) -> list[FDFit]:
    """Two-branch triangular least-squares fit per cell, clipped into ``bounds``.

    The changepoint is chosen over every split of the density-sorted
    points.  Flags: ``insufficient-points``, ``uninformative-congested``
    (no usable congested branch, so its parameters take bound midpoints),
    ``clipped``.  Cell ``K`` carries no calibrated speed or capacity; its
    fitted values are reported but only ``jam_density`` and ``wave_speed``
    enter a parameter vector.
    """
    K = bounds.cell_count
    if cloud.cell_count != K:
        raise ValueError(f"cloud has {cloud.cell_count} cells, bounds have {K}")
    lo, hi, mid = bounds.lower, bounds.upper, bounds.midpoint()
    fits = []
    for k in range(K):
        kk = min(k, K - 2)  # the last cell borrows speed/capacity bounds from its neighbor
        vb = (lo.free_flow_speeds[kk], hi.free_flow_speeds[kk])
        qb = (lo.nominal_capacities[kk], hi.nominal_capacities[kk])
        rb = (lo.jam_densities[k], hi.jam_densities[k])
        wb = (lo.wave_speeds[k], hi.wave_speeds[k])
        pts = cloud.points[k]
        flags = []
        if pts.shape[0] < 3:
            flags.append("insufficient-points")
        rho, q = pts[:, 0], pts[:, 1]
        fit = _triangular_lsq(rho, q) if pts.shape[0] >= 3 else None
        if fit is None:
            if pts.shape[0]:
                v = float(rho @ q / (rho @ rho))
                qn = float(q.max())
            else:
                v, qn = float(mid.free_flow_speeds[kk]), float(mid.nominal_capacities[kk])
            rmax, w = float(mid.jam_densities[k]), float(mid.wave_speeds[k])
            flags.append("uninformative-congested")
        else:
            _, v, a, b = fit
            w = -b
            rmax = a / w
            rc = a / (v - b)
            qn = v * rc
        raw = (v, qn, rmax, w)
        v, qn = float(np.clip(v, *vb)), float(np.clip(qn, *qb))
        rmax, w = float(np.clip(rmax, *rb)), float(np.clip(w, *wb))
        if qn / v >= rmax:
            rmax = min(float(rb[1]), qn / v * (1 + 1e-6))
            qn = min(qn, v * rmax * (1 - 1e-6))
        if (v, qn, rmax, w) != raw:
            flags.append("clipped")
        fits.append(FDFit(v, qn, rmax, w, tuple(flags)))
    return fits


def fd_params(fits: Sequence[FDFit]) -> TrafficParams:
    """Parameter vector from per-cell fits; dropped capacity equals nominal (not identifiable from an FD)."""
    K = len(fits)
    v = np.array([f.free_flow_speed for f in fits[:K - 1]])
    qn = np.array([f.nominal_capacity for f in fits[:K - 1]])
    return TrafficParams(v, qn, qn.copy(), np.array([f.jam_density for f in fits]),
                         np.array([f.wave_speed for f in fits]))


def calibrate_fd(periods: Sequence[PeriodDataset], bounds: ParamBounds) -> dict[str, tuple[TrafficParams, list[FDFit]]]:
    return {p.period_id: (fd_params(fits := fit_fd(FlowDensityCloud.from_measurements(p.measurements), bounds)), fits)
            for p in periods}


# -- simulation error --------------------------------------------------------------

def channel_scales(meas: MeasurementSeries) -> np.ndarray:
    """Mean observed magnitude per channel (ramp, mainline, speed); 1 where a channel has no signal."""
    K = meas.cell_count
    x, bits = meas.stacked(), meas.mask.bits
    out = np.ones(3)
    for ch in range(3):
        vals = np.abs(x[ch * K:(ch + 1) * K][bits[ch * K:(ch + 1) * K]])
        if vals.size and vals.mean() > 0:
            out[ch] = vals.mean()
    return out


def _error_parts(meas: MeasurementSeries):
    K = meas.cell_count
    scale = np.repeat(channel_scales(meas), K)[:, None]
    bits = meas.mask.bits
    return meas.stacked(), bits, scale, max(int(bits.sum()), 1)


def simulation_errors(sim: np.ndarray, meas: MeasurementSeries) -> np.ndarray:
    """Vectorized :func:`simulation_error` for simulated payloads ``(N, 3K, n)``."""
    x, bits, scale, cnt = _error_parts(meas)
    d = np.where(bits, (sim - x) / scale, 0.0)
    return (d ** 2).reshape(d.shape[0], -1).sum(axis=1) / cnt


def simulation_error(theta: TrafficParams, period: PeriodDataset, g: FreewayGeometry,
                     mode: str = "consistent") -> float:
    """Mean squared error over observed entries, each channel scaled by its mean observed magnitude."""
    sim = observe_batch([period.boundary], theta.to_vector()[None], g, mode=mode)
    return float(simulation_errors(sim, period.measurements)[0])


# -- simulated annealing -----------------------------------------------------------

@dataclass(frozen=True)
class AnnealingConfig:
    """Temperatures are relative to the starting error of each chain.

    ``cooling`` multiplies the temperature once per ``epoch_length``
    iterations; ``step_scale`` is the proposal standard deviation in the
    unit cube (scalar or one value per parameter).
    """

    initial_temperature: float = 0.05
    cooling: float = 0.8
    epoch_length: int = 100
    step_scale: float | tuple = 0.05
    min_step_scale: float = 0.005
    iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.initial_temperature > 0:
            raise ValueError("initial temperature must be positive")
        if not 0 < self.cooling < 1:
            raise ValueError("cooling must lie in (0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.epoch_length < 1:
            raise ValueError("epoch_length must be positive")
        if np.any(np.asarray(self.step_scale) <= 0):
            raise ValueError("step scale must be positive")


@dataclass
class AnnealingResult:
    params: dict[str, TrafficParams]
    best_error: dict[str, float]
    trace: dict[str, np.ndarray] = field(default_factory=dict)  # best-seen error per iteration (0 = start)
    accept_rate: dict[str, float] = field(default_factory=dict)
    method: str = "annealing"


def reflect_unit(x: np.ndarray) -> np.ndarray:
    """Fold values back into [0, 1] by mirror reflection at both ends."""
    y = np.mod(x, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def anneal_unit(objective: Callable[[np.ndarray], np.ndarray], start: np.ndarray, config: AnnealingConfig,
                rng: np.random.Generator):
    """Lockstep Metropolis chains in the unit cube.

    ``objective`` maps ``(N, P)`` unit points to ``N`` errors (chain ``i``
    is always row ``i``).  Returns (best points, best errors, best-error
    trace ``(iterations+1, N)``, acceptance rates).
    """
    x = np.array(start, dtype=float)
    N, P = x.shape
    step = np.broadcast_to(np.asarray(config.step_scale, dtype=float), (P,))
    e = np.asarray(objective(x), dtype=float)
    best_x, best_e = x.copy(), e.copy()
    temp0 = config.initial_temperature * np.maximum(e, 1e-12)
    trace = np.empty((config.iterations + 1, N))
    trace[0] = best_e
    accepted = np.zeros(N)
    for it in range(config.iterations):
        frac = config.cooling ** (it // config.epoch_length)
        temp = temp0 * frac
        sigma = np.maximum(step * frac, config.min_step_scale)
        cand = reflect_unit(x + sigma * rng.standard_normal((N, P)))
        ec = np.asarray(objective(cand), dtype=float)
        with np.errstate(over="ignore"):
            ok = (ec <= e) | (rng.uniform(size=N) < np.exp(-(ec - e) / temp))
        x[ok], e[ok] = cand[ok], ec[ok]
        accepted += ok
        better = e < best_e
        best_x[better], best_e[better] = x[better], e[better]
        trace[it + 1] = best_e
    rate = accepted / max(config.iterations, 1)
    return best_x, best_e, trace, rate


def simulated_annealing(periods: Sequence[PeriodDataset], config: AnnealingConfig, bounds: ParamBounds,
                        g: FreewayGeometry, mode: str = "consistent", objective=None) -> AnnealingResult:
    """Independent annealing chain per period, all simulated together in one batch per iteration.

    Chains start at the bounds midpoint.  ``objective`` replaces the
    simulation error for testing: it receives ``(N, P)`` unit points and
    returns ``N`` errors.
    """
    if not periods:
        return AnnealingResult({}, {})
    K, N, P = g.cell_count, len(periods), param_dim(g.cell_count)
    if bounds.cell_count != K:
        raise ValueError("bounds and geometry disagree on the cell count")
    if objective is None:
        bb = BoundaryBatch.from_list([p.boundary for p in periods])
        parts = [_error_parts(p.measurements) for p in periods]
        x = np.stack([a[0] for a in parts])
        bits = np.stack([a[1] for a in parts])
        scale = np.stack([a[2] for a in parts])
        cnt = np.array([a[3] for a in parts], dtype=float)

        def objective(u):
            sim = observe_batch(bb, unit_to_vector(u, bounds), g, mode=mode)
            d = np.where(bits, (sim - x) / scale, 0.0)
            return (d ** 2).reshape(N, -1).sum(axis=1) / cnt

    rng = np.random.default_rng(config.seed)
    start = np.full((N, P), 0.5)
    best_u, best_e, trace, rate = anneal_unit(objective, start, config, rng)
    thetas = unit_to_vector(best_u, bounds)
    ids = [p.period_id for p in periods]
    return AnnealingResult({pid: TrafficParams.from_vector(t, K) for pid, t in zip(ids, thetas)},
                           {pid: float(v) for pid, v in zip(ids, best_e)},
                           {pid: trace[:, i].copy() for i, pid in enumerate(ids)},
                           {pid: float(r) for pid, r in zip(ids, rate)})
