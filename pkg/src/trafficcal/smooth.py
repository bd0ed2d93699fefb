"""Relaxed CTM for training, and finite-difference parameter Jacobians.

The hard minima of the flow equations become log-sum-exp soft minima
with temperature ``tau`` (veh/h), the zero clamp on receiving supply
becomes a softplus of the same scale, and the capacity-drop switch a
sigmoid of sharpness ``beta`` (per veh/km).  As ``tau -> 0`` and
``beta -> inf`` the relaxed trace converges to the exact one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ctm
from .batch import BoundaryBatch, observe_batch
from .domain import BoundaryConditions, FreewayGeometry, ParamBounds, TrafficParams, sigmoid, split_groups


@dataclass(frozen=True)
class SmoothingConfig:
    tau: float = 10.0
    beta: float = 1.0
    h: float = 1e-4

    def __post_init__(self):
        if not (self.tau > 0 and self.beta > 0 and self.h > 0):
            raise ValueError("tau, beta and h must be strictly positive")


def softmin(values, tau: float) -> float:
    """``-tau * log(sum(exp(-x / tau)))`` with a max shift; lies in ``[min - tau*log(n), min]``."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("softmin of an empty list")
    m = x.min()
    return float(m - tau * np.log(np.exp(-(x - m) / tau).sum()))


def softmin_weights(values, tau: float) -> np.ndarray:
    """Gradient of :func:`softmin`: softmax of ``-x / tau``."""
    x = np.asarray(values, dtype=float)
    e = np.exp(-(x - x.min()) / tau)
    return e / e.sum()


def softplus(x, tau: float):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + tau * np.log1p(np.exp(-np.abs(x) / tau))


def smooth_capacity(rho, theta: TrafficParams, beta: float, k: int | None = None):
    """Sigmoid blend between dropped and nominal capacity around critical density.

    With ``k`` given, ``rho`` is the density of cell ``k``; otherwise
    ``rho`` covers cells ``1..K-1``.
    """
    sl = slice(None) if k is None else k
    qn, qd = theta.nominal_capacities[sl], theta.dropped_capacities[sl]
    crit = qn / theta.free_flow_speeds[sl]
    z = sigmoid(beta * (crit - np.asarray(rho, dtype=float)))
    out = qd + (qn - qd) * z
    return float(out) if np.ndim(out) == 0 else out


class SmoothOps:
    """Relaxed operators plugged into :func:`trafficcal.ctm.step`."""

    def __init__(self, cfg: SmoothingConfig):
        self.cfg = cfg

    def min3(self, a, b, c):
        tau = self.cfg.tau
        a, b, c = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(c, float))
        m = np.minimum(np.minimum(a, b), c)
        s = np.exp(-(a - m) / tau) + np.exp(-(b - m) / tau) + np.exp(-(c - m) / tau)
        return m - tau * np.log(s)

    def positive(self, x):
        return softplus(x, self.cfg.tau)

    def capacity(self, rho, theta):
        return smooth_capacity(rho, theta, self.cfg.beta)


def simulate_smooth(boundary: BoundaryConditions, theta: TrafficParams, g: FreewayGeometry,
                    cfg: SmoothingConfig = SmoothingConfig(), mode: str = "consistent") -> ctm.SimulationTrace:
    """Relaxed counterpart of :func:`trafficcal.ctm.simulate`.

    Relaxed flows may dip below zero by at most ``tau*log(3)``, so the
    strict density-bound check of the exact simulator is not applied.
    """
    return ctm.simulate(boundary, theta, g, mode=mode, ops=SmoothOps(cfg), check=False)


@dataclass(frozen=True)
class JacobianResult:
    """``matrix[i, j] = d obs_i / d theta_j``, obs flattened row-major from ``3K x T/m``."""

    matrix: np.ndarray
    one_sided: np.ndarray  # per parameter, True where a bound forced a one-sided difference
    steps: np.ndarray

    @property
    def flagged(self) -> bool:
        return bool(self.one_sided.any())


def _physical_limits(theta_vec: np.ndarray, bounds: ParamBounds | None, K: int):
    if bounds is None:
        return np.zeros_like(theta_vec), np.full_like(theta_vec, np.inf)
    lo = bounds.lower.to_vector().copy()
    hi = bounds.upper.to_vector().copy()
    _, qn, qd_hi, _, _ = split_groups(hi, K)
    qd_hi[:] = np.minimum(qd_hi, split_groups(theta_vec, K)[1])
    return lo, hi


def param_jacobian(boundary: BoundaryConditions, theta: TrafficParams, g: FreewayGeometry,
                   cfg: SmoothingConfig = SmoothingConfig(), bounds: ParamBounds | None = None,
                   mode: str = "consistent", h: float | None = None) -> JacobianResult:
    """Central differences of the relaxed observations, one parameter at a time.

    Each parameter moves by ``h * |theta_j|``.  Where that would leave the
    bounds (or push a dropped capacity above its nominal one) a one-sided
    difference is used and flagged.
    """
    K = g.cell_count
    x = theta.to_vector()
    n = x.size
    step = (cfg.h if h is None else h) * np.abs(x)
    lo, hi = _physical_limits(x, bounds, K)
    up_ok = x + step <= hi
    down_ok = x - step >= lo
    rows = [x]
    for j in range(n):
        e = np.zeros(n)
        e[j] = step[j]
        rows.append(x + e)
        rows.append(x - e)
    obs = observe_batch([boundary], np.array(rows), g, bidx=np.zeros(len(rows), dtype=np.int64),
                        tau=cfg.tau, beta=cfg.beta, mode=mode, check=False)
    flat = obs.reshape(len(rows), -1)
    base = flat[0]
    J = np.empty((flat.shape[1], n))
    one_sided = np.zeros(n, dtype=bool)
    for j in range(n):
        plus, minus = flat[1 + 2 * j], flat[2 + 2 * j]
        if up_ok[j] and down_ok[j]:
            J[:, j] = (plus - minus) / (2 * step[j])
        elif up_ok[j]:
            J[:, j] = (plus - base) / step[j]
            one_sided[j] = True
        elif down_ok[j]:
            J[:, j] = (base - minus) / step[j]
            one_sided[j] = True
        else:
            raise ValueError(f"parameter {j} cannot move by {step[j]:.3g} in either direction within bounds")
    return JacobianResult(J, one_sided, step)


def jacobian_batch(boundaries: BoundaryBatch, thetas: np.ndarray, g: FreewayGeometry,
                   cfg: SmoothingConfig = SmoothingConfig(), mode: str = "consistent") -> tuple[np.ndarray, np.ndarray]:
    """Observations and central-difference Jacobians for many periods at once.

    Returns ``(obs[B, D], jac[B, D, P])`` with ``D = 3K*T/m``.  Intended for
    parameters strictly inside their bounds (as produced by the encoder),
    so no one-sided fallback is needed.
    """
    thetas = np.atleast_2d(thetas)
    B, P = thetas.shape
    step = cfg.h * np.abs(thetas)
    eye = np.eye(P)
    rows = np.concatenate([thetas[:, None, :],
                           thetas[:, None, :] + step[:, None, :] * eye,
                           thetas[:, None, :] - step[:, None, :] * eye], axis=1)  # (B, 1+2P, P)
    bidx = np.repeat(np.arange(B), 1 + 2 * P)
    obs = observe_batch(boundaries, rows.reshape(-1, P), g, bidx=bidx, tau=cfg.tau, beta=cfg.beta,
                        mode=mode, check=False)
    flat = obs.reshape(B, 1 + 2 * P, -1)
    jac = (flat[:, 1:1 + P] - flat[:, 1 + P:]) / (2 * step[:, :, None])
    return flat[:, 0], np.transpose(jac, (0, 2, 1))
