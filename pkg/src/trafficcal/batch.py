"""Batched simulation front end over the compiled kernel."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernel
from .ctm import OFFRAMP_MODES, LITERAL_ETA_MARGIN, SimulationError
from .domain import BoundaryConditions, FreewayGeometry, param_dim, split_groups


@dataclass(frozen=True)
class BoundaryBatch:
    initial_densities: np.ndarray  # (P, K)
    demands: np.ndarray  # (P, K, T+1)
    mainline_ratios: np.ndarray  # (P, K, T+1)
    downstream_speed: np.ndarray  # (P, T+1)

    @classmethod
    def from_list(cls, boundaries: Sequence[BoundaryConditions]) -> "BoundaryBatch":
        if not boundaries:
            raise ValueError("empty boundary list")
        return cls(np.stack([b.initial_densities for b in boundaries]),
                   np.ascontiguousarray(np.stack([b.demands for b in boundaries])),
                   np.ascontiguousarray(np.stack([b.mainline_ratios for b in boundaries])),
                   np.ascontiguousarray(np.stack([b.downstream_speed for b in boundaries])))

    def __len__(self):
        return self.initial_densities.shape[0]

    def subset(self, idx) -> "BoundaryBatch":
        idx = np.asarray(idx)
        return BoundaryBatch(self.initial_densities[idx], self.demands[idx], self.mainline_ratios[idx],
                             self.downstream_speed[idx])


def observe_batch(boundaries: BoundaryBatch | Sequence[BoundaryConditions], thetas: np.ndarray,
                  g: FreewayGeometry, bidx=None, tau: float = 0.0, beta: float = 0.0,
                  mode: str = "consistent", check: bool = True) -> np.ndarray:
    """Simulate and aggregate every row of ``thetas`` (flattened parameters).

    Returns ``(N, 3K, T/m)``.  With ``tau = beta = 0`` this is the exact
    CTM; positive values switch on the relaxed min and capacity switch.
    """
    if mode not in OFFRAMP_MODES:
        raise ValueError(f"unknown off-ramp mode {mode!r}")
    bb = boundaries if isinstance(boundaries, BoundaryBatch) else BoundaryBatch.from_list(boundaries)
    K, T = g.cell_count, g.horizon
    if bb.demands.shape[1:] != (K, T + 1):
        raise ValueError("boundary batch does not match geometry")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != param_dim(K):
        raise ValueError(f"parameter rows must have length {param_dim(K)}")
    if bidx is None:
        if thetas.shape[0] != len(bb):
            raise ValueError("need one parameter row per boundary when bidx is omitted")
        bidx = np.arange(len(bb))
    bidx = np.ascontiguousarray(bidx, dtype=np.int64)
    literal = mode == "paper-literal"
    if literal and np.any(bb.mainline_ratios >= 1.0 - LITERAL_ETA_MARGIN):
        raise ValueError("paper-literal off-ramp mode needs mainline ratios < 1")
    v, qn, qd, rm, w = (np.ascontiguousarray(a) for a in split_groups(thetas, K))
    obs, fail = _kernel.simulate_observe(
        bb.initial_densities, bb.demands, bb.mainline_ratios, bb.downstream_speed, bidx,
        v, qn, qd, rm, w, np.ascontiguousarray(g.cell_lengths), np.ascontiguousarray(g.buffer_capacities),
        g.sim_step, g.obs_multiple, float(tau), float(beta), literal, bool(check))
    if check:
        bad = np.flatnonzero(fail[:, 0] >= 0)
        if bad.size:
            n = int(bad[0])
            t, k = int(fail[n, 0]), int(fail[n, 1])
            raise SimulationError(f"row {n}: density left [0, rho_max] at t={t}, cell {k + 1} "
                                  "(CFL condition violated?)", t=t, k=k)
    return obs
