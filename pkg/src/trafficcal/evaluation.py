"""Evaluation metrics and space-time heatmaps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .batch import observe_batch
from .domain import FreewayGeometry, MeasurementSeries, PeriodDataset, TrafficParams

METRIC_COLUMNS = ("period_id", "rmse_speed", "rmse_flow", "rmse_density", "mre_speed", "mre_flow")
CONGESTION_SPEED = 60.0  # km/h


def derived_density(flows: np.ndarray, speeds: np.ndarray) -> np.ndarray:
    """``f / v``; zero where the speed is not positive."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(speeds > 0, flows / np.where(speeds > 0, speeds, 1.0), 0.0)


def _rmse(a, b, sel):
    return float(np.sqrt(np.mean((a[sel] - b[sel]) ** 2))) if sel.any() else float("nan")


def _mre(sim, ref, sel):
    sel = sel & (np.abs(ref) > 0)
    return float(np.mean(np.abs(sim[sel] - ref[sel]) / np.abs(ref[sel]))) if sel.any() else float("nan")


@dataclass(frozen=True)
class PeriodMetrics:
    period_id: str
    rmse_speed: float
    rmse_flow: float
    rmse_density: float
    mre_speed: float
    mre_flow: float
    congestion_agreement: float

    def row(self):
        return [self.period_id] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


def period_metrics(period_id: str, simulated: np.ndarray, measured: MeasurementSeries,
                   congestion_speed: float = CONGESTION_SPEED) -> PeriodMetrics:
    """Errors of a simulated payload against the measurements, masked entries excluded.

    Density compares ``f/v`` of both sides where flow and speed are
    observed.  Congestion agreement is the share of observed speed
    entries on which both sides agree about ``v < congestion_speed``.
    """
    K = measured.cell_count
    bits = measured.mask.bits
    sf, ss = simulated[K:2 * K], simulated[2 * K:]
    mf, ms = measured.mainline_flows, measured.speeds
    bf, bs = bits[K:2 * K], bits[2 * K:]
    bd = bf & bs
    dens_sim, dens_ref = derived_density(sf, ss), derived_density(mf, ms)
    agree = float(np.mean((ss[bs] < congestion_speed) == (ms[bs] < congestion_speed))) if bs.any() else float("nan")
    return PeriodMetrics(period_id, _rmse(ss, ms, bs), _rmse(sf, mf, bf), _rmse(dens_sim, dens_ref, bd),
                         _mre(ss, ms, bs), _mre(sf, mf, bf), agree)


@dataclass
class Evaluation:
    periods: list[PeriodMetrics]
    simulated: dict[str, np.ndarray]
    missing: list[str]

    def aggregate(self) -> dict[str, float]:
        """Pooled over periods: RMSE by root-mean of squared per-period values, MRE and agreement by mean."""
        out = {}
        for c in METRIC_COLUMNS[1:] + ("congestion_agreement",):
            vals = np.array([getattr(m, c) for m in self.periods], dtype=float)
            vals = vals[np.isfinite(vals)]
            if not vals.size:
                out[c] = float("nan")
            elif c.startswith("rmse"):
                out[c] = float(np.sqrt(np.mean(vals ** 2)))
            else:
                out[c] = float(np.mean(vals))
        return out


def evaluate(params: Mapping[str, TrafficParams], periods: Sequence[PeriodDataset], g: FreewayGeometry,
             mode: str = "consistent") -> Evaluation:
    """Simulate with the exact CTM for every period that has parameters; the rest are listed as missing."""
    have = [p for p in periods if p.period_id in params]
    missing = [p.period_id for p in periods if p.period_id not in params]
    if not have:
        return Evaluation([], {}, missing)
    sims = observe_batch([p.boundary for p in have], np.stack([params[p.period_id].to_vector() for p in have]),
                         g, mode=mode)
    metrics = [period_metrics(p.period_id, s, p.measurements) for p, s in zip(have, sims)]
    return Evaluation(metrics, {p.period_id: s for p, s in zip(have, sims)}, missing)


def pooled_scores(ev: Evaluation, periods: Sequence[PeriodDataset]) -> dict[str, float]:
    """Entry-pooled speed/flow RMSE relative to the mean measured value, and congestion agreement."""
    by_id = {p.period_id: p for p in periods}
    num = {"speed": 0.0, "flow": 0.0}
    tot = {"speed": 0.0, "flow": 0.0}
    cnt = {"speed": 0, "flow": 0}
    agree = n_agree = 0
    for pid, sim in ev.simulated.items():
        m = by_id[pid].measurements
        K = m.cell_count
        for name, sl, ref in (("flow", slice(K, 2 * K), m.mainline_flows), ("speed", slice(2 * K, 3 * K), m.speeds)):
            sel = m.mask.bits[sl]
            num[name] += float(np.sum((sim[sl][sel] - ref[sel]) ** 2))
            tot[name] += float(np.sum(ref[sel]))
            cnt[name] += int(sel.sum())
        sel = m.mask.bits[2 * K:]
        agree += int(np.sum((sim[2 * K:][sel] < CONGESTION_SPEED) == (m.speeds[sel] < CONGESTION_SPEED)))
        n_agree += int(sel.sum())
    out = {}
    for name in ("speed", "flow"):
        rmse = np.sqrt(num[name] / max(cnt[name], 1))
        out[f"rmse_{name}"] = float(rmse)
        out[f"mean_{name}"] = tot[name] / max(cnt[name], 1)
        out[f"relative_rmse_{name}"] = float(rmse / out[f"mean_{name}"]) if out[f"mean_{name}"] > 0 else float("nan")
    out["congestion_agreement"] = agree / max(n_agree, 1)
    return out


def metrics_csv(ev: Evaluation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in ev.periods:
        w.writerow(m.row())
    agg = ev.aggregate()
    w.writerow(["ALL"] + [repr(agg[c]) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


# -- heatmaps ----------------------------------------------------------------------

def _ramp(x: float) -> str:
    """Red (0) through yellow to green (1)."""
    x = min(max(x, 0.0), 1.0)
    if x < 0.5:
        r, gch = 215, int(round(48 + (223 - 48) * 2 * x))
    else:
        r, gch = int(round(215 - (215 - 26) * (2 * x - 1))), int(round(223 - (223 - 150) * (2 * x - 1)))
    b = int(round(39 + (65 - 39) * x))
    return f"#{r:02x}{gch:02x}{b:02x}"


def heatmap_svg(panels: Sequence[tuple[str, np.ndarray]], vmax: float, cell_px: int = 12, invert: bool = False,
                unit: str = "km/h", mask: np.ndarray | None = None) -> str:
    """Side-by-side ``K x n`` panels (cell upward, time rightward) with a fixed red-to-green ramp over ``[0, vmax]``.

    ``invert`` flips the ramp so large values are red (for density).
    Masked entries (``mask`` False) are drawn grey.
    """
    K, n = panels[0][1].shape
    gap, top, left = 20, 24, 10
    pw, ph = n * cell_px, K * cell_px
    width = left + len(panels) * (pw + gap) + 60
    height = top + ph + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    for p, (title, data) in enumerate(panels):
        if data.shape != (K, n):
            raise ValueError("heatmap panels must share one shape")
        x0 = left + p * (pw + gap)
        out.append(f'<text x="{x0}" y="{top - 8}">{title}</text>')
        out.append(f'<g class="panel" data-rows="{K}" data-cols="{n}">')
        for k in range(K):
            y = top + (K - 1 - k) * cell_px
            for j in range(n):
                if mask is not None and not mask[k, j]:
                    color = "#bbbbbb"
                else:
                    frac = float(data[k, j]) / vmax if vmax > 0 else 0.0
                    color = _ramp(1.0 - frac if invert else frac)
                out.append(f'<rect x="{x0 + j * cell_px}" y="{y}" width="{cell_px}" height="{cell_px}" fill="{color}"/>')
        out.append("</g>")
    lx = left + len(panels) * (pw + gap)
    for i in range(10):
        frac = 1.0 - i / 9
        out.append(f'<rect x="{lx}" y="{top + i * ph / 10:.1f}" width="12" height="{ph / 10:.1f}" '
                   f'fill="{_ramp(1.0 - frac if invert else frac)}"/>')
    out.append(f'<text x="{lx + 16}" y="{top + 8}">{vmax:g}</text>')
    out.append(f'<text x="{lx + 16}" y="{top + ph}">0 {unit}</text>')
    out.append(f'<text x="{left}" y="{top + ph + 18}">time &#8594;   cell &#8593;</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def period_heatmaps(period: PeriodDataset, simulated: np.ndarray, speed_max: float, density_max: float
                    ) -> dict[str, str]:
    m = period.measurements
    K = m.cell_count
    smask = m.mask.bits[2 * K:]
    dmask = smask & m.mask.bits[K:2 * K]
    speed = heatmap_svg([("ground truth", m.speeds), ("simulated", simulated[2 * K:])], speed_max, mask=smask)
    dens = heatmap_svg([("ground truth", derived_density(m.mainline_flows, m.speeds)),
                        ("simulated", derived_density(simulated[K:2 * K], simulated[2 * K:]))],
                       density_max, invert=True, unit="veh/km", mask=dmask)
    return {"speed": speed, "density": dens}
