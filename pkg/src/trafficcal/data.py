"""Synthetic scenarios, masking patterns, CSV schemas and period splits."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .batch import BoundaryBatch, observe_batch
from .domain import (PARAM_GROUPS, BoundaryConditions, FreewayGeometry, MeasurementSeries, ObservationMask,
                     ParamBounds, PeriodDataset, TrafficParams, param_names, validate_geometry)

BOUNDARY_FILE = "boundary.csv"
INITIAL_FILE = "initial_densities.csv"
MEASUREMENT_FILE = "measurements.csv"
TRUTH_FILE = "scenario.truth.csv"


class DataError(ValueError):
    """Input file does not conform to its schema."""


def default_geometry(K: int = 9, sim_step_s: float = 5.0, obs_interval_min: float = 5.0,
                     period_hours: float = 3.0, buffer_capacity: float = 2400.0,
                     cell_lengths=None) -> FreewayGeometry:
    """Corridor of ``K`` cells, ~6.2 km in total for nine cells."""
    if cell_lengths is None:
        base = np.array([0.60, 0.70, 0.65, 0.75, 0.70, 0.60, 0.70, 0.75, 0.65])
        cell_lengths = np.resize(base, K)
    dt = sim_step_s / 3600.0
    m = int(round(obs_interval_min * 60.0 / sim_step_s))
    T = int(round(period_hours * 3600.0 / sim_step_s))
    return FreewayGeometry(np.asarray(cell_lengths, float), np.full(K, float(buffer_capacity)), dt, m, T)


def _range(x) -> tuple[float, float]:
    lo, hi = (float(v) for v in x)
    if lo > hi:
        raise ValueError(f"range {x} is reversed")
    return lo, hi


@dataclass(frozen=True)
class ScenarioSpec:
    """Recipe for a synthetic corridor with hidden ground-truth parameters.

    One corridor-level parameter vector is drawn from the ``truth_*``
    ranges; each period then perturbs every entry by a relative uniform
    factor within ``+-period_jitter`` (clipped back into the ranges), so
    periods share a road but not identical parameters.  Demands follow a
    Gaussian peak over a base level per buffer; the downstream speed may
    dip during the period to push congestion back into the corridor.
    Ranges are ``(low, high)`` and sampled uniformly.
    """

    geometry: FreewayGeometry
    bounds: ParamBounds
    truth_free_flow_speed: tuple = (85.0, 115.0)
    truth_nominal_capacity: tuple = (1900.0, 2300.0)
    truth_drop_ratio: tuple = (0.85, 0.97)
    truth_jam_density: tuple = (140.0, 180.0)
    truth_wave_speed: tuple = (15.0, 25.0)
    mainline_base: tuple = (800.0, 1100.0)
    mainline_peak: tuple = (400.0, 900.0)
    onramp_base: tuple = (20.0, 80.0)
    onramp_peak: tuple = (30.0, 250.0)
    peak_center: tuple = (0.35, 0.65)  # fraction of the period
    peak_width: tuple = (0.12, 0.25)  # fraction of the period
    onramp_cells: tuple = (2, 3, 5, 6, 7, 8)  # 1-based buffers with a real on-ramp
    offramp_cells: tuple = (2, 4, 6, 7)  # 1-based cells with an off-ramp
    mainline_ratio: tuple = (0.88, 0.97)
    downstream_free: tuple = (95.0, 110.0)
    downstream_dip_prob: float = 0.6
    downstream_dip_speed: tuple = (25.0, 55.0)
    downstream_dip_center: tuple = (0.3, 0.7)
    downstream_dip_width: tuple = (0.08, 0.2)
    initial_density: tuple = (8.0, 15.0)
    period_jitter: float = 0.05
    noise: float = 0.02
    periods: int = 20
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        K = self.geometry.cell_count
        if self.bounds.cell_count != K:
            raise ValueError("bounds and geometry disagree on the cell count")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not 0 <= self.period_jitter < 1:
            raise ValueError("period_jitter must lie in [0, 1)")
        if self.periods < 1:
            raise ValueError("need at least one period")
        lo, hi = self.bounds.lower, self.bounds.upper
        checks = [("truth_free_flow_speed", lo.free_flow_speeds, hi.free_flow_speeds),
                  ("truth_nominal_capacity", lo.nominal_capacities, hi.nominal_capacities),
                  ("truth_jam_density", lo.jam_densities, hi.jam_densities),
                  ("truth_wave_speed", lo.wave_speeds, hi.wave_speeds)]
        for name, lo_arr, hi_arr in checks:
            a, b = _range(getattr(self, name))
            if a < lo_arr.max() or b > hi_arr.min():
                raise ValueError(f"{name} range {a, b} is not inside the parameter bounds")
        a, b = _range(self.truth_drop_ratio)
        if a < self.bounds.drop_ratio_min or b > 1.0:
            raise ValueError("truth_drop_ratio must lie inside [drop_ratio_min, 1]")
        a, b = _range(self.mainline_ratio)
        if a < 0 or b > 1:
            raise ValueError("mainline_ratio must lie in [0, 1]")
        for cells in (self.onramp_cells, self.offramp_cells):
            if any(not 1 <= c <= K for c in cells):
                raise ValueError("ramp cell indices are 1-based and must be within 1..K")


@dataclass(frozen=True)
class ScenarioTruth:
    """Hidden ground truth, kept apart from the datasets calibration code sees."""

    period_ids: tuple[str, ...]
    params: tuple[TrafficParams, ...]

    def as_dict(self) -> dict[str, TrafficParams]:
        return dict(zip(self.period_ids, self.params))


def _peak(tfrac, center, width):
    return np.exp(-0.5 * ((tfrac - center) / width) ** 2)


_TRUTH_RANGES = ("truth_free_flow_speed", "truth_nominal_capacity", "truth_drop_ratio", "truth_jam_density",
                 "truth_wave_speed")


def _sample_corridor(spec: ScenarioSpec, rng: np.random.Generator) -> list[np.ndarray]:
    K = spec.geometry.cell_count
    sizes = (K - 1, K - 1, K - 1, K, K)
    return [rng.uniform(*_range(getattr(spec, name)), size=n) for name, n in zip(_TRUTH_RANGES, sizes)]


def _sample_truth(spec: ScenarioSpec, corridor: list[np.ndarray], rng: np.random.Generator) -> TrafficParams:
    out = []
    for name, base in zip(_TRUTH_RANGES, corridor):
        x = base * (1.0 + spec.period_jitter * rng.uniform(-1.0, 1.0, size=base.shape))
        out.append(np.clip(x, *_range(getattr(spec, name))))
    v, qn, ratio, rmax, w = out
    return TrafficParams(v, qn, qn * ratio, rmax, w)


def _sample_boundary(spec: ScenarioSpec, rng: np.random.Generator) -> BoundaryConditions:
    g = spec.geometry
    K, T = g.cell_count, g.horizon
    tfrac = np.arange(T + 1) / max(T, 1)
    alpha = np.zeros((K, T + 1))
    center, width = rng.uniform(*spec.peak_center), rng.uniform(*spec.peak_width)
    alpha[0] = rng.uniform(*spec.mainline_base) + rng.uniform(*spec.mainline_peak) * _peak(tfrac, center, width)
    for c in spec.onramp_cells:
        if c == 1:
            continue
        shift = rng.uniform(-0.05, 0.05)
        alpha[c - 1] = rng.uniform(*spec.onramp_base) + rng.uniform(*spec.onramp_peak) * _peak(tfrac, center + shift, width)
    eta = np.ones((K, T + 1))
    for c in spec.offramp_cells:
        eta[c - 1] = rng.uniform(*spec.mainline_ratio)
    v_down = np.full(T + 1, rng.uniform(*spec.downstream_free))
    if rng.uniform() < spec.downstream_dip_prob:
        depth = v_down[0] - rng.uniform(*spec.downstream_dip_speed)
        v_down = v_down - depth * _peak(tfrac, rng.uniform(*spec.downstream_dip_center),
                                        rng.uniform(*spec.downstream_dip_width))
    rho0 = rng.uniform(*spec.initial_density, size=K)
    return BoundaryConditions(rho0, alpha, eta, v_down)


def add_noise(payload: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative log-normal noise ``x * exp(level * z)``."""
    if level == 0:
        return payload.copy()
    return payload * np.exp(level * rng.standard_normal(payload.shape))


def generate_scenario(spec: ScenarioSpec) -> tuple[list[PeriodDataset], ScenarioTruth]:
    """Sample a corridor, then per-period truth and boundaries; simulate exactly, observe, add noise."""
    g = spec.geometry
    rng = np.random.default_rng(spec.seed)
    corridor = _sample_corridor(spec, rng)
    truths, boundaries = [], []
    for i in range(spec.periods):
        for _ in range(spec.max_retries):
            theta = _sample_truth(spec, corridor, rng)
            b = _sample_boundary(spec, rng)
            if validate_geometry(g, theta, float(b.downstream_speed.max())).ok:
                break
        else:
            raise ValueError(f"period {i}: no CFL-feasible parameter sample in {spec.max_retries} tries")
        truths.append(theta)
        boundaries.append(b)
    obs = observe_batch(BoundaryBatch.from_list(boundaries), np.array([t.to_vector() for t in truths]), g)
    datasets = []
    ids = tuple(f"p{i:04d}" for i in range(spec.periods))
    for pid, b, y in zip(ids, boundaries, obs):
        noisy = add_noise(y, spec.noise, rng)
        datasets.append(PeriodDataset(pid, b, MeasurementSeries.from_stacked(noisy)))
    return datasets, ScenarioTruth(ids, tuple(truths))


# -- missing data ------------------------------------------------------------------

@dataclass(frozen=True)
class Bernoulli:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("missing rate must lie in [0, 1]")

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(size=shape) >= self.rate


@dataclass(frozen=True)
class SensorOutage:
    """Whole detectors down: every channel of the given 1-based cells over ``span`` (obs indices, end exclusive)."""

    cells: tuple[int, ...]
    span: tuple[int, int] | None = None

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        K = shape[0] // 3
        bits = np.ones(shape, dtype=bool)
        start, stop = self.span if self.span is not None else (0, shape[1])
        for c in self.cells:
            if not 1 <= c <= K:
                raise ValueError(f"cell {c} outside 1..{K}")
            for ch in range(3):
                bits[ch * K + c - 1, start:stop] = False
        return bits


@dataclass(frozen=True)
class FromPool:
    masks: tuple[ObservationMask, ...]

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        if not self.masks:
            raise ValueError("empty mask pool")
        m = self.masks[int(rng.integers(len(self.masks)))]
        if m.shape != tuple(shape):
            raise ValueError(f"pool mask shape {m.shape} != {tuple(shape)}")
        return m.bits.copy()


def apply_mask_pattern(dataset: PeriodDataset, pattern, seed: int | np.random.Generator = 0,
                       keep_truth: bool = False):
    """Clear mask bits per ``pattern`` and zero the corresponding payload.

    Already-missing entries stay missing.  With ``keep_truth`` the
    untouched dataset is returned alongside the masked one.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    meas = dataset.measurements
    shape = meas.mask.shape
    bits = pattern.sample(shape, rng) & meas.mask.bits
    masked = dataset.with_measurements(meas.with_mask(ObservationMask(bits)))
    return (masked, dataset) if keep_truth else masked


def mask_pool(shape, rates: Sequence[float], count: int, seed: int = 0) -> tuple[ObservationMask, ...]:
    """Bernoulli masks with rates cycled from ``rates``."""
    rng = np.random.default_rng(seed)
    return tuple(ObservationMask(Bernoulli(rates[i % len(rates)]).sample(shape, rng)) for i in range(count))


# -- splitting ---------------------------------------------------------------------

def split_by_period(datasets: Sequence[PeriodDataset], rule, seed: int = 0
                    ) -> tuple[list[PeriodDataset], list[PeriodDataset]]:
    """Split by period: ``rule`` is a train fraction, or an explicit collection of test period ids.

    A fraction picks a seeded random subset of training periods; the
    remaining periods keep their original order.
    """
    ids = [d.period_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate period ids")
    if isinstance(rule, (int, float)) and not isinstance(rule, bool):
        frac = float(rule)
        if not 0.0 < frac < 1.0:
            raise ValueError("train fraction must lie in (0, 1)")
        n_train = int(round(frac * len(datasets)))
        order = np.random.default_rng(seed).permutation(len(datasets))
        train_idx = set(order[:n_train].tolist())
    else:
        test_ids = set(rule)
        unknown = test_ids - set(ids)
        if unknown:
            raise ValueError(f"unknown period ids in split rule: {sorted(unknown)}")
        train_idx = {i for i, pid in enumerate(ids) if pid not in test_ids}
    train = [d.with_split("train") for i, d in enumerate(datasets) if i in train_idx]
    test = [d.with_split("test") for i, d in enumerate(datasets) if i not in train_idx]
    if not train or not test:
        raise ValueError("split leaves one side empty")
    return train, test


# -- files -------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def boundary_columns(K: int) -> list[str]:
    return (["period_id", "t_index"] + [f"alpha_{k}" for k in range(1, K + 1)]
            + [f"eta_{k}" for k in range(1, K + 1)] + ["v_K_boundary"])


def measurement_columns(K: int) -> list[str]:
    return (["period_id", "obs_index"] + [f"rbar_{k}" for k in range(1, K + 1)]
            + [f"fbar_{k}" for k in range(1, K + 1)] + [f"vbar_{k}" for k in range(1, K + 1)])


def initial_columns(K: int) -> list[str]:
    return ["period_id"] + [f"rho0_{k}" for k in range(1, K + 1)]


def save_periods(datasets: Sequence[PeriodDataset], out_dir, truth: ScenarioTruth | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = datasets[0].boundary.cell_count

    buf = io.StringIO()
    buf.write("# units: alpha veh/h, eta dimensionless, v_K_boundary km/h\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(boundary_columns(K))
    for d in datasets:
        b = d.boundary
        for t in range(b.horizon + 1):
            w.writerow([d.period_id, t, *map(_fmt, b.demands[:, t]), *map(_fmt, b.mainline_ratios[:, t]),
                        _fmt(b.downstream_speed[t])])
    _atomic_write(out / BOUNDARY_FILE, buf.getvalue())

    buf = io.StringIO()
    buf.write("# units: rho0 veh/km\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(initial_columns(K))
    for d in datasets:
        w.writerow([d.period_id, *map(_fmt, d.boundary.initial_densities)])
    _atomic_write(out / INITIAL_FILE, buf.getvalue())

    buf = io.StringIO()
    buf.write("# units: rbar veh/h, fbar veh/h, vbar km/h; blank = missing\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(measurement_columns(K))
    for d in datasets:
        payload, bits = d.measurements.stacked(), d.measurements.mask.bits
        for j in range(payload.shape[1]):
            w.writerow([d.period_id, j, *(_fmt(x) if ok else "" for x, ok in zip(payload[:, j], bits[:, j]))])
    _atomic_write(out / MEASUREMENT_FILE, buf.getvalue())

    if truth is not None:
        save_truth(truth, out / TRUTH_FILE)


def save_truth(truth: ScenarioTruth, path) -> None:
    K = truth.params[0].cell_count
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["period_id"] + param_names(K))
    for pid, th in zip(truth.period_ids, truth.params):
        w.writerow([pid, *map(_fmt, th.to_vector())])
    _atomic_write(Path(path), buf.getvalue())


def load_truth(path) -> ScenarioTruth:
    rows = list(_read_table(Path(path)))
    header = rows[0][1]
    K = (len(header) - 1 + 3) // 5
    if ["period_id"] + param_names(K) != header:
        raise DataError(f"{path}: unexpected truth header")
    ids, params = [], []
    for line, row in rows[1:]:
        ids.append(row[0])
        params.append(TrafficParams.from_vector([float(x) for x in row[1:]], K))
    return ScenarioTruth(tuple(ids), tuple(params))


def _read_table(path: Path):
    """Yield ``(line_number, row)`` skipping comment lines."""
    if not path.exists():
        raise DataError(f"missing file {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if row and row[0].startswith("#"):
                continue
            if not row:
                continue
            yield i, row


def _header(rows, expected: list[str], path: Path):
    line, header = rows[0]
    missing = [c for c in expected if c not in header]
    if missing:
        raise DataError(f"{path}:{line}: missing column(s) {', '.join(missing)}")
    extra = [c for c in header if c not in expected]
    if extra:
        raise DataError(f"{path}:{line}: unexpected column(s) {', '.join(extra)}")
    return [header.index(c) for c in expected]


def _float(cell: str, path: Path, line: int, col: str, allow_blank: bool = False):
    if cell.strip() == "":
        if allow_blank:
            return None
        raise DataError(f"{path}:{line}: blank value in column {col}")
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}:{line}: column {col}: cannot parse {cell!r}") from None


def _group(rows, idx_col: int, path: Path, index_name: str):
    """Group data rows by period id, enforcing dense ordered indices."""
    groups: dict[str, list] = {}
    for line, row in rows:
        pid = row[0]
        try:
            j = int(row[idx_col])
        except ValueError:
            raise DataError(f"{path}:{line}: {index_name} {row[idx_col]!r} is not an integer") from None
        rows_p = groups.setdefault(pid, [])
        if j != len(rows_p):
            raise DataError(f"{path}:{line}: period {pid}: {index_name} {j} out of order (expected {len(rows_p)})")
        rows_p.append((line, row))
    return groups


def load_periods(data_dir, geometry: FreewayGeometry, split_tag: str = "train") -> list[PeriodDataset]:
    """Read the boundary, initial-density and measurement files of a directory."""
    root = Path(data_dir)
    K = geometry.cell_count

    bpath = root / BOUNDARY_FILE
    rows = list(_read_table(bpath))
    if not rows:
        raise DataError(f"{bpath}: empty file")
    cols = boundary_columns(K)
    order = _header(rows, cols, bpath)
    data = [(line, [row[i] if i < len(row) else "" for i in order]) for line, row in rows[1:]]
    bgroups = _group(data, 1, bpath, "t_index")

    ipath = root / INITIAL_FILE
    rows = list(_read_table(ipath))
    order = _header(rows, initial_columns(K), ipath)
    rho0 = {}
    for line, row in rows[1:]:
        row = [row[i] if i < len(row) else "" for i in order]
        rho0[row[0]] = [_float(c, ipath, line, n) for c, n in zip(row[1:], initial_columns(K)[1:])]

    mpath = root / MEASUREMENT_FILE
    rows = list(_read_table(mpath))
    order = _header(rows, measurement_columns(K), mpath)
    mcols = measurement_columns(K)
    data = [(line, [row[i] if i < len(row) else "" for i in order]) for line, row in rows[1:]]
    mgroups = _group(data, 1, mpath, "obs_index")

    if set(bgroups) != set(mgroups) or set(bgroups) != set(rho0):
        raise DataError("boundary, initial-density and measurement files list different periods")
    out = []
    for pid, brows in bgroups.items():
        if len(brows) != geometry.horizon + 1:
            raise DataError(f"{bpath}: period {pid} has {len(brows)} time rows, expected {geometry.horizon + 1}")
        arr = np.array([[_float(c, bpath, line, n) for c, n in zip(row[2:], cols[2:])] for line, row in brows])
        alpha, eta, vd = arr[:, :K].T, arr[:, K:2 * K].T, arr[:, 2 * K]
        try:
            boundary = BoundaryConditions(rho0[pid], alpha, eta, vd)
        except ValueError as e:
            raise DataError(f"period {pid}: {e}") from None
        mrows = mgroups[pid]
        if len(mrows) != geometry.n_obs:
            raise DataError(f"{mpath}: period {pid} has {len(mrows)} observation rows, expected {geometry.n_obs}")
        vals = np.array([[_float(c, mpath, line, n, allow_blank=True) for c, n in zip(row[2:], mcols[2:])]
                         for line, row in mrows], dtype=object)
        bits = np.array([[v is not None for v in r] for r in vals]).T
        payload = np.array([[0.0 if v is None else v for v in r] for r in vals], dtype=float).T
        try:
            meas = MeasurementSeries.from_stacked(payload, ObservationMask(bits))
        except ValueError as e:
            raise DataError(f"period {pid}: {e}") from None
        out.append(PeriodDataset(pid, boundary, meas, split_tag))
    return out
