"""Command-line entry point: ``trafficcal <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .baselines import calibrate_fd, simulated_annealing
from .batch import observe_batch
from .calibrator import (CalibrationResult, TrainingDiverged, calibrate, calibration_report, load_checkpoint,
                         load_training_state, read_calibration_report, save_training_state, train)
from .ctm import SimulationError, simulate
from .data import (Bernoulli, DataError, apply_mask_pattern, generate_scenario, load_periods, save_periods,
                   split_by_period, ScenarioTruth)
from .domain import PeriodDataset, TrafficParams
from .evaluation import METRIC_COLUMNS, evaluate, heatmap_svg, metrics_csv, period_heatmaps

log = logging.getLogger("trafficcal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _load_cfg(args):
    return cfgmod.load(args.config, args.set or ())


def _load_data(path, g, default_split="test") -> list[PeriodDataset]:
    """A generated directory (``train/`` and ``test/``) or a flat directory tagged ``default_split``."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    if (root / "train").is_dir() or (root / "test").is_dir():
        out = []
        for tag in ("train", "test"):
            if (root / tag).is_dir():
                out.extend(load_periods(root / tag, g, tag))
        return out
    return load_periods(root, g, default_split)


def _select(periods, split):
    if split == "all":
        return list(periods)
    sel = [p for p in periods if p.split_tag == split]
    if not sel:
        raise DataError(f"no '{split}' periods in the data")
    return sel


def _geometry_from(args, cfg):
    if getattr(args, "checkpoint", None):
        model, _, _ = load_checkpoint(args.checkpoint)
        return model.geometry, model
    return cfgmod.geometry(cfg), None


# -- verbs -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    g = cfgmod.geometry(cfg)
    b = cfgmod.bounds(cfg, g.cell_count)
    spec, frac = cfgmod.scenario(cfg, g, b)
    datasets, truth = generate_scenario(spec)
    out = Path(args.out)
    td = truth.as_dict()
    if frac < 1.0:
        tr, te = split_by_period(datasets, frac, seed=spec.seed)
        parts = (("train", tr), ("test", te))
    else:
        parts = (("train", [d.with_split("train") for d in datasets]),)
    for tag, ds in parts:
        if not ds:
            continue
        sub = ScenarioTruth(tuple(d.period_id for d in ds), tuple(td[d.period_id] for d in ds))
        save_periods(ds, out / tag, sub)
    cfgmod.snapshot(cfg, out)
    print(f"wrote {len(datasets)} periods to {out}")
    return EXIT_OK


def _trace_csv(trace, pid) -> str:
    K = trace.densities.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["period_id", "t_index"] + [f"rho_{k}" for k in range(1, K + 1)] + [f"q_{k}" for k in range(1, K + 1)]
               + [f"r_{k}" for k in range(1, K + 1)] + [f"f_{k}" for k in range(1, K + 1)])
    for t in range(trace.horizon + 1):
        w.writerow([pid, t, *(repr(float(x)) for x in np.concatenate([trace.densities[t], trace.queues[t],
                                                                       trace.ramp_inflows[t],
                                                                       trace.intercell_flows[t]]))])
    return buf.getvalue()


def _read_params(path) -> dict[str, TrafficParams]:
    try:
        return read_calibration_report(path).params
    except (OSError, ValueError, IndexError) as e:
        raise DataError(f"cannot read parameter file {path}: {e}") from None


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    g = cfgmod.geometry(cfg)
    params = _read_params(args.theta)
    periods = _load_data(args.data, g)
    if args.period:
        periods = [p for p in periods if p.period_id in set(args.period)]
    out = Path(args.out)
    mode = cfg["simulation"]["mode"]
    speed_max = float(cfg["bounds"]["free_flow_speed"][1])
    n = 0
    for p in periods:
        if p.period_id not in params:
            continue
        trace = simulate(p.boundary, params[p.period_id], g, mode=mode)
        _write(out / f"trace_{p.period_id}.csv", _trace_csv(trace, p.period_id))
        obs = observe_batch([p.boundary], params[p.period_id].to_vector()[None], g, mode=mode)[0]
        K = g.cell_count
        _write(out / f"speed_{p.period_id}.svg", heatmap_svg([("simulated", obs[2 * K:])], speed_max))
        n += 1
    if n == 0:
        raise DataError("no period has both boundary data and parameters")
    cfgmod.snapshot(cfg, out)
    print(f"simulated {n} periods into {out}")
    return EXIT_OK


def _curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "total", "physics", "reconstruction"])
    for row in curve:
        w.writerow([int(row[0]), *(repr(float(x)) for x in row[1:4])])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    g = cfgmod.geometry(cfg)
    b = cfgmod.bounds(cfg, g.cell_count)
    tcfg = cfgmod.training(cfg)
    periods = _load_data(args.data, g, default_split="train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    resume = None
    if args.resume:
        resume, saved_cfg, _ = load_training_state(args.resume, g)
        a, c = saved_cfg.to_dict(), tcfg.to_dict()
        a.pop("epochs"), c.pop("epochs")
        if a != c:
            raise cfgmod.ConfigError("training options differ from the checkpoint (only 'epochs' may change)")
    cfgmod.snapshot(cfg, out)
    model, result, state = train(periods, tcfg, g, b, resume=resume, checkpoint_path=ckpt,
                                 max_epochs=args.max_epochs)
    model.save(out / "model.npz", {"training_config": tcfg.to_dict()})
    _write(out / "loss_curve.csv", _curve_csv(state.curve))
    _write(out / "calibration_train.csv", calibration_report(result, g.cell_count))
    print(f"trained {state.epoch} epochs, best validation loss {state.best_val:.6g} at epoch {state.best_epoch}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    model, meta, _ = load_checkpoint(args.checkpoint)
    periods = _select(_load_data(args.data, model.geometry), args.split)
    gamma = float(meta.get("training_config", {}).get("gamma", cfg["training"]["gamma"]))
    result = calibrate(model, periods, gamma)
    out = Path(args.out)
    _write(out, calibration_report(result, model.geometry.cell_count))
    cfgmod.snapshot(cfg, out.parent)
    print(f"calibrated {len(result.params)} periods into {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load_cfg(args)
    g = cfgmod.geometry(cfg)
    b = cfgmod.bounds(cfg, g.cell_count)
    periods = _select(_load_data(args.data, g), args.split)
    if args.method == "fd":
        fits = calibrate_fd(periods, b)
        result = CalibrationResult({k: v[0] for k, v in fits.items()}, method="fd")
    else:
        ares = simulated_annealing(periods, cfgmod.annealing(cfg), b, g, mode=cfg["simulation"]["mode"])
        result = CalibrationResult(ares.params, method="annealing")
    out = Path(args.out)
    _write(out, calibration_report(result, g.cell_count))
    cfgmod.snapshot(cfg, out.parent)
    print(f"{args.method} baseline calibrated {len(result.params)} periods into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    if bool(args.params) == bool(args.checkpoint):
        raise cfgmod.ConfigError("give exactly one of --params or --checkpoint")
    g, model = _geometry_from(args, cfg)
    periods = _select(_load_data(args.data, g), args.split)
    if model is not None:
        params = calibrate(model, periods).params
    else:
        params = _read_params(args.params)
    ev = evaluate(params, periods, g, mode=cfg["simulation"]["mode"])
    for pid in ev.missing:
        log.warning("period %s has no parameters; skipped", pid)
    if not ev.periods:
        raise DataError("no period has parameters to evaluate")
    out = Path(args.out)
    _write(out / "metrics.csv", metrics_csv(ev))
    if not args.no_heatmaps:
        by_id = {p.period_id: p for p in periods}
        speed_max = float(cfg["bounds"]["free_flow_speed"][1])
        dens_max = float(cfg["bounds"]["jam_density"][1])
        for pid, sim in ev.simulated.items():
            maps = period_heatmaps(by_id[pid], sim, speed_max, dens_max)
            for kind, svg in maps.items():
                _write(out / "heatmaps" / f"{kind}_{pid}.svg", svg)
    cfgmod.snapshot(cfg, out)
    agg = ev.aggregate()
    print(f"evaluated {len(ev.periods)} periods: rmse_speed {agg['rmse_speed']:.4g} km/h, "
          f"rmse_flow {agg['rmse_flow']:.4g} veh/h" + (f", {len(ev.missing)} missing" if ev.missing else ""))
    return EXIT_OK


SWEEP_COLUMNS = ("rate", "seed") + METRIC_COLUMNS


def sensitivity_sweep(model, periods, rates, seeds: int, base_seed: int = 0, mode="consistent"):
    """Rows per (rate, seed, period), then one aggregate row per rate (median over seeds)."""
    g = model.geometry
    rows, agg_rows = [], []
    for ri, rate in enumerate(rates):
        if not 0.0 <= rate < 1.0:
            raise cfgmod.ConfigError(f"missing rate {rate} outside [0, 1)")
        per_seed = []
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, ri, s])
            masked = [apply_mask_pattern(p, Bernoulli(rate), rng) for p in periods]
            params = calibrate(model, masked).params
            # scored against the complete measurements, so every rate is judged on the same entries
            ev = evaluate(params, periods, g, mode=mode)
            for m in ev.periods:
                rows.append([repr(float(rate)), str(s)] + m.row())
            per_seed.append(ev.aggregate())
        med = {c: float(np.median([a[c] for a in per_seed])) for c in METRIC_COLUMNS[1:]}
        agg_rows.append([repr(float(rate)), "median", "ALL"] + [repr(med[c]) for c in METRIC_COLUMNS[1:]])
    return rows, agg_rows


def cmd_sensitivity(args) -> int:
    cfg = _load_cfg(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    periods = _select(_load_data(args.data, model.geometry), args.split)
    rates = [float(r) for r in args.rates.split(",")] if args.rates else list(cfg["sensitivity"]["rates"])
    seeds = int(args.seeds if args.seeds is not None else cfg["sensitivity"]["seeds"])
    rows, agg = sensitivity_sweep(model, periods, rates, seeds, int(cfg["seed"]), cfg["simulation"]["mode"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    w.writerows(rows)
    w.writerows(agg)
    out = Path(args.out)
    _write(out, buf.getvalue())
    cfgmod.snapshot(cfg, out.parent)
    print(f"swept {len(rates)} rates x {seeds} seeds into {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficcal", description="Freeway CTM calibration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. training.epochs=5")

    sp = sub.add_parser("generate", help="synthesize a scenario with hidden ground truth")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("simulate", help="run the CTM with given parameters")
    common(sp)
    sp.add_argument("--theta", required=True, help="parameter CSV (calibration report or truth file)")
    sp.add_argument("--data", required=True, help="directory with boundary files")
    sp.add_argument("--period", action="append", help="restrict to these period ids")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train the physics-informed autoencoder")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="training checkpoint to continue from")
    sp.add_argument("--max-epochs", type=int, help="stop after this many epochs in this invocation")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("calibrate", help="encode periods with a trained model")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.add_argument("--out", required=True, help="output CSV")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("baseline", help="calibrate with FD fitting or simulated annealing")
    common(sp)
    sp.add_argument("--method", required=True, choices=("fd", "sa"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.add_argument("--out", required=True, help="output CSV")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("evaluate", help="metrics and heatmaps for calibrated parameters")
    common(sp)
    sp.add_argument("--params", help="parameter CSV")
    sp.add_argument("--checkpoint", help="trained model (calibrates on the fly)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.add_argument("--no-heatmaps", action="store_true")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sensitivity", help="missing-rate sweep")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.add_argument("--rates", help="comma-separated missing rates (default from config)")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--out", required=True, help="output CSV")
    sp.set_defaults(func=cmd_sensitivity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, SimulationError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
