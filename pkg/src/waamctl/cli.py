"""Command-line entry point.

Commands: gen-data, fit-loglog, train, ablate, control-run, diag, report,
check-grad. Every artifact-producing command writes a manifest.json next to
its outputs recording the command, config snapshot, seeds, file paths,
toolkit version, and wall-clock duration.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, analysis, control, geometry, models, plant, training, verification
from .configfile import snapshot
from .errors import (DataFormatError, DegenerateModelError, InvalidArgumentError,
                     NumericFaultError, ToolkitError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_ARCHS = ("rnn", "lstm", "gru", "narx")
ABLATION_SIZES = (3, 8, 16, 64)


def _write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                    inputs: list, outputs: list, started: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "toolkit_version": __version__,
        "duration_s": time.time() - started,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def _load_traces_dir(data_dir: Path) -> list[geometry.LayerTrace]:
    files = sorted(data_dir.glob("*.csv"))
    if not files:
        raise DataFormatError(f"no trace CSVs in {data_dir}")
    traces = []
    for f in files:
        traces.extend(geometry.read_traces(f))
    return traces


def _plant_config(args) -> plant.PlantConfig:
    cfg = plant.PlantConfig.from_file(args.plant_config) if args.plant_config \
        else plant.PlantConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _plant_config(args)
    if args.coverage:
        with open(args.coverage) as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != 1:
            raise DataFormatError(f"{args.coverage}: unsupported coverage schema")
        builds = tuple((float(b["v_w"]), tuple(tuple(float(v) for v in layer)
                                               for layer in b["layers"]))
                       for b in doc["builds"])
        coverage = plant.CoverageSpec(builds=builds)
    else:
        coverage = plant.default_coverage(n_feeds=args.n_feeds,
                                          layers_per_build=args.layers_per_build,
                                          seed=cfg.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    build_traces = plant.generate_dataset(cfg, coverage)
    outputs = []
    for idx, traces in enumerate(build_traces):
        path = out_dir / f"build_{idx:03d}.csv"
        geometry.write_traces(path, traces)
        outputs.append(path)
    _write_manifest(out_dir, "gen-data", {"plant": snapshot(cfg),
                                          "n_builds": len(build_traces)},
                    {"plant_seed": cfg.seed}, [args.coverage] if args.coverage else [],
                    outputs, started)
    print(f"wrote {len(outputs)} build files to {out_dir}")
    return EXIT_OK


def cmd_fit_loglog(args) -> int:
    started = time.time()
    traces = _load_traces_dir(Path(args.data))
    ds = training.split_dataset(traces, seed=args.seed)
    u = np.concatenate([t.u for t in ds.train_traces])
    y = np.concatenate([t.y for t in ds.train_traces])
    p = models.loglog_fit(u, y)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "loglog.json"
    models.save_model(p, model_path)
    errs = training.evaluate_errors(p, ds.val_traces) if ds.val_traces else {}
    print(f"loglog fit: alpha={p.weights['alpha']} beta={p.weights['beta']}")
    print(f"validation: {errs}")
    _write_manifest(out_dir, "fit-loglog", {"split_seed": args.seed, "errors": errs},
                    {"split_seed": args.seed}, [args.data], [model_path], started)
    return EXIT_OK


def _train_config(args) -> training.TrainConfig:
    cfg = training.TrainConfig.from_file(args.config) if args.config \
        else training.TrainConfig()
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, train_mse, val_mse in history:
            writer.writerow([epoch, repr(float(train_mse)), repr(float(val_mse))])


def cmd_train(args) -> int:
    started = time.time()
    traces = _load_traces_dir(Path(args.data))
    cfg = _train_config(args)
    ds = training.split_dataset(traces, seed=cfg.seed)
    params, history = training.train(args.arch, args.n, ds, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / f"model_{args.arch}_{args.n}.json"
    hist_path = out_dir / f"loss_{args.arch}_{args.n}.csv"
    models.save_model(params, model_path)
    _write_history(hist_path, history)
    errs = training.evaluate_errors(params, ds.val_traces)
    print(f"{args.arch} n={args.n}: best val MSE {min(h[2] for h in history):.6f}, {errs}")
    _write_manifest(out_dir, "train", {"train": snapshot(cfg), "arch": args.arch,
                                       "n": args.n, "errors": errs},
                    {"train_seed": cfg.seed}, [args.data], [model_path, hist_path], started)
    return EXIT_OK


def _ablate_cell(cell):
    arch, n, data_dir, cfg = cell
    traces = _load_traces_dir(Path(data_dir))
    ds = training.split_dataset(traces, seed=cfg.seed)
    try:
        params, history = training.train(arch, n, ds, cfg)
        errs = training.evaluate_errors(params, ds.val_traces)
        latency = models.measure_step_latency(params, n_calls=10_000)
        return (arch, n, None, params, history,
                {"val_mse": min(h[2] for h in history), "latency_ms": latency * 1e3, **errs})
    except ToolkitError as exc:
        return (arch, n, f"{type(exc).__name__}: {exc}", None, None, None)


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(arch, n, args.data, cfg) for arch in ABLATION_ARCHS for n in ABLATION_SIZES]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_ablate_cell, cells))
    else:
        results = [_ablate_cell(cell) for cell in cells]

    outputs = []
    summary_path = out_dir / "ablation_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arch", "n", "val_mse", "mae_h", "mae_w", "p95_h", "p95_w",
                         "latency_ms", "status"])
        for arch, n, err, params, history, stats in results:
            if err is not None:
                writer.writerow([arch, n, "", "", "", "", "", "", err])
                continue
            model_path = out_dir / f"model_{arch}_{n}.json"
            models.save_model(params, model_path)
            _write_history(out_dir / f"loss_{arch}_{n}.csv", history)
            outputs.append(model_path)
            writer.writerow([arch, n, repr(stats["val_mse"]), repr(stats["mae_h"]),
                             repr(stats["mae_w"]), repr(stats["p95_h"]),
                             repr(stats["p95_w"]), repr(stats["latency_ms"]), "ok"])
    outputs.append(summary_path)
    _write_manifest(out_dir, "ablate", {"train": snapshot(cfg)},
                    {"train_seed": cfg.seed}, [args.data], outputs, started)
    print(f"ablation grid written to {summary_path}")
    return EXIT_OK


def cmd_control_run(args) -> int:
    started = time.time()
    plant_cfg = _plant_config(args)
    ctrl_cfg = control.ControllerConfig.from_file(args.ctrl_config) if args.ctrl_config \
        else control.ControllerConfig()
    model_params = models.load_model(args.model) if args.model else None
    record = control.run_closed_loop(plant_cfg, model_params, ctrl_cfg,
                                     args.n_layers, args.mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "build.csv"
    sidecar_path = out_dir / "build.json"
    record.save(csv_path, sidecar_path)
    report = analysis.build_report(record, margin=ctrl_cfg.edge_margin)
    report_path = out_dir / "report.csv"
    analysis.write_report_csv([report], report_path)
    analysis.write_layer_csv([report], out_dir / "report_layers.csv")
    if record.failure:
        print(f"build aborted: {record.failure}")
    print(f"{args.mode}: height_sd={report.height_sd:.4f} width_sd={report.width_sd:.4f} "
          f"(edge-excluded {report.height_sd_ex:.4f}/{report.width_sd_ex:.4f})")
    _write_manifest(out_dir, "control-run",
                    {"plant": record.plant_config, "controller": record.controller_config,
                     "mode": args.mode, "n_layers": args.n_layers,
                     "config_hash": record.config_hash},
                    {"plant_seed": plant_cfg.seed},
                    [args.model] if args.model else [],
                    [csv_path, sidecar_path, report_path], started)
    return EXIT_OK if record.failure is None else EXIT_NUMERIC


def cmd_diag(args) -> int:
    started = time.time()
    params = models.load_model(args.model)
    record = control.BuildRecord.load(args.build_csv, args.build_json)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rho_path = out_dir / "spectral_radius.csv"
    with open(rho_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "k", "rho"])
        for rec in record.layers:
            states = analysis.model_states_along(params, rec.trace.u)
            rhos = analysis.spectral_radius_trace(params, states, rec.trace.u)
            for k, rho in enumerate(rhos):
                writer.writerow([rec.trace.layer_index, k, repr(rho)])

    norm_path = out_dir / "state_norm.csv"
    with open(norm_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "k", "x_norm"])
        for rec, norms in zip(record.layers, analysis.state_norm_trace(record)):
            for k, v in enumerate(norms):
                writer.writerow([rec.trace.layer_index, k, repr(float(v))])

    y_inf, converged, settle = analysis.steady_state_check(
        params, [record.controller_config["nominal_vt"],
                 record.controller_config["nominal_vw"]])
    steady_path = out_dir / "steady_state.csv"
    with open(steady_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y_inf_dh", "y_inf_w", "converged", "settle_step"])
        writer.writerow([repr(float(y_inf[0])), repr(float(y_inf[1])),
                         converged, settle])
    print(f"steady state {np.round(y_inf, 4)} converged={converged} settle={settle}")
    _write_manifest(out_dir, "diag", {"model": str(args.model)}, {},
                    [args.model, args.build_csv, args.build_json],
                    [rho_path, norm_path, steady_path], started)
    return EXIT_OK


def cmd_report(args) -> int:
    started = time.time()
    reports = []
    for build_dir in args.build_dirs:
        d = Path(build_dir)
        record = control.BuildRecord.load(d / "build.csv", d / "build.json")
        reports.append(analysis.build_report(record, margin=args.margin))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "comparison.csv"
    analysis.write_report_csv(reports, table_path)
    analysis.write_layer_csv(reports, out_dir / "comparison_layers.csv")
    for rep in reports:
        print(f"{rep.mode:18s} h={rep.height_sd:.4f} w={rep.width_sd:.4f} "
              f"h_ex={rep.height_sd_ex:.4f} w_ex={rep.width_sd_ex:.4f}")
    _write_manifest(out_dir, "report", {"margin": args.margin}, {},
                    list(args.build_dirs), [table_path], started)
    return EXIT_OK


def cmd_check_grad(args) -> int:
    worst_overall = 0.0
    for arch in ABLATION_ARCHS:
        worst = 0.0
        for n in (3, 8):
            res = verification.check_architecture(arch, n, seed=args.seed,
                                                  n_jacobian=args.n_jacobian,
                                                  n_grad_instances=1)
            worst = max(worst, *res.values())
        print(f"{arch}: worst relative derivative error {worst:.3e}")
        worst_overall = max(worst_overall, worst)
    if worst_overall > 1e-4:
        print("FAIL: analytic derivatives disagree with finite differences")
        return EXIT_NUMERIC
    return EXIT_OK


# -- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waamctl",
                                     description="Deposition-dynamics learning and control toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate data-collection builds")
    p.add_argument("--plant-config")
    p.add_argument("--coverage", help="JSON coverage spec; default: 21-feed sweep")
    p.add_argument("--n-feeds", type=int, default=21)
    p.add_argument("--layers-per-build", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-loglog", help="fit the static power-law baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_loglog)

    p = sub.add_parser("train", help="train one sequence model")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=models.TRAINABLE_ARCHS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--config", help="training config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train the full architecture/size grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("control-run", help="closed-loop build under one mode")
    p.add_argument("--model", help="model file (omit for baseline-constant)")
    p.add_argument("--plant-config")
    p.add_argument("--ctrl-config")
    p.add_argument("--mode", choices=control.MODES, required=True)
    p.add_argument("--n-layers", type=int, default=28)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_control_run)

    p = sub.add_parser("diag", help="model/controller diagnostics for a build")
    p.add_argument("--model", required=True)
    p.add_argument("--build-csv", required=True)
    p.add_argument("--build-json", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("report", help="combined comparison table across builds")
    p.add_argument("build_dirs", nargs="+")
    p.add_argument("--margin", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check-grad", help="finite-difference derivative audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jacobian", type=int, default=25)
    p.set_defaults(func=cmd_check_grad)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, InvalidArgumentError, DegenerateModelError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFaultError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
