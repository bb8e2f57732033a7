"""Command-line entry point: ``ecfusion {train,eval,ablate,selftest,gen-scenes}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(diverged training, failed self-test).
"""
from __future__ import annotations

import os

# One BLAS thread per process: parallelism comes from running whole jobs in
# separate processes, and a fixed thread count keeps float results stable.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config, pipeline, selftest
from .grid import dump_channels, write_pgm
from .dqr import write_queries_csv
from .decoder import write_predictions_csv
from .numerics import Rng
from .synth import save_scene, generate_scene, scene_seeds

log = logging.getLogger("ecfusion")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
LOG_COLUMNS = ("step", "L_det", "L_HF", "L_HP", "L_HI", "total")
SUMMARY_METRICS = ("mAP", "recall_both", "recall_lidar_only", "recall_camera_only", "recall_unique",
                   "center_error", "gt_tilde_p", "gt_tilde_i")
AXES = ("sfa", "dqr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def max_workers():
    raw = os.environ.get("ECFUSION_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ECFUSION_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ECFUSION_THREADS must be >= 1")
    return n


def fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve(args, **extra):
    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise config.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return config.load(args.config, overrides)


def write_log(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [fmt(float(row[k])) for k in LOG_COLUMNS[1:]])


def write_metrics(path, metrics):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, fmt(v)])


# -- commands ---------------------------------------------------------------------------

def cmd_train(args):
    rc = resolve(args)
    out = Path(rc.out)
    config.write_resolved(rc, out)
    t = time.perf_counter()
    params, history = pipeline.train(rc.train, rc.grid, rc.conflict)
    checkpoint.save(out / "checkpoint.bin", params)
    write_log(out / "train_log.csv", history)
    log.info("trained %d steps in %.1fs -> %s", len(history), time.perf_counter() - t, out)
    return EXIT_OK


def dump_scene(directory, data, fw, grid):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, h in (("heatmap_p", fw.h_p), ("heatmap_i", fw.h_i), ("heatmap_f", fw.h_f)):
        dump_channels(d / name, h, 0.0, 1.0)
    for name, flow in (("flow_p", fw.align.flow_p), ("flow_i", fw.align.flow_i)):
        mag = np.zeros((grid.X, grid.Y)) if flow is None else np.hypot(flow.value[..., 0], flow.value[..., 1])
        write_pgm(d / f"{name}_magnitude.pgm", mag, 0.0, max(float(mag.max()), 1e-12))
    write_queries_csv(d / "queries.csv", fw.queries)
    write_predictions_csv(d / "predictions.csv", fw.boxes)
    save_scene(d / "scene.txt", data.scene)


def cmd_eval(args):
    rc = resolve(args)
    if rc.train.n_eval < 1:
        raise config.ConfigError("evaluation needs n_eval >= 1")
    params = pipeline.ModelParams.init(Rng(0), rc.grid, rc.train)
    try:
        checkpoint.load(args.checkpoint, params)
    except OSError as e:
        raise config.ConfigError(f"cannot read checkpoint {args.checkpoint!r}: {e.strerror or e}") from None
    except ValueError as e:
        raise config.ConfigError(f"checkpoint {args.checkpoint!r} does not fit the configured model: {e}") from None
    out = Path(rc.out)
    config.write_resolved(rc, out)
    seeds = pipeline.eval_seeds(rc.train)
    if args.dump_heatmaps:
        metrics, kept = pipeline.evaluate(params, seeds, rc.train, rc.grid, rc.conflict, rc.eval, keep=True)
    else:
        metrics, kept = pipeline.evaluate(params, seeds, rc.train, rc.grid, rc.conflict, rc.eval), []
    write_metrics(out / "metrics.csv", metrics)
    for k, (data, fw) in enumerate(kept):
        dump_scene(out / "dumps" / f"scene_{k:03d}", data, fw, rc.grid)
    log.info("mAP %.4f over %d scenes -> %s", metrics["mAP"], rc.train.n_eval, out)
    return EXIT_OK


def parse_grid(text):
    axes = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in axes if a not in AXES]
    if bad or not axes or len(set(axes)) != len(axes):
        raise UsageError(f"--grid takes a comma list drawn from {AXES}, got {text!r}")
    return axes


def ablation_cells(axes, base):
    """``[(name, TrainConfig)]`` over on/off of each listed axis (on first)."""
    cells = []
    for flags in itertools.product((True, False), repeat=len(axes)):
        on = dict(zip(axes, flags))
        sfa = on.get("sfa", base.sfa)
        dqr = on.get("dqr", base.k_p > 0 or base.k_i > 0)
        kp, ki = (base.k_p or 5, base.k_i or 5) if dqr else (0, 0)
        name = "_".join(f"{a}-{'on' if on[a] else 'off'}" for a in axes)
        cells.append((name, replace(base, sfa=sfa, k_p=kp, k_i=ki)))
    return cells


def run_job(job):
    """Train + evaluate one (cell, seed); writes into its own directory."""
    name, seed, rc, out = job
    t, c = time.perf_counter(), time.process_time()
    out = Path(out)
    config.write_resolved(rc, out)
    params, history = pipeline.train(rc.train, rc.grid, rc.conflict)
    checkpoint.save(out / "checkpoint.bin", params)
    write_log(out / "train_log.csv", history)
    metrics = pipeline.evaluate(params, pipeline.eval_seeds(rc.train), rc.train, rc.grid, rc.conflict, rc.eval)
    write_metrics(out / "metrics.csv", metrics)
    return name, seed, metrics, time.process_time() - c, time.perf_counter() - t


def summary_rows(results, cells, seeds, class_keys):
    cols = ["cell", "seed"] + list(class_keys) + list(SUMMARY_METRICS)
    rows = []
    by_key = {(r[0], r[1]): r[2] for r in results}
    for name, _ in cells:
        vals = []
        for s in seeds:
            m = by_key[name, s]
            rows.append([name, str(s)] + [fmt(float(m[c])) for c in cols[2:]])
            vals.append([float(m[c]) for c in cols[2:]])
        arr = np.array(vals)
        rows.append([name, "mean"] + [fmt(float(x)) for x in arr.mean(0)])
        rows.append([name, "std"] + [fmt(float(x)) for x in arr.std(0)])
    return cols, rows


def cmd_ablate(args):
    rc = resolve(args)
    axes = parse_grid(args.grid)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [rc.train.seed + k for k in range(args.seeds)]
    cells = ablation_cells(axes, rc.train)
    out = Path(rc.out)
    config.write_resolved(rc, out)
    jobs = [(name, s, replace(rc, train=replace(cfg, seed=s)), str(out / name / f"seed_{s}"))
            for name, cfg in cells for s in seeds]
    workers = min(max_workers(), len(jobs))
    t = time.perf_counter()
    if workers == 1:
        results = [run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_job, jobs))
    class_keys = [f"AP_cls{c}" for c in range(rc.grid.n_classes)]
    cols, rows = summary_rows(results, cells, seeds, class_keys)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        w.writerows(rows)
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "seed", "cpu_seconds", "wall_seconds"])
        for name, s, _, cpu, wall in results:
            w.writerow([name, s, f"{cpu:.1f}", f"{wall:.1f}"])
    log.info("%d runs on %d workers in %.1fs -> %s", len(jobs), workers, time.perf_counter() - t, out)
    return EXIT_OK


def cmd_selftest(args):
    seed = 0 if args.seed is None else args.seed
    results = selftest.run_all(seed=seed)
    print(selftest.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_gen_scenes(args):
    rc = resolve(args)
    out = Path(rc.out)
    config.write_resolved(rc, out)
    for split, n, tag in ((0, rc.train.n_train, "train"), (1, rc.train.n_eval, "eval")):
        d = out / tag
        d.mkdir(parents=True, exist_ok=True)
        for k, sd in enumerate(scene_seeds(rc.train.seed, split, n)):
            save_scene(d / f"scene_{k:03d}.txt", generate_scene(sd, rc.grid, rc.conflict))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="ecfusion", description="Conflict-aware LiDAR/camera BEV fusion on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if out:
            sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config override")

    sp = sub.add_parser("train", help="two-stage training; writes checkpoint and loss log")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dump-heatmaps", action="store_true", help="write per-scene PGM/CSV dumps")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate the sfa x dqr on/off grid")
    common(sp)
    sp.add_argument("--grid", default="sfa,dqr", help="axes to toggle (default: sfa,dqr)")
    sp.add_argument("--seeds", type=int, default=1, help="number of seeds per cell")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("selftest", help="run the oracle and gradient-check suites")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_selftest)

    sp = sub.add_parser("gen-scenes", help="write the train/eval scenes as text fixtures")
    common(sp)
    sp.set_defaults(fn=cmd_gen_scenes)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"ecfusion: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, config.ConfigError) as e:
        print(f"ecfusion: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.TrainingDiverged as e:
        print(f"ecfusion: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"ecfusion: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
