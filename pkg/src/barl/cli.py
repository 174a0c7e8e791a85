"""Command-line entry point: ``barl generate|train|eval|gradcheck|ablate``.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numeric
halt, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import cc3d, gradcheck, volgen as vg
from . import trainer as tr
from .alignlabel import NumericHalt

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(ValueError):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--key=value`` / ``--key value`` pairs left over by argparse."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise tr.ConfigError(f"unexpected argument {tok!r}; overrides look like --key=value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            value = extra[i]
        else:
            raise tr.ConfigError(f"override --{key} has no value")
        key = key.replace("-", "_")
        if key in out:
            raise tr.ConfigError(f"override --{key} given twice")
        out[key] = value
        i += 1
    return out


def _parse_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(":")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError:
        raise UsageError(f"expected MIN:MAX, got {text!r}") from None
    if not 1 <= a <= b:
        raise UsageError(f"range must satisfy 1 <= MIN <= MAX, got {text!r}")
    return a, b


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    if args.grid < 8 or args.grid % 8:
        raise UsageError(f"--grid must be a positive multiple of 8, got {args.grid}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cfg = vg.GeneratorConfig(grid=args.grid, n_classes=args.classes, fragments=_parse_range(args.fragments))
    samples = vg.generate_dataset(args.count, args.seed, cfg)
    meta = {"count": args.count, "grid": args.grid, "classes": args.classes,
            "fragments": list(cfg.fragments), "seed": args.seed}
    index = vg.write_dataset(args.out, samples, meta)
    print(f"wrote {len(samples)} samples and {index}")
    for c in range(1, args.classes):
        counts = [cc3d.count_components(s.label == c, 26) for s in samples]
        print(f"class {c}: components per volume mean {np.mean(counts):.3f} "
              f"min {min(counts)} max {max(counts)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval

def _print_row(row: dict) -> None:
    msg = f"epoch {row['epoch']:3d} lr {row['lr']:.5f} loss {row['loss_total']:.4f}"
    if "val_dice_mean" in row:
        msg += f" val_dice {row['val_dice_mean']:.4f}"
    print(msg, flush=True)


def cmd_train(args, extra: list[str]) -> int:
    overrides = _parse_overrides(extra)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = tr.TrainConfig.from_file(path, overrides)
    else:
        cfg = tr.TrainConfig.from_mapping(overrides)
    state = None
    if args.resume:
        state = tr.load_state(args.resume)
        if state.config != cfg:
            raise tr.ConfigError("resumed checkpoint was trained with a different config")
    state = tr.train(cfg, args.out, state=state, log=None if args.quiet else _print_row)
    last = state.history[-1] if state.history else {}
    if "val_dice_mean" in last:
        print(f"final val_dice_mean {last['val_dice_mean']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = tr.load_state(args.checkpoint)
    cfg = state.config
    samples = vg.read_dataset(args.data) if args.data else tr.build_data(cfg).test
    if not samples:
        raise UsageError("evaluation set is empty")
    report = tr.evaluate(state, samples, args.mode)
    row = report.as_row("test")
    for k, v in row.items():
        print(f"{k} {v:.6f}")
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([repr(float(v)) for v in row.values()])
        Path(args.csv).write_text(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    names = sorted(gradcheck.ALL_CASES) if args.ops == "all" else args.ops.split(",")
    unknown = [n for n in names if n not in gradcheck.ALL_CASES]
    if unknown:
        raise UsageError(f"unknown op(s) {unknown}; choose from all, {', '.join(sorted(gradcheck.ALL_CASES))}")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    failed = []
    t0 = time.time()
    for res in gradcheck.run_cases(names, args.trials, args.coords or None):
        ok = res.passed(args.tol)
        print(f"{'PASS' if ok else 'FAIL'} {res.name:20s} max_rel_err {res.max_rel_err:.3e} "
              f"coords {res.n_coords} ({res.seconds:.2f}s)")
        if not ok:
            failed.append(res.name)
    print(f"{len(names) - len(failed)}/{len(names)} passed at tol {args.tol:g} in {time.time() - t0:.1f}s")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# ablate

SUMMARY_METRICS = ("val_dice_mean", "val_jaccard_mean", "val_hd95_mean", "val_asd_mean")


def parse_grid(specs: list[str]) -> list[tuple[str, list[str]]]:
    axes = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        vals = [v for v in values.split(",") if v]
        if not sep or not key or not vals:
            raise UsageError(f"grid axis must look like key=v1,v2 got {spec!r}")
        axes.append((key.strip(), vals))
    if not axes:
        raise UsageError("empty grid: give at least one --grid key=v1,v2")
    keys = [k for k, _ in axes]
    if len(set(keys)) != len(keys):
        raise UsageError(f"grid axis repeated: {keys}")
    return axes


def grid_cells(axes) -> list[dict[str, str]]:
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in axes))]


def final_metrics(csv_path) -> dict[str, float]:
    """Last-row held-out metrics of a run's metrics CSV, with lesion-class means."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    last = rows[-1]
    out = {"val_dice_mean": float(last["val_dice_mean"])}
    for m in ("jaccard", "hd95", "asd"):
        vals = [float(v) for k, v in last.items() if k.startswith(f"val_{m}_c") and v != ""]
        finite = [v for v in vals if math.isfinite(v)]
        out[f"val_{m}_mean"] = float(np.mean(finite)) if finite else math.inf
    return out


def _run_cell(job: tuple[dict, str]) -> tuple[str, str]:
    raw, out_dir = job
    try:
        cfg = tr.TrainConfig.from_mapping(raw)
        tr.train(cfg, out_dir)
        return out_dir, "ok"
    except Exception as e:  # fault isolation: one bad cell must not stop the grid
        return out_dir, f"failed: {type(e).__name__}: {e}"


def _mean_std(xs: list[float]) -> tuple[float, float]:
    """Mean and sample std over the finite values; surface metrics can be infinite."""
    finite = [x for x in xs if math.isfinite(x)]
    if not finite:
        return (math.inf if xs else math.nan), math.nan
    return float(np.mean(finite)), float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0


def write_summary(path, axes, cells, results: dict[tuple[int, int], tuple[str, str]], seeds) -> list[dict]:
    keys = [k for k, _ in axes]
    rows = []
    for ci, cell in enumerate(cells):
        runs = [results[(ci, s)] for s in seeds]
        good = [final_metrics(Path(d) / "metrics.csv") for d, status in runs if status == "ok"]
        row = {"cell": ci, **cell, "n_runs": len(runs), "n_ok": len(good),
               "status": "ok" if len(good) == len(runs) else "failed"}
        for m in SUMMARY_METRICS:
            mean, std = _mean_std([g[m] for g in good])
            row[f"{m}"] = mean
            row[f"{m}_std"] = std
        rows.append(row)
    cols = ["cell", *keys, "n_runs", "n_ok", "status"] + [c for m in SUMMARY_METRICS for c in (m, f"{m}_std")]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    Path(path).write_text(buf.getvalue())
    return rows


def cmd_ablate(args, extra: list[str]) -> int:
    axes = parse_grid(args.grid or [])
    base = _parse_overrides(extra)
    if args.config:
        base = {**tr.parse_kv_text(Path(args.config).read_text()), **base}
    seeds = [int(s) for s in args.seeds.split(",")] if "," in args.seeds else list(range(int(args.seeds)))
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    if any(k == "seed" for k, _ in axes):
        raise UsageError("seed is set by --seeds, not by a grid axis")
    cells = grid_cells(axes)
    # validate every cell up front so a typo fails fast instead of per run
    for cell in cells:
        tr.TrainConfig.from_mapping({**base, **cell})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, order = [], []
    for ci, cell in enumerate(cells):
        for s in seeds:
            jobs.append(({**base, **cell, "seed": str(s)}, str(out / f"cell_{ci:02d}" / f"seed_{s}")))
            order.append((ci, s))
    t0 = time.time()
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            finished = list(pool.map(_run_cell, jobs))
    else:
        finished = []
        for job in jobs:
            finished.append(_run_cell(job))
            print(f"{job[1]}: {finished[-1][1]}", flush=True)
    results = dict(zip(order, finished))
    (out / "cells.json").write_text(json.dumps(
        [{"cell": ci, **cells[ci], "seed": s, "dir": d, "status": st} for (ci, s), (d, st) in results.items()],
        indent=1))
    rows = write_summary(out / "summary.csv", axes, cells, results, seeds)
    for r in rows:
        label = " ".join(f"{k}={r[k]}" for k, _ in axes)
        print(f"{label}: dice {r['val_dice_mean']:.4f} +- {r['val_dice_mean_std']:.4f} "
              f"({r['n_ok']}/{r['n_runs']} ok)")
    print(f"summary written to {out / 'summary.csv'} ({time.time() - t0:.0f}s)")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAIL


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="barl", description="Dual-branch semi-supervised 3D lesion segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic volume dataset")
    g.add_argument("--count", type=int, default=40)
    g.add_argument("--grid", type=int, default=16)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--fragments", default="2:3", help="fragments per lesion class, MIN:MAX")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train both branches; extra --key=value flags override the config")
    t.add_argument("--config", help="plain key=value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint stem to continue from")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out volumes")
    e.add_argument("--checkpoint", required=True, help="checkpoint stem (without .json/.bin)")
    e.add_argument("--data", help="dataset directory; default regenerates the configured test set")
    e.add_argument("--mode", choices=("ensemble", "S", "T"))
    e.add_argument("--csv", help="write the metrics row to this CSV")

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--ops", default="all", help="all, or comma-separated op names")
    c.add_argument("--trials", type=int, default=1)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--coords", type=int, default=64, help="coordinates probed per input (0: all)")

    a = sub.add_parser("ablate", help="multi-seed grid of training runs with a mean/std summary")
    a.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="one axis; repeat for more")
    a.add_argument("--seeds", default="2", help="seed count, or comma-separated seed list")
    a.add_argument("--config", help="base key=value config file")
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command not in ("train", "ablate"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        return cmd_ablate(args, extra)
    except (tr.ConfigError, UsageError, vg.GenerationError) as e:
        _err(str(e))
        return EXIT_CONFIG
    except NumericHalt as e:
        _err(f"numeric halt: {e}")
        return EXIT_NUMERIC
    except OSError as e:
        _err(f"I/O: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
