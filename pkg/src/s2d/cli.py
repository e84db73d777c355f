"""Command-line entry point: ``s2d {audit,train,quantize,compare,sweep}``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 a comparison
whose directional checks fail.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, MissingTensorError, model_from_tensors, model_tensors, read_checkpoint, require, write_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_value
from .diagnostics import audit_layer
from .linalg import SVDConvergenceError
from .model import collect_calibration
from .quant import parse_bits
from .report import IncompatibleReports, compare, dumps, read_json, run_experiment, write_json
from .tasks import make_spiked_task
from .train import DivergenceError, _input_site, evaluate, quantized_eval

log = logging.getLogger("s2d")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIRECTION = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.s2d"
REPORT_NAME = "report.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_set(items: list[str] | None) -> dict[str, object]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _config(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = _parse_set(getattr(args, "set", None))
    overrides.update(extra or {})
    return load_config(getattr(args, "config", None), overrides)


def _emit(obj, out: str | None) -> None:
    text = dumps(obj)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- audit


def cmd_audit(args) -> int:
    cfg = _config(args)
    tensors = read_checkpoint(args.checkpoint)
    if args.tensors:
        names = [n.strip() for n in args.tensors.split(",") if n.strip()]
        require(tensors, names)
    else:
        names = [n for n in tensors if not n.endswith(".bias")]
    calib_seed = cfg.calibration_seed if args.calib_seed is None else args.calib_seed
    reports = []
    if "fc1.weight" in tensors:
        model = model_from_tensors(tensors)
        task = make_spiked_task(cfg.resolved_task())
        if task.task.input_dim != model.input_dim:
            raise UsageError(f"checkpoint input width {model.input_dim} does not match task.input_dim {task.task.input_dim}")
        inputs = collect_calibration(model, task.calibration(calib_seed, args.calib_size))
        for name in names:
            layer = name.removesuffix(".weight")
            x = inputs[_input_site(model, layer)]
            if model.attention is not None and layer.startswith(model.attention.name + "."):
                x = x.reshape(-1, model.attention.dim)
            reports.append(audit_layer(tensors[name], x, args.k_max, name=name, top_fraction=args.top_fraction))
    else:
        # free-standing tensors: standard normal calibration inputs of matching width
        rng = np.random.default_rng(calib_seed)
        for name in names:
            w = tensors[name]
            x = rng.normal(size=(args.calib_size, w.shape[1]))
            reports.append(audit_layer(w, x, args.k_max, name=name, top_fraction=args.top_fraction))
    _emit({"calibration": {"seed": calib_seed, "batch_size": args.calib_size}, "layers": [r.to_json_dict() for r in reports]}, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    extra = {}
    if args.bits:
        w, a = parse_bits(args.bits)
        extra.update({"quant.w_bits": w, "quant.a_bits": a})
    cfg = _config(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, report = run_experiment(cfg, threaded_refresh=args.threaded_refresh)
    write_checkpoint(out / CHECKPOINT_NAME, model_tensors(result.model))
    write_json(out / REPORT_NAME, report)
    log.info("wrote %s and %s", out / CHECKPOINT_NAME, out / REPORT_NAME)
    return EXIT_OK


# ---------------------------------------------------------------- quantize


def cmd_quantize(args) -> int:
    w_bits, a_bits = parse_bits(args.bits)
    cfg = _config(args)
    model = model_from_tensors(read_checkpoint(args.checkpoint))
    task = make_spiked_task(cfg.resolved_task())
    calib_seed = cfg.calibration_seed if args.calib_seed is None else args.calib_seed
    calib_x = task.calibration(calib_seed, args.calib_size)
    data = task.eval_set()
    fp = evaluate(model, data, cfg.model.loss)
    loss, qm = quantized_eval(model, task, calib_x, args.bits, data, cfg.model.loss)
    if not (np.isfinite(fp) and np.isfinite(loss)):
        log.error("non-finite evaluation loss (fp=%s, quantized=%s)", fp, loss)
        return EXIT_NUMERIC
    out = {
        "bits": args.bits,
        "w_bits": w_bits,
        "a_bits": a_bits,
        "calibration": {"seed": calib_seed, "batch_size": args.calib_size},
        "fp_eval_loss": fp,
        "quant_eval_loss": loss,
        "weight_quant_mse": qm.weight_mse,
    }
    _emit(out, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- compare


def cmd_compare(args) -> int:
    cmp = compare(read_json(args.report_a), read_json(args.report_b))
    print(cmp.to_text())
    if args.out:
        write_json(args.out, cmp.to_json_dict())
    return EXIT_OK if cmp.passed else EXIT_DIRECTION


# ---------------------------------------------------------------- sweep


def _split_values(text: str) -> list:
    text = text.strip()
    if text.startswith("["):
        values = json.loads(text)
        if not isinstance(values, list):
            raise UsageError(f"grid values must be a list, got {text!r}")
        return values
    return [parse_value(v) for v in text.split(",")]


def parse_grid(items: list[str] | None) -> dict[str, list]:
    """``key=v1,v2`` or ``key=[v1, v2]`` entries to an ordered grid."""
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--grid expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        parsed = _split_values(values)
        if not parsed:
            raise UsageError(f"--grid {key}: no values")
        grid[key.strip()] = parsed
    return grid


def sweep_cells(base: dict, grid: dict[str, list], base_seed: int) -> list[dict]:
    """One override dict per grid cell.

    Cell ``i`` runs with seed ``base_seed + i`` unless ``seed`` is itself a
    grid axis; the empty grid is a single cell at the base seed.
    """
    cells = []
    for index, combo in enumerate(itertools.product(*grid.values())):
        over = {**base, **dict(zip(grid, combo))}
        if "seed" not in grid:
            over["seed"] = base_seed + index
        cells.append(over)
    return cells


def _run_cell(job):
    index, overrides, config_path, out_dir = job
    cfg = load_config(config_path, overrides)
    cell_dir = Path(out_dir) / f"cell{index:03d}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    result, report = run_experiment(cfg)
    write_checkpoint(cell_dir / CHECKPOINT_NAME, model_tensors(result.model))
    write_json(cell_dir / REPORT_NAME, report)
    return index, cfg, report, cell_dir / REPORT_NAME


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    base = _parse_set(args.set)
    base_cfg = load_config(args.config, base)
    cells = sweep_cells(base, grid, base_cfg.seed)
    # validate every cell before running anything
    for over in cells:
        load_config(args.config, over)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, over, args.config, str(out)) for i, over in enumerate(cells)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    bits = list(base_cfg.quant.eval_bits)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "seed", *grid, "fp_eval_loss", *[f"quant_eval_loss_{b}" for b in bits], "report"])
        for (index, cfg, report, path), over in zip(results, cells):
            q = report["final"]["quant_eval_loss"]
            writer.writerow(
                [index, cfg.seed, *[over[k] if isinstance(over[k], str) else json.dumps(over[k]) for k in grid], repr(report["final"]["fp_eval_loss"])]
                + [repr(q[b]) if b in q else "" for b in bits]
                + [str(path.relative_to(out))]
            )
    log.info("wrote %d cells to %s", len(results), out)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2d", description="Selective spectral decay experiments on desk-scale models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")

    def calib_args(sp):
        sp.add_argument("--calib-seed", type=int, default=None, help="calibration seed (default: seed + 2)")
        sp.add_argument("--calib-size", type=int, default=256)

    a = sub.add_parser("audit", help="PCDR audit of every weight in a checkpoint")
    a.add_argument("checkpoint")
    config_args(a)
    calib_args(a)
    a.add_argument("--k-max", type=int, default=3)
    a.add_argument("--top-fraction", type=float, default=None)
    a.add_argument("--tensors", help="comma-separated tensor names (default: all non-bias tensors)")
    a.add_argument("-o", "--out")
    a.set_defaults(func=cmd_audit)

    t = sub.add_parser("train", help="train one regime and write checkpoint + report")
    config_args(t)
    t.add_argument("--bits", help="QAT bit setting, e.g. W4A4")
    t.add_argument("--out", default=".", help="output directory")
    t.add_argument("--threaded-refresh", action="store_true", help="compute penalty refreshes on a worker thread")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("quantize", help="round-to-nearest PTQ evaluation of a checkpoint")
    q.add_argument("checkpoint")
    q.add_argument("--bits", required=True, help="e.g. W4A4")
    config_args(q)
    calib_args(q)
    q.add_argument("-o", "--out")
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("compare", help="metric deltas A - B and directional checks")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("-o", "--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="grid of training runs with a summary CSV")
    config_args(s)
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis (repeatable)")
    s.add_argument("--out", default="sweep")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, FloatingPointError, SVDConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, MissingTensorError, IncompatibleReports, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
