"""Command-line entry point: ``tilesplat {train,bench,report}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(non-finite loss), 4 I/O or input-data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import (
    BadJson,
    ConfigError,
    FormatError,
    IncompleteGrid,
    MissingFile,
    NumericalFailure,
    TooFewSamples,
)
from .instrument import (
    StageBreakdown,
    StageId,
    read_breakdown_csv,
    render_breakdown_table,
    write_breakdown_csv,
    write_breakdowns_csv,
)
from .membench import write_trace_csv
from .scene import save_checkpoint
from .stats.tables import (
    ResultRecord,
    grid_to_json,
    read_results_csv,
    render_results_table,
    summarize,
    write_results_csv,
)
from .train import TrainResult, train

log = logging.getLogger("tilesplat")

CHECKPOINT = "checkpoint.splt"
BREAKDOWN = "breakdown.csv"
ARENA = "arena.csv"
METRICS = "metrics.csv"
TIMING = "timing.csv"
TABLES = "tables.txt"
RESULTS_JSON = "results.json"
CONFIG_DUMP = "config.ini"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [run], [densify.default], ... sections")
    p.add_argument("--scene", action="append", help="scene directory or 'synthetic' (repeatable for bench)")
    p.add_argument("--densify", choices=["default", "mcmc"])
    p.add_argument("--budget", type=int, help="fixed Gaussian count for mcmc densification")
    p.add_argument("--iters", type=int, dest="iterations")
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--lambda", type=float, dest="lambda_dssim", help="D-SSIM weight in the loss")
    p.add_argument("--preallocate", action="store_true", default=None, help="size buffers once, up front")
    p.add_argument("--max-gaussians", type=int, dest="max_gaussians")
    p.add_argument("--downscale", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilesplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_options(sub.add_parser("train", help="run one training job"))
    _add_run_options(sub.add_parser("bench", help="repeat training and collect results"))
    rep = sub.add_parser("report", help="render tables and figures from bench/train output")
    rep.add_argument("inputs", nargs="+", help="output directories or results CSV files")
    rep.add_argument("--breakdown", action="append", default=[], help="extra breakdown CSV files")
    rep.add_argument("--out", help="where to write tables and figures (default: first input directory)")
    rep.add_argument("--level", type=float, default=0.90)
    rep.add_argument("--no-figures", action="store_true")
    return parser


def config_from_args(args) -> tuple[RunConfig, list[str]]:
    cfg = load_config(args.config)
    for key in (
        "densify", "budget", "iterations", "repeats", "seed", "tile_size", "lambda_dssim",
        "preallocate", "max_gaussians", "downscale", "threads", "out",
    ):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    scenes = args.scene or [cfg.scene]
    cfg.scene = scenes[0]
    return cfg.validate(), scenes


def _records(run_id: int, result: TrainResult) -> tuple[list[ResultRecord], list[ResultRecord]]:
    metrics = [
        ResultRecord(run_id, result.scene, k, v) for k, v in result.metrics.items() if k != "time_seconds"
    ]
    timing = [ResultRecord(run_id, result.scene, "time_seconds", result.metrics["time_seconds"])]
    return metrics, timing


def _write_tables(out: Path, records, breakdowns: dict[str, StageBreakdown], level=0.90, allow_single=True, figures=True) -> str:
    parts = []
    if records:
        try:
            grid, columns = summarize(records, level, allow_single=allow_single)
        except TooFewSamples as exc:
            log.warning("results table skipped: %s", exc)
        else:
            runs = len({r.run_id for r in records})
            parts.append(f"Results ({int(round(level * 100))}% CI of mean over {runs} run(s))\n")
            parts.append(render_results_table(grid, columns))
            (out / RESULTS_JSON).write_text(grid_to_json(grid))
    if breakdowns:
        parts.append("\nTiming breakdown (seconds)\n")
        parts.append(render_breakdown_table(breakdowns))
        parts.append("\nTiming breakdown, grouped (seconds)\n")
        parts.append(render_breakdown_table(breakdowns, grouped=True))
    text = "".join(parts)
    (out / TABLES).write_text(text)
    if figures:
        from .plotting import plot_breakdown, plot_results

        if breakdowns:
            plot_breakdown(breakdowns, out / "breakdown.png")
        if records:
            plot_results(records, out / "results.png")
    return text


def _mean_breakdown(runs: list[StageBreakdown]) -> StageBreakdown:
    seconds = {s: float(np.mean([b.seconds.get(s, 0.0) for b in runs])) for s in StageId}
    return StageBreakdown(seconds, float(np.mean([b.total_seconds for b in runs])))


def cmd_train(cfg: RunConfig) -> TrainResult:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg)
    save_checkpoint(result.cloud, out / CHECKPOINT)
    write_breakdown_csv(result.breakdown, out / BREAKDOWN, scene=result.scene)
    write_trace_csv(result.arena.trace, out / ARENA)
    metrics, timing = _records(0, result)
    write_results_csv(metrics, out / METRICS)
    write_results_csv(timing, out / TIMING)
    (out / CONFIG_DUMP).write_text(dump_config(cfg))
    _write_tables(out, metrics + timing, {result.scene: result.breakdown})
    return result


def cmd_bench(cfg: RunConfig, scenes: list[str] | None = None) -> list[ResultRecord]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, timing = [], []
    breakdowns: dict[str, list[StageBreakdown]] = defaultdict(list)
    for scene in scenes or [cfg.scene]:
        cfg.scene = scene
        for k in range(cfg.repeats):
            result = train(cfg, run_seed=cfg.seed + k)
            m, t = _records(k, result)
            metrics += m
            timing += t
            breakdowns[result.scene].append(result.breakdown)
    write_results_csv(metrics, out / METRICS)
    write_results_csv(timing, out / TIMING)
    merged = {scene: _mean_breakdown(runs) for scene, runs in breakdowns.items()}
    write_breakdowns_csv(merged, out / BREAKDOWN)
    (out / CONFIG_DUMP).write_text(dump_config(cfg))
    _write_tables(out, metrics + timing, merged, allow_single=False)
    return metrics + timing


def _collect_inputs(inputs):
    results, breakdowns = [], []
    for item in map(Path, inputs):
        if item.is_dir():
            for name in (METRICS, TIMING):
                if (item / name).is_file():
                    results.append(item / name)
            if (item / BREAKDOWN).is_file():
                breakdowns.append(item / BREAKDOWN)
        elif item.is_file():
            results.append(item)
        else:
            raise MissingFile(f"{item} not found")
    return results, breakdowns


def cmd_report(inputs, out=None, breakdown_files=(), level=0.90, figures=True) -> str:
    result_files, found = _collect_inputs(inputs)
    records = read_results_csv(result_files) if result_files else []
    breakdowns: dict[str, StageBreakdown] = {}
    for path in [*found, *map(Path, breakdown_files)]:
        breakdowns.update(read_breakdown_csv(path))
    if not records and not breakdowns:
        raise IncompleteGrid("no results or breakdown data found")
    first = Path(inputs[0])
    out = Path(out) if out else (first if first.is_dir() else first.parent)
    out.mkdir(parents=True, exist_ok=True)
    return _write_tables(out, records, breakdowns, level, allow_single=True, figures=figures)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            sys.stdout.write(cmd_report(args.inputs, args.out, args.breakdown, args.level, not args.no_figures))
            return EXIT_OK
        cfg, scenes = config_from_args(args)
        if args.command == "train":
            result = cmd_train(cfg)
            print(f"{result.scene}: PSNR {result.metrics['psnr']:.2f} dB, {result.cloud.count} Gaussians -> {cfg.out}")
        else:
            records = cmd_bench(cfg, scenes)
            print(f"{len(records)} result rows -> {Path(cfg.out) / METRICS}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, MissingFile, BadJson, FormatError, IncompleteGrid) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
