"""Command-line entry point: ``sfuda <command> [options]``.

Commands: gen-data, train-source, adapt, ablate, grad-check. Verbosity comes
from the SFUDA_LOG environment variable (quiet, info or debug).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

from . import gradcheck
from .adapt import METRIC_COLUMNS, RunResult, ablate, run_adaptation, stream, train_source
from .config import ConfigError, RunConfig, load_config, to_ini
from .data import generate_domain_pair, write_dataset_csv
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger("sfuda")

METRICS_HEADER = "# sfuda-metrics v1"
SUMMARY_HEADER = "# sfuda-summary v1"
ABLATION_HEADER = "# sfuda-ablation v1"
QUEUE_HEADER = "# sfuda-queue v1"

_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = _LEVELS.get(os.environ.get("SFUDA_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _seeds(text: str | None, config: RunConfig) -> list[int]:
    if not text:
        return [config.seed]
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad --seeds value {text!r}") from None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for m in result.metrics:
            writer.writerow([_fmt(v) for v in m.row()])


def write_summary(result: RunResult, path: Path, wall_time: float) -> None:
    results = {
        "seed": result.config.seed,
        "source_acc": result.source_acc,
        "source_only_target_acc": result.source_only_target_acc,
        "initial_pl_acc": result.initial_pl_acc,
        "final_target_acc": result.final_target_acc,
        "final_pl_acc": result.final_pl_acc,
        "epochs_run": len(result.metrics),
        "wall_time_s": round(wall_time, 3),
    }
    path.write_text(SUMMARY_HEADER + "\n" + to_ini(result.config, extra={"results": results}))


def write_queue_log(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(QUEUE_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "queue_length", "mask_kept_fraction"])
        for epoch, length, kept in result.state.queue_log:
            writer.writerow([epoch, length, _fmt(kept)])


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    pair = generate_domain_pair(config.data, stream(seed, "data"))
    rows = write_dataset_csv(pair, args.out)
    log.info("wrote %d rows to %s", rows, args.out)
    return 0


def cmd_train_source(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    pair = generate_domain_pair(config.data, stream(config.seed, "data"))
    params = train_source(config, pair.source)
    save_checkpoint(params, args.out)
    log.info("saved source model to %s", args.out)
    return 0


def cmd_adapt(args) -> int:
    config = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = load_checkpoint(args.source_checkpoint) if args.source_checkpoint else None
    for seed in _seeds(args.seeds, config):
        cfg = config.replace(seed=seed)
        start = time.perf_counter()
        result = run_adaptation(cfg, source_model=source, keep_state=args.queue_log)
        elapsed = time.perf_counter() - start
        write_metrics(result, out / f"metrics_seed{seed}.csv")
        write_summary(result, out / f"summary_seed{seed}.ini", elapsed)
        if args.dump_data:
            write_dataset_csv(generate_domain_pair(cfg.data, stream(seed, "data")), out / f"data_seed{seed}.csv")
        if args.queue_log:
            write_queue_log(result, out / f"queue_seed{seed}.csv")
        if args.save_model:
            save_checkpoint(result.online, out / f"model_seed{seed}.npz")
        log.info("seed %d done in %.1fs: target acc %.4f (source-only %.4f)", seed, elapsed,
                 result.final_target_acc, result.source_only_target_acc)
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(args.seeds, config)
    cells = args.cells.split(",") if args.cells else None

    def on_result(cell: str, result: RunResult) -> None:
        cell_dir = out / cell
        cell_dir.mkdir(exist_ok=True)
        write_metrics(result, cell_dir / f"metrics_seed{result.config.seed}.csv")
        log.info("cell %s seed %d: target acc %.4f", cell, result.config.seed, result.final_target_acc)

    try:
        rows, medians = ablate(config, seeds, cells, on_result)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        fh.write(ABLATION_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell", "seed", "source_only_target_acc", "initial_pl_acc", "final_target_acc",
                         "final_pl_acc"])
        for r in rows:
            writer.writerow([r.cell, r.seed, _fmt(r.source_only_target_acc), _fmt(r.initial_pl_acc),
                             _fmt(r.final_target_acc), _fmt(r.final_pl_acc)])
    with open(out / "ablation_medians.csv", "w", newline="") as fh:
        fh.write(ABLATION_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell", "median_final_target_acc"])
        for cell, med in medians.items():
            writer.writerow([cell, _fmt(med)])
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_suites(args.trials, args.seed)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed |= not r.passed
        print(f"{status} {r.name}: max relative error {r.max_relative_error:.3e} "
              f"over {r.trials} trials ({r.seconds:.2f}s)")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfuda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic source/target dataset as CSV")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train a source model and save a checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run target adaptation; one metrics CSV and summary per seed")
    p.add_argument("--config")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config's run.seed)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--source-checkpoint", help="reuse a saved source model instead of training one")
    p.add_argument("--dump-data", action="store_true", help="also write the dataset CSV per seed")
    p.add_argument("--queue-log", action="store_true", help="also write per-epoch queue diagnostics")
    p.add_argument("--save-model", action="store_true", help="also save the adapted online model")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run the ablation grid over seeds")
    p.add_argument("--config")
    p.add_argument("--seeds")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cells", help="comma-separated subset of cells (default: all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss gradient")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sfuda: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sfuda: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
