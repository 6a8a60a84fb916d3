"""Command-line driver: ``run``, ``compare`` and ``inspect-buffer``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .experiment import run_experiment, segment_ends
from .memory import SamplingSchedule, Strategy, read_snapshot, write_snapshot
from .metrics import (MetricsRecord, composition_entropy, forgetting_series, format_summary,
                      mean_final_forgetting, summary_table)

RUN_SCHEMA = "replaymem.run/1"
COMPARE_SCHEMA = "replaymem.compare/1"
OUTPUT_ROOT_ENV = "REPLAYMEM_OUTPUT_ROOT"

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    """Bad user input: arguments, mismatched runs."""


def resolve_output_dir(output_dir: str) -> Path:
    p = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


def strategy_label(strategy: Strategy, k: float) -> str:
    if strategy is Strategy.SELECTIVE:
        return f"SM-{k * 100:g}%"
    return {Strategy.LINEAR: "LM", Strategy.DYNAMIC: "DM"}[strategy]


def execute_run(cfg: ExperimentConfig) -> Path:
    """Run one experiment and write every artifact under its output directory."""
    out = resolve_output_dir(cfg.output_dir)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    for old in snap_dir.glob("*.jsonl"):
        old.unlink()

    def on_source_end(source_id, buffer):
        write_snapshot(buffer, snap_dir / f"source_{source_id}.jsonl")

    records, trainer = run_experiment(
        cfg.sources, cfg.strategy, SamplingSchedule(cfg.S, cfg.batch_size), cfg.seed,
        capacity=cfg.N, protect_fraction=cfg.K, grid=cfg.grid, n_classes=cfg.n_classes,
        embedding_dim=cfg.embedding_dim, learning_rate=cfg.learning_rate,
        eval_interval=cfg.eval_interval, n_test=cfg.n_test, ema_momentum=cfg.ema_momentum,
        on_source_end=on_source_end,
    )
    write_snapshot(trainer.buffer, snap_dir / "final.jsonl")
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    (out / "metrics.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
    (out / "evictions.jsonl").write_text("".join(json.dumps(e.to_dict()) + "\n" for e in trainer.evictions))

    ends = segment_ends(cfg.sources)
    label = strategy_label(cfg.strategy, cfg.K)
    final = records[-1]
    table = summary_table({label: final})
    run_info = {
        "schema": RUN_SCHEMA,
        "label": label,
        "strategy": cfg.strategy.value,
        "K": cfg.K,
        "seed": cfg.seed,
        "stream_key": cfg.stream_key(),
        "segment_end": {str(k): v for k, v in ends.items()},
        "final_average_dice": final.average_dice(),
        "final_mean_forgetting": mean_final_forgetting(records, ends),
        "final_composition_entropy": composition_entropy(final.buffer_composition),
        "final_buffer_composition": {str(k): v for k, v in final.buffer_composition.items()},
        "summary": {"classes": table["classes"],
                    "per_class": {str(c): v for c, v in table["rows"][label]["per_class"].items()},
                    "average": table["rows"][label]["average"]},
    }
    (out / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(format_summary(table) + "\n")
    return out


def load_run(run_dir) -> tuple[dict, list[MetricsRecord]]:
    run_dir = Path(run_dir)
    info_path = run_dir / "run.json"
    if not info_path.is_file():
        raise ValidationError(f"{run_dir} is not a completed run (no run.json)")
    info = json.loads(info_path.read_text())
    records = [MetricsRecord.from_json(ln) for ln in (run_dir / "metrics.jsonl").read_text().splitlines() if ln]
    return info, records


def compare_runs(run_dirs: Sequence) -> dict:
    if len(run_dirs) < 2:
        raise ValidationError(f"compare needs at least 2 run directories, got {len(run_dirs)}")
    runs = []
    for d in run_dirs:
        info, records = load_run(d)
        runs.append((Path(d), info, records))
    keys = {info["stream_key"] for _, info, _ in runs}
    if len(keys) != 1:
        raise ValidationError(f"runs were made on different stream configurations: {sorted(keys)}")
    seeds = sorted({info["seed"] for _, info, _ in runs})

    labelled = {}
    for d, info, records in runs:
        label = info["label"]
        if label in labelled:
            label = f"{label}@{d.name}"
        labelled[label] = (info, records)
    order = sorted(labelled, key=lambda k: -labelled[k][1][-1].average_dice())
    table = summary_table({k: labelled[k][1][-1] for k in order})
    series = {}
    for k in order:
        info, records = labelled[k]
        ends = {int(s): v for s, v in info["segment_end"].items()}
        series[k] = {
            "forgetting": forgetting_series(records, ends),
            "composition_entropy": [{"arrival_index": r.arrival_index,
                                     "entropy": composition_entropy(r.buffer_composition)} for r in records],
            "final_mean_forgetting": mean_final_forgetting(records, ends),
        }
    return {
        "schema": COMPARE_SCHEMA,
        "runs": {k: str(p) for k, p in zip(labelled, [d for d, _, _ in runs])},
        "order": order,
        "seeds": seeds,
        "seed_mismatch": len(seeds) > 1,
        "table": {"classes": table["classes"],
                  "rows": {k: {"per_class": {str(c): v for c, v in r["per_class"].items()},
                               "average": r["average"]} for k, r in table["rows"].items()}},
        "series": series,
    }


def format_comparison(report: dict) -> str:
    rows = {k: {"per_class": {int(c): v for c, v in r["per_class"].items()}, "average": r["average"]}
            for k, r in report["table"]["rows"].items()}
    text = [format_summary({"classes": report["table"]["classes"], "rows": rows}), ""]
    if report["seed_mismatch"]:
        text.append(f"warning: runs use different seeds {report['seeds']}")
    text.append("Final mean forgetting (relative Dice drop) / final composition entropy:")
    for k in report["order"]:
        s = report["series"][k]
        h = s["composition_entropy"][-1]["entropy"]
        text.append(f"  {k:<12} {s['final_mean_forgetting']:.4f} / {h:.4f}")
    return "\n".join(text)


def inspect_buffer(path) -> str:
    header, entries = read_snapshot(path)
    lines = [f"strategy={header['strategy']} N={header['capacity']} K={header['protect_fraction']} "
             f"entries={len(entries)}"]
    counts: dict[int, int] = {}
    for e in entries:
        counts[e.source_id] = counts.get(e.source_id, 0) + 1
    lines.append("per-source counts:")
    for s, n in sorted(counts.items()):
        lines.append(f"  source {s}: {n}")
    if entries:
        lines.append(f"composition entropy: {composition_entropy(counts):.4f}")
        unc = [e.uncertainty for e in entries if e.uncertainty is not None]
        if unc:
            lines.append(f"uncertainty: mean={np.mean(unc):.4f} min={min(unc):.4f} max={max(unc):.4f}")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="replaymem", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--strategy", choices=[s.value for s in Strategy])
    r.add_argument("--N", type=int)
    r.add_argument("--S", type=int)
    r.add_argument("--K", type=float)
    r.add_argument("--batch-size", dest="batch_size", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--eval-interval", dest="eval_interval", type=int)
    r.add_argument("--output-dir", dest="output_dir")

    c = sub.add_parser("compare", help="compare completed runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--json", dest="json_out", help="write the machine-readable report here")

    i = sub.add_parser("inspect-buffer", help="pretty-print a buffer snapshot")
    i.add_argument("snapshot")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            cfg = apply_overrides(cfg, {k: getattr(args, k) for k in
                                        ("strategy", "N", "S", "K", "batch_size", "seed", "eval_interval",
                                         "output_dir")})
            out = execute_run(cfg)
            print((out / "summary.txt").read_text(), end="")
            print(f"artifacts written to {out}")
        elif args.command == "compare":
            report = compare_runs(args.run_dirs)
            if args.json_out:
                Path(args.json_out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(format_comparison(report))
        elif args.command == "inspect-buffer":
            print(inspect_buffer(args.snapshot))
    except (ConfigError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
