"""Command line interface: train, ablate, plot, render-triggers.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
arguments. Any config key can be overridden via LTBD_* environment
variables (dots become double underscores).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import plots
from .config import SWEEP_PARAMS, ExperimentConfig, load_config
from .data import write_manifest
from .errors import ConfigError
from .metrics import write_report_csv
from .training import (fit, init_state, load_checkpoint, prepare_datasets,
                       save_checkpoint, trigger_fn_for)
from .triggers import generate_trigger

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise ConfigError(
            f"output directory {path} already exists and is not empty; "
            "choose a new directory")
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_training(config: ExperimentConfig, out_dir: Path, quiet: bool = False):
    """Execute one full run into a fresh directory."""
    _fresh_dir(out_dir)
    config.write(out_dir / "config.txt")
    dataset, test_images, test_labels = prepare_datasets(config)
    state = init_state(config, dataset)
    write_manifest(out_dir / "manifest.json", dataset, state.plan,
                   config["seed"], config.hash)
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        def on_epoch(record: dict) -> None:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if not quiet:
                rep = record.get("report")
                line = (f"epoch {record['epoch']:3d}"
                        f"  loss {record['losses']['total']:.4f}")
                if rep:
                    line += (f"  acc {rep['acc_groups']['all']:.3f}"
                             f"  asr {rep['asr_groups']['all']:.3f}")
                print(line)
        state = fit(config, dataset, test_images, test_labels, state=state,
                    epoch_callback=on_epoch)
    save_checkpoint(state, out_dir / "checkpoint.pt")
    if state.reports:
        write_report_csv(out_dir / "report.csv", state.reports[-1])
    return state


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = load_config(args.config, **overrides)
    out_dir = Path(args.out) if args.out else Path(config["out"])
    state = run_training(config, out_dir, quiet=args.quiet)
    if state.reports:
        final = state.reports[-1]
        print(f"run complete: ACC(all)={final.acc_groups['all']:.4f} "
              f"ASR(all)={final.asr_groups['all']:.4f} -> {out_dir}")
    else:
        print(f"run complete (no evaluation epochs) -> {out_dir}")
    return EXIT_OK


def _parse_sweep(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError(f"--sweep expects param=v1,v2,..., got {spec!r}")
    param, _, raw = spec.partition("=")
    param = param.strip()
    if param not in SWEEP_PARAMS:
        raise ConfigError(
            f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    values = [tok.strip() for tok in raw.split(",") if tok.strip()]
    if not values:
        raise ConfigError(f"--sweep {param} has no values")
    return param, values


def cmd_ablate(args) -> int:
    param, values = _parse_sweep(args.sweep)
    key = SWEEP_PARAMS[param]
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    base = load_config(args.config, **overrides)
    out_dir = _fresh_dir(Path(args.out))
    rows = []
    for value in values:
        child_cfg = base.updated(**{key.replace(".", "__"): value})
        child_dir = out_dir / f"{param}_{value}"
        print(f"== {param} = {value} -> {child_dir}")
        state = run_training(child_cfg, child_dir, quiet=args.quiet)
        final = state.reports[-1]
        rows.append({
            "param": param, "value": value, "config_hash": child_cfg.hash,
            **{f"asr_{g}": final.asr_groups[g]
               for g in ("all", "many", "medium", "few")},
            **{f"acc_{g}": final.acc_groups[g]
               for g in ("all", "many", "medium", "few")},
        })
    fields = ["param", "value", "config_hash",
              "asr_all", "asr_many", "asr_medium", "asr_few",
              "acc_all", "acc_many", "acc_medium", "acc_few"]
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v)
                             for k, v in row.items()})
    print(f"sweep complete -> {out_dir / 'sweep.csv'}")
    return EXIT_OK


def _load_run(run_dir: Path) -> tuple[ExperimentConfig, dict, list[dict]]:
    config_path = run_dir / "config.txt"
    manifest_path = run_dir / "manifest.json"
    metrics_path = run_dir / "metrics.jsonl"
    for p in (config_path, manifest_path, metrics_path):
        if not p.exists():
            raise ConfigError(f"missing run file: {p}")
    config = load_config(config_path, environ={})
    manifest = json.loads(manifest_path.read_text())
    records = [json.loads(line) for line in metrics_path.read_text().splitlines()
               if line.strip()]
    if not records:
        raise ConfigError(f"{metrics_path} has no metric rows")
    hashes = {config.hash, manifest["config_hash"],
              *(r["config_hash"] for r in records)}
    if len(hashes) != 1:
        raise ConfigError(
            f"config hash mismatch in {run_dir}: found {sorted(hashes)}")
    return config, manifest, records


def _plot_run(run_dir: Path, fig_dir: Path) -> list[Path]:
    config, _, records = _load_run(run_dir)
    reported = [r for r in records if "report" in r]
    if not reported:
        raise ConfigError(f"{run_dir} has no evaluation rows to plot")
    final = reported[-1]["report"]
    schedule_history = [[0] * len(records[0]["schedule"])]
    schedule_history += [r["schedule"] for r in records]
    fig_dir.mkdir(parents=True, exist_ok=True)
    out = [
        plots.plot_classwise(final["asr_per_class"], "attack success rate",
                             "class-wise ASR", fig_dir / "classwise_asr.png",
                             config.hash, target_label=final["target_label"]),
        plots.plot_classwise(final["acc_per_class"], "clean accuracy",
                             "class-wise ACC", fig_dir / "classwise_acc.png",
                             config.hash),
        plots.plot_schedule(schedule_history, config["selector.s_max"],
                            fig_dir / "schedule.png", config.hash),
    ]
    return out


def cmd_plot(args) -> int:
    target = Path(args.run)
    if not target.exists():
        raise ConfigError(f"no such run or sweep directory: {target}")
    sweep_csv = target / "sweep.csv"
    written: list[Path] = []
    if sweep_csv.exists():
        with open(sweep_csv) as fh:
            rows = list(csv.DictReader(fh))
        series: dict[str, list[tuple[int, float]]] = {}
        param = rows[0]["param"]
        for row in rows:
            child = target / f"{param}_{row['value']}"
            _, _, records = _load_run(child)
            if row["config_hash"] not in {r["config_hash"] for r in records}:
                raise ConfigError(
                    f"sweep.csv hash does not match metrics in {child}")
            series[row["value"]] = [
                (r["epoch"], r["report"]["asr_groups"]["all"])
                for r in records if "report" in r]
            written.extend(_plot_run(child, child / "figures"))
        fig_dir = target / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        written.append(plots.plot_sweep_curves(
            param, series, fig_dir / "sweep_curves.png", rows[0]["config_hash"]))
        written.append(plots.plot_sweep_summary(
            param, [float(r["value"]) for r in rows],
            [float(r["asr_all"]) for r in rows],
            [float(r["acc_all"]) for r in rows],
            fig_dir / "sweep_summary.png", rows[0]["config_hash"]))
    else:
        written.extend(_plot_run(target, target / "figures"))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_render_triggers(args) -> int:
    run_dir = Path(args.run)
    config, _, _ = _load_run(run_dir)
    checkpoint = run_dir / "checkpoint.pt"
    if not checkpoint.exists():
        raise ConfigError(f"missing checkpoint: {checkpoint}")
    dataset, test_images, _ = prepare_datasets(config)
    state = load_checkpoint(checkpoint, dataset)
    count = min(args.count, len(test_images))
    rng = np.random.default_rng(config["seed"])
    picks = rng.choice(len(test_images), size=count, replace=False)
    clean = test_images[torch.as_tensor(picks)]
    if config["attack.trigger"] == "patch":
        backdoored = trigger_fn_for(state)(clean)
        triggers = backdoored
    else:
        triggers = generate_trigger(state.generator, clean)
        backdoored = trigger_fn_for(state)(clean)
    out_path = Path(args.out) if args.out else run_dir / "figures" / "triggers.png"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    plots.render_trigger_grid(clean, triggers, backdoored, out_path, config.hash)
    print(out_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltbackdoor",
        description="Long-tailed backdoor attack experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training experiment")
    train.add_argument("--config", help="config file (key = value lines)")
    train.add_argument("--seed", type=int, help="override the config seed")
    train.add_argument("--out", help="run directory (must be empty or new)")
    train.add_argument("--quiet", action="store_true")
    train.set_defaults(func=cmd_train)

    ablate = sub.add_parser("ablate", help="sweep one parameter")
    ablate.add_argument("--config", help="base config file")
    ablate.add_argument("--sweep", required=True, metavar="param=v1,v2,...")
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--out", required=True, help="sweep directory")
    ablate.add_argument("--quiet", action="store_true")
    ablate.set_defaults(func=cmd_ablate)

    plot = sub.add_parser("plot", help="render figures for a run or sweep")
    plot.add_argument("--run", required=True, help="run or sweep directory")
    plot.set_defaults(func=cmd_plot)

    render = sub.add_parser("render-triggers",
                            help="grid of clean / trigger / backdoored images")
    render.add_argument("--run", required=True)
    render.add_argument("--count", type=int, default=6)
    render.add_argument("--out")
    render.set_defaults(func=cmd_render_triggers)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
