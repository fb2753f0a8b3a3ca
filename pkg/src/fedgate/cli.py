"""Command-line interface.

Subcommands: generate (write synthetic datasets), train (run an
experiment), eval (validation losses from a checkpoint), export (rebuild
metrics files from a finished run). Every experiment field is exposed as a
flag; a YAML config file supplies defaults that flags override.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .client import evaluate
from .data import generate_clients, save_datasets
from .harness import (ALL_MODES, ExperimentConfig, load_experiment,
                      run_experiment)

_FIELD_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, action="store_true", default=None,
                                help=f"set {f.name} (default "
                                     f"{f.default})")
        elif f.name == "mode":
            parser.add_argument(flag, choices=ALL_MODES, default=None,
                                help=f"aggregation mode (default {f.default})")
        else:
            parser.add_argument(flag, type=_FIELD_TYPES[f.type], default=None,
                                help=f"{f.name} (default {f.default})")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if args.config is not None:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(raw, dict):
            raise SystemExit(f"config file {args.config} must be a mapping")
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(raw) - known
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    for f in fields(ExperimentConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"bad configuration: {exc}") from exc


def _cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    datasets, _ = generate_clients(config.data_config(), config.seed)
    save_datasets(out, datasets, config.seed)
    (out / "config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    for ds in datasets:
        print(f"client {ds.client_id} (cluster {ds.cluster_id}): "
              f"{len(ds.train)} train / {len(ds.val)} val samples")
    print(f"wrote {out / 'scenes.json'} and {out / 'arrays.npz'}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_experiment(config, out_dir=args.out,
                            resume_from=args.resume, verbose=True)
    final = result.records[-1]
    mean_loss = float(np.mean(list(final.val_losses.values())))
    print(f"done: {len(result.records)} rounds, final mean val loss "
          f"{mean_loss:.4f}")
    print(f"metrics in {result.out_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config, models, datasets, _, round_index = load_experiment(args.ckpt)
    losses = {}
    for ds in datasets:
        model = models[0] if config.mode == "centralized" else \
            next(m for m in models if m.client_id == ds.client_id)
        losses[ds.client_id] = evaluate(model, ds.val, config.huber_delta,
                                        config.batch_size)
    print(f"checkpoint round {round_index}, mode {config.mode}")
    for cid, loss in sorted(losses.items()):
        print(f"client {cid}: val loss {loss:.6f}")
    print(f"mean: {float(np.mean(list(losses.values()))):.6f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(
            {"round": round_index,
             "val_loss": {str(k): v for k, v in sorted(losses.items())},
             "mean_val_loss": float(np.mean(list(losses.values())))},
            indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    config = ExperimentConfig(
        **json.loads((run_dir / "config.json").read_text()))
    csv_bytes = (run_dir / "metrics.csv").read_bytes()
    (out / "metrics.csv").write_bytes(csv_bytes)

    with open(run_dir / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SystemExit("metrics.csv has no data rows")
    last_round = rows[-1]["round"]
    final_rows = [r for r in rows if r["round"] == last_round]
    final_losses = [float(r["val_loss"]) for r in final_rows]
    weights = None
    trunk_hash = ""
    log_path = run_dir / "records.jsonl"
    if log_path.exists():
        last = json.loads(log_path.read_text().strip().splitlines()[-1])
        weights = last["weights"]
        trunk_hash = last["trunk_hash"]
    summary = {
        "rounds": len({r["round"] for r in rows}),
        "mode": config.mode,
        "no_iosp": config.no_iosp,
        "no_dgmoe": config.no_dgmoe,
        "no_eda": config.no_eda,
        "seed": config.seed,
        "final_val_loss": {r["client_id"]: float(r["val_loss"])
                           for r in final_rows},
        "final_mean_val_loss": float(np.mean(final_losses)),
        "mean_density_overall": float(np.mean(
            [float(r["density_overall"]) for r in rows])),
        "final_weights": weights,
        "final_trunk_hash": trunk_hash,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"exported metrics.csv and summary.json to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgate",
        description="Federated gated-MoE training simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write synthetic client datasets")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--config", default=None, help="YAML config file")
    _add_config_flags(p_gen)
    p_gen.set_defaults(func=_cmd_generate)

    p_train = sub.add_parser("train", help="run a federated experiment")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--config", default=None, help="YAML config file")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint file or run directory to resume")
    _add_config_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="validation losses from a checkpoint")
    p_eval.add_argument("--ckpt", required=True,
                        help="checkpoint file or run directory")
    p_eval.add_argument("--out", default=None, help="write eval.json here")
    p_eval.set_defaults(func=_cmd_eval)

    p_exp = sub.add_parser("export", help="rebuild metrics files from a run")
    p_exp.add_argument("--run", required=True, help="finished run directory")
    p_exp.add_argument("--out", default=None,
                       help="destination (default: the run directory)")
    p_exp.set_defaults(func=_cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
