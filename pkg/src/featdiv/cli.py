"""Command-line entry point for training, attacking, and analysis runs.

Every subcommand takes a flat key=value config file plus --set overrides, so
any reported result can be reproduced from its config hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .harness import (
    ConfigError,
    attack_dataset,
    config_hash,
    dataset_from_config,
    dhf_config,
    load_config,
    parse_config_text,
    run_eval,
    run_sweep,
)
from .models import REFERENCE_ARCHS, accuracy, build_model, load_model, save_model, train
from .sensitivity import mask_accuracy_sweep, sensitivity_report


def _load_cfg(args) -> dict[str, str]:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["master_seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    if args.config:
        return load_config(args.config, overrides)
    cfg = parse_config_text("")
    cfg.update(overrides)
    return cfg


def _parse_grid(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _resolve_arch(name_or_path: str) -> str:
    if name_or_path in REFERENCE_ARCHS:
        return REFERENCE_ARCHS[name_or_path]
    with open(name_or_path) as fh:
        return fh.read()


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    seed = int(cfg["master_seed"])
    train_cfg = dict(cfg)
    train_cfg["dataset.split"] = "train"
    test_cfg = dict(cfg)
    test_cfg["dataset.split"] = "test"
    train_set = dataset_from_config(train_cfg)
    test_set = dataset_from_config(test_cfg)
    model = build_model(_resolve_arch(args.arch), seed=seed)
    result = train(
        model, train_set, test_set,
        epochs=args.epochs, lr=args.lr, momentum=args.momentum,
        batch_size=args.batch_size, seed=seed,
    )
    save_model(model, args.model_out)
    print(json.dumps({
        "model": args.model_out,
        "train_accuracy": result.train_accuracy,
        "test_accuracy": result.test_accuracy,
        "final_loss": result.final_loss,
        "config_hash": config_hash(cfg),
    }))
    return 0


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    dataset = dataset_from_config(cfg)
    n_cap = int(cfg["num_images"])
    if n_cap and n_cap < len(dataset):
        dataset = dataset.subset(np.arange(n_cap))
    model = load_model(args.surrogate)
    x_adv, errors = attack_dataset(model, dataset, cfg)
    out = args.adv_out or os.path.join(cfg["out_dir"] or ".", "adversarial.npz")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    np.savez_compressed(out, x_adv=x_adv, labels=dataset.labels)
    print(json.dumps({
        "adv_out": out,
        "images": len(dataset),
        "errors": errors,
        "config_hash": config_hash(cfg),
    }))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    report = run_eval(cfg)
    print(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    grid = _parse_grid(args.grid)
    results = run_sweep(cfg, args.axis, grid)
    rows = []
    for value, rep in results:
        rates = rep.transfer_rates()
        rows.append({"value": value,
                     "mean_transfer_success": float(np.mean(rates)) if rates else None})
    print(json.dumps({"axis": args.axis, "points": rows, "config_hash": config_hash(cfg)}))
    return 0


def cmd_mask_sweep(args) -> int:
    cfg = _load_cfg(args)
    dataset = dataset_from_config(cfg)
    n_cap = int(cfg["num_images"])
    if n_cap and n_cap < len(dataset):
        dataset = dataset.subset(np.arange(n_cap))
    model = load_model(args.model)
    report = mask_accuracy_sweep(
        model, dataset,
        rho_grid=_parse_grid(args.rho_grid),
        ratio_grid=_parse_grid(args.ratio_grid),
        trials=args.trials, seed=int(cfg["master_seed"]), mode=args.mode,
    )
    out_dir = cfg["out_dir"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "mask_sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_ratio", "mask_fraction", "accuracy"])
            for r, p, a in report.rows():
                w.writerow([f"{r:.6f}", f"{p:.6f}", f"{a:.6f}"])
    print(json.dumps({
        "clean_accuracy": report.clean_accuracy,
        "rows": [{"layer_ratio": r, "mask_fraction": p, "accuracy": a}
                 for r, p, a in report.rows()],
        "config_hash": config_hash(cfg),
    }))
    return 0


def cmd_hessian_trace(args) -> int:
    cfg = _load_cfg(args)
    dataset = dataset_from_config(cfg)
    model = load_model(args.model)
    batch = dataset.images[: args.batch_size]
    labels = dataset.labels[: args.batch_size]
    sites = args.sites.split(",") if args.sites else None
    report = sensitivity_report(model, batch, labels, sites=sites,
                                num_probes=args.probes, seed=int(cfg["master_seed"]))
    print(json.dumps({
        "sites": [
            {"site": s, "dim": d, "trace_over_dim": est, "stderr": se, "probes": p}
            for s, d, est, se, p in report.rows()
        ],
        "config_hash": config_hash(cfg),
    }))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featdiv",
        description="Feature-diversification attack toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out-dir", help="directory for report artifacts")
        p.add_argument("--workers", type=int, help="parallel attack workers")

    p = sub.add_parser("train", help="train a classifier and save it")
    common(p)
    p.add_argument("--arch", default="smallresnet",
                   help="reference arch name or path to a spec file")
    p.add_argument("--model-out", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="generate adversarial examples on a surrogate")
    common(p)
    p.add_argument("--surrogate", required=True, help="surrogate model file")
    p.add_argument("--adv-out", help="output .npz path")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="full surrogate/target/defense evaluation grid")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one diversification hyper-parameter")
    common(p)
    p.add_argument("--axis", required=True, choices=["eta_max", "rho", "layer_ratio"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("mask-sweep", help="accuracy under random feature masking")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--rho-grid", default="0.0,0.1,0.25,0.5")
    p.add_argument("--ratio-grid", default="0.16666666,0.5,0.83333333")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--mode", choices=["mean", "zero"], default="mean")
    p.set_defaults(fn=cmd_mask_sweep)

    p = sub.add_parser("hessian-trace", help="per-layer average Hessian trace")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--sites", help="comma-separated hook sites (default: all)")
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(fn=cmd_hessian_trace)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
