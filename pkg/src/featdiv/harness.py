"""Experiment orchestration: configs, attack evaluation, sweeps, reports.

A run is fully determined by one flat key=value config file; reports carry
the config hash and toolkit version for provenance. Per-image random streams
are keyed by (master_seed, image index), so results are independent of batch
chunking and worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from .attacks import AttackConfig, run_attack
from .autodiff import Tensor
from .data import Dataset, export_image_dir, generate_synthetic_dataset, ingest_image_dir
from .defenses import DefenseSpec, apply_defense, bit_depth_reduce
from .dhf import (
    DhfConfig,
    capture_benign_features,
    dhf_forward,
    ghost_dropout_forward,
    ghost_rng_factory,
    iteration_rng_factory,
    select_hook_layers,
)
from .models import Model, load_model, predict


class ConfigError(ValueError):
    """Malformed experiment configuration."""


_DEFAULTS = {
    "dataset.kind": "synthetic",
    "dataset.num_classes": "10",
    "dataset.per_class": "50",
    "dataset.size": "32",
    "dataset.seed": "7",
    "dataset.split": "test",
    "dataset.path": "",
    "dataset.labels_csv": "",
    "surrogates": "",
    "targets": "",
    "method": "plain",  # plain | dhf | ghost
    "ghost.drop_prob": "0.1",
    "dhf.eta_max": "0.2",
    "dhf.rho": "0.1",
    "dhf.layer_ratio": "0.8333333333333334",
    "attack.epsilon": "0.06274509803921569",  # 16/255
    "attack.steps": "10",
    "attack.step_size": "0.006274509803921569",  # 1.6/255
    "attack.decay": "1.0",
    "attack.variant": "mi",
    "attack.dim_prob": "0.0",
    "attack.tim_kernel_size": "0",
    "attack.tim_sigma": "3.0",
    "defenses": "none",
    "master_seed": "0",
    "num_images": "0",  # 0 = all
    "batch_size": "100",
    "workers": "1",
    "dump_adv": "false",
    "out_dir": "",
}


def parse_config_text(text: str) -> dict[str, str]:
    cfg = dict(_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = value
    return cfg


def load_config(path: str, overrides: dict[str, str] | None = None) -> dict[str, str]:
    with open(path) as fh:
        cfg = parse_config_text(fh.read())
    for key, value in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown override key {key!r}")
        cfg[key] = value
    return cfg


# execution knobs that do not alter any reported number
_NON_SEMANTIC_KEYS = {"workers", "out_dir", "batch_size"}


def config_hash(cfg: dict[str, str]) -> str:
    canon = "".join(
        f"{k}={cfg[k]}\n" for k in sorted(cfg) if k not in _NON_SEMANTIC_KEYS
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _parse_defenses(text: str) -> list[DefenseSpec]:
    specs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if item == "none":
            specs.append(DefenseSpec("none"))
        elif item.startswith("bit_red"):
            bits = int(item.split(":", 1)[1]) if ":" in item else 4
            specs.append(DefenseSpec("bit_red", bits=bits))
        elif item.startswith("resize_pad"):
            seed = int(item.split(":", 1)[1]) if ":" in item else 0
            specs.append(DefenseSpec("resize_pad", seed=seed))
        else:
            raise ConfigError(f"unknown defense {item!r}")
    return specs or [DefenseSpec("none")]


def dataset_from_config(cfg: dict[str, str]) -> Dataset:
    if cfg["dataset.kind"] == "synthetic":
        return generate_synthetic_dataset(
            int(cfg["dataset.num_classes"]),
            int(cfg["dataset.per_class"]),
            int(cfg["dataset.size"]),
            seed=int(cfg["dataset.seed"]),
            split=cfg["dataset.split"],
        )
    if cfg["dataset.kind"] == "image_dir":
        return ingest_image_dir(
            cfg["dataset.path"], cfg["dataset.labels_csv"], int(cfg["dataset.num_classes"])
        )
    raise ConfigError(f"unknown dataset.kind {cfg['dataset.kind']!r}")


def attack_config(cfg: dict[str, str]) -> AttackConfig:
    return AttackConfig(
        epsilon=float(cfg["attack.epsilon"]),
        steps=int(cfg["attack.steps"]),
        step_size=float(cfg["attack.step_size"]),
        decay=float(cfg["attack.decay"]),
        variant=cfg["attack.variant"],
        dim_prob=float(cfg["attack.dim_prob"]),
        tim_kernel_size=int(cfg["attack.tim_kernel_size"]),
        tim_sigma=float(cfg["attack.tim_sigma"]),
    )


def dhf_config(cfg: dict[str, str]) -> DhfConfig:
    return DhfConfig(
        eta_max=float(cfg["dhf.eta_max"]),
        rho=float(cfg["dhf.rho"]),
        layer_ratio=float(cfg["dhf.layer_ratio"]),
        master_seed=int(cfg["master_seed"]),
    )


@dataclass
class EvalCell:
    surrogate: str
    target: str
    method: str
    defense: str
    success_rate: float
    n: int
    whitebox: bool
    success_rate_8bit: float | None = None


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)
    config_hash: str = ""
    master_seed: int = 0
    version: str = __version__
    errors: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "config_hash": self.config_hash,
                "master_seed": self.master_seed,
                "errors": self.errors,
                "transfer_aggregates": self.aggregates(),
                "cells": [asdict(c) for c in self.cells],
            },
            indent=2,
        )

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["surrogate", "target", "method", "defense",
                        "success_rate", "n", "whitebox", "success_rate_8bit"])
            for c in self.cells:
                w.writerow([c.surrogate, c.target, c.method, c.defense,
                            f"{c.success_rate:.6f}", c.n, int(c.whitebox),
                            "" if c.success_rate_8bit is None else f"{c.success_rate_8bit:.6f}"])

    def transfer_rates(self, defense: str = "none") -> list[float]:
        return [c.success_rate for c in self.cells if not c.whitebox and c.defense == defense]

    def aggregates(self, defense: str = "none") -> dict:
        """Both transfer-averaging protocols: per-surrogate means and the
        pooled mean over all black-box cells."""
        per_surrogate: dict[str, list[float]] = {}
        for c in self.cells:
            if not c.whitebox and c.defense == defense:
                per_surrogate.setdefault(c.surrogate, []).append(c.success_rate)
        pooled = self.transfer_rates(defense)
        return {
            "per_surrogate": {s: float(np.mean(r)) for s, r in per_surrogate.items()},
            "pooled": float(np.mean(pooled)) if pooled else None,
        }


def make_forward_fn(model: Model, method: str, cfg: dict[str, str],
                    batch_images: np.ndarray, image_indices: np.ndarray):
    """Build the per-iteration forward closure for one attack chunk."""
    master_seed = int(cfg["master_seed"])
    if method == "plain":
        return lambda xin, t: model.forward(xin)
    if method == "dhf":
        dcfg = dhf_config(cfg)
        sites = select_hook_layers(model, dcfg.layer_ratio)
        cache = capture_benign_features(model, batch_images, sites)
        return lambda xin, t: dhf_forward(
            model, xin, cache, dcfg, iteration_rng_factory(master_seed, t, image_indices)
        )
    if method == "ghost":
        drop = float(cfg["ghost.drop_prob"])
        return lambda xin, t: ghost_dropout_forward(
            model, xin, drop, ghost_rng_factory(master_seed, t, image_indices)
        )
    raise ConfigError(f"unknown method {method!r}")


def attack_dataset(model: Model, dataset: Dataset, cfg: dict[str, str],
                   method: str | None = None) -> tuple[np.ndarray, list[str]]:
    """Attack every image on the given surrogate; returns (x_adv, error log)."""
    if float(cfg["attack.epsilon"]) == 0.0:
        # zero budget: no perturbation is possible, so skip the attack loop
        return dataset.images.copy(), []
    acfg = attack_config(cfg)
    method = method or cfg["method"]
    batch = int(cfg["batch_size"])
    workers = max(1, int(cfg["workers"]))
    chunks = [(start, min(start + batch, len(dataset))) for start in range(0, len(dataset), batch)]
    x_adv = np.empty_like(dataset.images)
    errors: list[str] = []

    def do_chunk(bounds):
        start, stop = bounds
        idx = np.arange(start, stop)
        imgs = dataset.images[start:stop]
        fwd = make_forward_fn(model, method, cfg, imgs, idx)
        try:
            res = run_attack(fwd, imgs, dataset.labels[start:stop], acfg,
                             image_indices=idx, master_seed=int(cfg["master_seed"]))
            x_adv[start:stop] = res.x_adv
        except Exception as e:  # keep the run alive; log the failed chunk
            x_adv[start:stop] = imgs
            errors.append(f"images [{start},{stop}): {type(e).__name__}: {e}")

    if workers == 1:
        for bounds in chunks:
            do_chunk(bounds)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(do_chunk, chunks))
    return x_adv, errors


def run_eval(cfg: dict[str, str]) -> EvalReport:
    """Attack on each surrogate, evaluate every (target, defense) cell.

    Success rate = fraction of images the target classifies correctly when
    clean (undefended) that it misclassifies after the attack.
    """
    dataset = dataset_from_config(cfg)
    n_cap = int(cfg["num_images"])
    if n_cap and n_cap < len(dataset):
        dataset = dataset.subset(np.arange(n_cap))
    if len(dataset) == 0:
        raise ConfigError("evaluation dataset is empty")
    surrogate_paths = [p for p in cfg["surrogates"].split(",") if p.strip()]
    target_paths = [p for p in cfg["targets"].split(",") if p.strip()]
    if not surrogate_paths or not target_paths:
        raise ConfigError("need at least one surrogate and one target model")
    defenses = _parse_defenses(cfg["defenses"])
    dump = cfg["dump_adv"].lower() in ("1", "true", "yes")
    out_dir = cfg["out_dir"]
    report = EvalReport(config_hash=config_hash(cfg), master_seed=int(cfg["master_seed"]))
    targets = [(p, load_model(p)) for p in target_paths]
    clean_correct = {
        p: predict(t, dataset.images) == dataset.labels for p, t in targets
    }
    for s_path in surrogate_paths:
        surrogate = load_model(s_path)
        x_adv, errors = attack_dataset(surrogate, dataset, cfg)
        report.errors.extend(errors)
        x_adv_8bit = bit_depth_reduce(x_adv, 8) if dump else None
        if dump and out_dir:
            os.makedirs(out_dir, exist_ok=True)
            tag = os.path.splitext(os.path.basename(s_path))[0]
            np.savez_compressed(
                os.path.join(out_dir, f"adv_{tag}.npz"),
                x_adv=x_adv, labels=dataset.labels,
            )
            export_image_dir(x_adv, dataset.labels, os.path.join(out_dir, f"adv_{tag}_png"))
        for t_path, target in targets:
            keep = clean_correct[t_path]
            n = int(keep.sum())
            for spec in defenses:
                if n == 0:
                    rate = 0.0
                    rate8 = 0.0 if dump else None
                else:
                    x_eval = apply_defense(x_adv, spec)
                    pred = predict(target, x_eval)
                    rate = float(np.mean(pred[keep] != dataset.labels[keep]))
                    rate8 = None
                    if x_adv_8bit is not None:
                        pred8 = predict(target, apply_defense(x_adv_8bit, spec))
                        rate8 = float(np.mean(pred8[keep] != dataset.labels[keep]))
                report.cells.append(EvalCell(
                    surrogate=s_path, target=t_path, method=cfg["method"],
                    defense=spec.label(), success_rate=rate, n=n,
                    whitebox=(t_path == s_path), success_rate_8bit=rate8,
                ))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "eval_report.json"), "w") as fh:
            fh.write(report.to_json())
        report.write_csv(os.path.join(out_dir, "eval_report.csv"))
    return report


SWEEP_AXES = {"eta_max": "dhf.eta_max", "rho": "dhf.rho", "layer_ratio": "dhf.layer_ratio"}


def run_sweep(cfg: dict[str, str], axis: str, grid) -> list[tuple[float, EvalReport]]:
    """Repeat run_eval varying one diversification hyper-parameter."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    key = SWEEP_AXES[axis]
    results = []
    for value in grid:
        point_cfg = dict(cfg)
        point_cfg[key] = repr(float(value))
        point_cfg["method"] = "dhf"
        results.append((float(value), run_eval(point_cfg)))
    out_dir = cfg["out_dir"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"sweep_{axis}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis, "mean_transfer_success", "config_hash"])
            for value, rep in results:
                rates = rep.transfer_rates()
                mean = float(np.mean(rates)) if rates else float("nan")
                w.writerow([f"{value:.6f}", f"{mean:.6f}", rep.config_hash])
    return results
