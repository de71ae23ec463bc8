"""Experiment orchestration: train, attack, ablate, report.

Everything is driven by one JSON config file; command-line flags
override config values.  Every output file embeds the config hash and
the master seed, and a fixed config reproduces byte-identical outputs.

Exit codes: 0 success, 2 config error, 1 runtime error.
"""

import argparse
import csv
import hashlib
import json
import os
import statistics
import sys
import time

import numpy as np

from . import attacks, data, federated, metrics, nn
from .tensors import ErosionConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DATA_ROOT_ENV = "FEDAUDIT_DATA_ROOT"

DEFAULT_CONFIG = {
    "schema_version": 1,
    "seed": 0,
    "out_dir": "runs/default",
    "dataset": {
        "type": "synthetic",
        "classes": 10,
        "per_class": 20,
        "dims": [3, 32, 32],
        "noise_amp": 0.26,
        "template_strength": [0.0, 0.65],
        "test_per_class": 20,
    },
    "fed": {
        "num_clients": 5,
        "rounds": 34,
        "local_epochs": 4,
        "batch_size": 32,
        "lr": 0.08,
    },
    "arch": {
        "conv_channels": [8, 16],
        "dense_width": 64,
    },
    "erosion": {
        "steps": 3,
        "pool_factor": 2,
        "upsample_mode": "nearest",
    },
    "eval": {
        "members_per_client": 20,
        "total_nonmembers": 100,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults <- config file <- CLI overrides, then validate."""
    cfg = DEFAULT_CONFIG
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    ds = cfg["dataset"]
    if ds["type"] not in ("synthetic", "cifar10"):
        raise ConfigError(f"unknown dataset type {ds['type']!r}")
    if ds["type"] == "cifar10":
        path = resolve_dataset_path(ds)
        if not os.path.isdir(path):
            raise ConfigError(f"CIFAR-10 directory not found: {path}")
    if cfg["erosion"]["upsample_mode"] not in ("nearest", "bilinear"):
        raise ConfigError(
            f"upsample_mode must be nearest or bilinear, got "
            f"{cfg['erosion']['upsample_mode']!r}")
    for section, key in (("fed", "num_clients"), ("fed", "rounds"),
                         ("erosion", "steps"),
                         ("eval", "members_per_client"),
                         ("eval", "total_nonmembers")):
        value = cfg[section][key]
        if not isinstance(value, int) or value < 0:
            raise ConfigError(f"{section}.{key} must be a non-negative "
                              f"integer, got {value!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")


def resolve_dataset_path(ds):
    path = ds.get("path", "cifar-10-batches-bin")
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    return path


def config_hash(cfg) -> str:
    # out_dir is where results land, not part of the experiment identity
    blob = json.dumps({k: v for k, v in cfg.items() if k != "out_dir"},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def output_metadata(cfg):
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"]}


def build_architecture(cfg, num_classes, dims):
    layers = []
    for ch in cfg["arch"]["conv_channels"]:
        layers += [("conv", ch), ("maxpool",)]
    layers += [("flatten",), ("dense_relu", cfg["arch"]["dense_width"]),
               ("dense", num_classes)]
    return nn.ArchitectureDescriptor(input_shape=tuple(dims),
                                     layers=tuple(layers),
                                     num_classes=num_classes)


def build_datasets(cfg):
    """Returns (train pool used for federated training, held-out pool)."""
    ds = cfg["dataset"]
    seed = cfg["seed"]
    if ds["type"] == "synthetic":
        strength = tuple(ds["template_strength"])
        train = data.generate_synthetic(
            ds["classes"], ds["per_class"], tuple(ds["dims"]), seed,
            noise_amp=ds["noise_amp"], template_strength=strength,
            stream=0, split="train")
        test = data.generate_synthetic(
            ds["classes"], ds["test_per_class"], tuple(ds["dims"]), seed,
            noise_amp=ds["noise_amp"], template_strength=strength,
            stream=1, id_base=1_000_000, split="test")
        return train, test
    train, test = data.load_cifar10(resolve_dataset_path(ds))
    if "subset_per_class" in ds:
        train = data.subset_per_class(train, ds["subset_per_class"], seed)
    return train, test


def erosion_config(cfg, mode=None):
    ero = cfg["erosion"]
    return ErosionConfig(steps=ero["steps"], pool_factor=ero["pool_factor"],
                         upsample_mode=mode or ero["upsample_mode"])


def fed_config(cfg):
    fed = cfg["fed"]
    return federated.FedConfig(num_clients=fed["num_clients"],
                               rounds=fed["rounds"],
                               local_epochs=fed["local_epochs"],
                               batch_size=fed["batch_size"],
                               lr=fed["lr"], seed=cfg["seed"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg, workers=1):
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    train, test = build_datasets(cfg)
    arch = build_architecture(cfg, train.num_classes, train.images.shape[1:])
    params, log = federated.run_federated_training(
        train, arch, fed_config(cfg), test_set=test, workers=workers)
    model = nn.Model(arch=arch, params=params, seed=cfg["seed"])
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    nn.save_checkpoint(ckpt_path, model)

    meta = output_metadata(cfg)
    log_path = os.path.join(out_dir, "training_log.csv")
    with open(log_path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(["round", "train_acc", "test_acc",
                         "mean_client_loss"])
        for row in log:
            writer.writerow([row["round"], repr(row["train_acc"]),
                             repr(row["test_acc"]),
                             repr(row["mean_client_loss"])])
    if log:
        final = log[-1]
        print(f"trained {cfg['fed']['rounds']} rounds: "
              f"train_acc={final['train_acc']:.3f} "
              f"test_acc={final['test_acc']:.3f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"training log: {log_path}")


def _eval_samples(cfg, model):
    train, test = build_datasets(cfg)
    if tuple(model.arch.input_shape) != tuple(train.images.shape[1:]):
        raise ValueError(
            f"checkpoint input shape {model.arch.input_shape} does not "
            f"match dataset dims {train.images.shape[1:]}")
    shards = federated.partition(train, cfg["fed"]["num_clients"],
                                 cfg["seed"])
    eval_set = data.build_eval_set(shards, test,
                                   cfg["eval"]["members_per_client"],
                                   cfg["eval"]["total_nonmembers"],
                                   cfg["seed"])
    return attacks.gather_eval_samples(eval_set, train, test)


def measure_overhead(model, samples, ero_cfg, n_samples=100, warmup=10):
    """Median ms/sample for one forward pass vs the full erosion probe.

    Single-threaded on purpose so the per-sample numbers mean something.
    """
    images = [samples[i % len(samples)].image
              for i in range(n_samples + warmup)]
    single, probe = [], []
    for i, img in enumerate(images):
        t0 = time.perf_counter()
        model.query(img)
        t1 = time.perf_counter()
        attacks.confidence_trace(model, img, ero_cfg)
        t2 = time.perf_counter()
        if i >= warmup:
            single.append((t1 - t0) * 1e3)
            probe.append((t2 - t1) * 1e3)
    return {"single_forward_ms": statistics.median(single),
            "resmia_probe_ms": statistics.median(probe),
            "ratio": statistics.median(probe) / statistics.median(single)}


def cmd_attack(cfg, checkpoint, workers=1):
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    model = nn.load_checkpoint(checkpoint)
    samples = _eval_samples(cfg, model)
    ero_cfg = erosion_config(cfg)
    records = attacks.evaluate_attacks(model, samples, ero_cfg,
                                       workers=workers)
    meta = output_metadata(cfg)
    scores_path = os.path.join(out_dir, "scores.csv")
    attacks.write_scores_csv(scores_path, records, metadata=meta)

    timing = measure_overhead(model, samples, ero_cfg)
    report = metrics.build_report(
        records, ero_cfg.steps, timing=timing,
        metadata={**meta,
                  "erosion_steps": ero_cfg.steps,
                  "pool_factor": ero_cfg.pool_factor,
                  "upsample_mode": ero_cfg.upsample_mode,
                  "bilinear_alignment": "half-pixel-center"})
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    for name, row in report.attacks.items():
        print(f"{name}: auc={row['auc']:.3f} acc={row['accuracy']:.3f} "
              f"fpr@tpr80={row['fpr_at_tpr80']:.3f}")
    print(f"scores: {scores_path}")
    print(f"report: {report_path}")


def cmd_ablate(cfg, checkpoint, workers=1):
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    model = nn.load_checkpoint(checkpoint)
    samples = _eval_samples(cfg, model)
    meta = output_metadata(cfg)
    rows = []
    for mode in ("nearest", "bilinear"):
        records = attacks.evaluate_attacks(
            model, samples, erosion_config(cfg, mode=mode), workers=workers)
        scores = [(r.scores["resmia"], r.is_member) for r in records]
        rows.append((mode, metrics.auc(metrics.roc_curve(scores))))
    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(["upsample_mode", "auc_resmia"])
        for mode, value in rows:
            writer.writerow([mode, repr(value)])
    for mode, value in rows:
        print(f"{mode}: auc={value:.3f}")
    print(f"ablation: {path}")


def cmd_report(out_dir):
    scores_path = os.path.join(out_dir, "scores.csv")
    report_path = os.path.join(out_dir, "report.json")
    for path in (scores_path, report_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing attack output: {path}")
    records, meta = attacks.read_scores_csv(scores_path)
    with open(report_path) as fh:
        report = metrics.MetricsReport.from_json(fh.read())

    curves = {}
    for name in attacks.ATTACK_NAMES:
        scores = [(r.scores[name], r.is_member) for r in records]
        curves[name] = metrics.roc_curve(scores)
    roc_path = os.path.join(out_dir, "roc.csv")
    metrics.write_roc_csv(roc_path, curves, metadata=meta)

    lines = []
    lines.append("attack performance")
    lines.append(f"{'attack':<10}{'auc':>8}{'accuracy':>10}"
                 f"{'fpr@tpr80':>11}")
    for name in attacks.ATTACK_NAMES:
        row = report.attacks[name]
        lines.append(f"{name:<10}{row['auc']:>8.3f}{row['accuracy']:>10.3f}"
                     f"{row['fpr_at_tpr80']:>11.3f}")
    lines.append("")
    lines.append("per-client resmia auc")
    for cid, value in sorted(report.per_client.items()):
        lines.append(f"client {cid}: {value:.3f}")
    lines.append(f"std: {report.client_auc_std:.4f}")
    lines.append("")
    lines.append("query budget per sample")
    for name in attacks.ATTACK_NAMES:
        lines.append(f"{name}: {report.query_counts[name]}")
    if report.timing:
        lines.append("")
        lines.append("overhead (median ms/sample)")
        lines.append(f"single forward pass: "
                     f"{report.timing['single_forward_ms']:.3f}")
        lines.append(f"full erosion probe:  "
                     f"{report.timing['resmia_probe_ms']:.3f}")
        lines.append(f"ratio: {report.timing['ratio']:.2f}x")
    ablation_path = os.path.join(out_dir, "ablation.csv")
    if os.path.exists(ablation_path):
        lines.append("")
        lines.append("upsampling ablation (resmia auc)")
        with open(ablation_path, newline="") as fh:
            rows = [line for line in fh if not line.startswith("# ")]
        for row in csv.DictReader(rows):
            lines.append(f"{row['upsample_mode']}: "
                         f"{float(row['auc_resmia']):.3f}")
    text = "\n".join(lines) + "\n"
    summary_path = os.path.join(out_dir, "summary.txt")
    with open(summary_path, "w") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        fh.write(text)
    print(text, end="")
    print(f"summary: {summary_path}")
    print(f"roc polylines: {roc_path}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedaudit",
        description="Train a small federated image classifier and audit "
                    "it with resolution-erosion membership inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers (numerics are identical "
                            "for any value)")
        p.add_argument("--erosion-steps", type=int,
                       help="erosion step count override")
        p.add_argument("--upsample", choices=["nearest", "bilinear"],
                       help="upsampling mode override")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint from the train command")

    common(sub.add_parser(
        "train", help="run federated training, write checkpoint and log"))
    common(sub.add_parser(
        "attack", help="score the eval set with all attacks"),
        checkpoint=True)
    common(sub.add_parser(
        "ablate", help="compare nearest vs bilinear upsampling"),
        checkpoint=True)
    rep = sub.add_parser(
        "report", help="render tables and ROC polylines from attack "
                       "outputs")
    rep.add_argument("--out", required=True,
                     help="directory holding scores.csv and report.json")
    return parser


def _overrides(args):
    over = {}
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    ero = {}
    if getattr(args, "erosion_steps", None) is not None:
        ero["steps"] = args.erosion_steps
    if getattr(args, "upsample", None):
        ero["upsample_mode"] = args.upsample
    if ero:
        over["erosion"] = ero
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.out)
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        if args.command == "train":
            cmd_train(cfg, workers=args.workers)
        elif args.command == "attack":
            cmd_attack(cfg, args.checkpoint, workers=args.workers)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.checkpoint, workers=args.workers)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures get a distinct exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
