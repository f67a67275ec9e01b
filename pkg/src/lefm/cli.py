"""Command-line entry point: synth, train, eval, expand, report-coeffs, kappa, anova.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors are printed to stderr with a machine-parsable `E<code>:` prefix.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import SYNTHETIC_RULES, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigurationError, DataError, NumericError
from .expansion import LefmLayer, enumerate_exponents, label_terms, lefm_forward
from .metrics import (
    agreement_band,
    anova_verdict,
    bacc,
    f1,
    fleiss_kappa,
    pooled_fleiss_kappa,
    precision,
    sensitivity,
    specificity,
)
from .network import load_checkpoint, model_from_checkpoint
from .train import (
    TrainConfig,
    evaluate_model,
    read_runs_csv,
    report_coefficients,
    run_experiment,
    write_json,
)

METRIC_COLUMNS = {
    "BACC": "bacc",
    "F1": "f1",
    "PREC": "precision",
    "SE": "sensitivity",
    "SP": "specificity",
}


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def args_hash(values: dict) -> str:
    dump = "\n".join(f"{k}={values[k]}" for k in sorted(values))
    return hashlib.sha256(dump.encode()).hexdigest()[:12]


def build_parser() -> CliParser:
    parser = CliParser(prog="lefm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lefm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset layout")
    p.add_argument("--out", required=True, help="dataset root directory to write")
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--rule", choices=SYNTHETIC_RULES, default="PRODUCT")
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--smoothness", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the seeded A/B experiment")
    p.add_argument("--dataset", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory for reports and checkpoints")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="offset added to every configured run seed")
    p.add_argument("--m", type=int, default=None, help="expansion order for the non-baseline arm")
    p.add_argument("--prenormalized", action="store_true",
                   help="attest that images were stain-normalized beforehand")
    p.add_argument("--workers", type=int, default=None, help="parallel runs (default: LEFM_THREADS or cores)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--patch-size", type=int, default=None,
                   help="evaluation tile size (default: the checkpoint's training patch size)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("expand", help="write the expanded feature channels of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--d", type=int, default=3, help="input feature count")
    p.add_argument("--m", type=int, default=3, help="expansion order")
    p.add_argument("--out", required=True, help="output base path (.bin and .json are appended)")
    p.add_argument("--checkpoint", default=None, help="take coefficients from a trained checkpoint")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("report-coeffs", help="coefficient importance report from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report_coeffs)

    p = sub.add_parser("kappa", help="Fleiss kappa per image and pooled")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_kappa)

    p = sub.add_parser("anova", help="one-way ANOVA between two run groups in runs.csv")
    p.add_argument("--runs", default="runs.csv", help="runs.csv produced by train")
    p.add_argument("--metric", required=True, choices=sorted(METRIC_COLUMNS))
    p.add_argument("--group-a", required=True)
    p.add_argument("--group-b", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_anova)
    return parser


def cmd_synth(args) -> int:
    samples = generate_synthetic(
        args.n_images, args.height, args.width, args.rule,
        noise_sigma=args.noise_sigma, seed=args.seed, tau=args.tau, smoothness=args.smoothness,
    )
    save_dataset(samples, args.out)
    positives = float(np.mean([s.majority_label.mean() for s in samples]))
    print(f"wrote {len(samples)} samples to {args.out} (rule {args.rule}, positive fraction {positives:.3f})")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.m is not None:
        config.m = args.m
    if args.seed is not None:
        config.seeds = tuple(s + args.seed for s in config.seeds)
    if args.prenormalized:
        config.prenormalized = True
    config.validate()
    dataset = load_dataset(args.dataset)
    summary = run_experiment(config, dataset, out_dir=args.out, workers=args.workers)
    for name, info in summary["arms"].items():
        stats = info["metrics"]["bacc"]
        if stats["values"]:
            print(f"{name}: BACC {stats['mean']:.4f} ± {stats['std']:.4f} over {info['runs']} runs")
        else:
            print(f"{name}: no completed runs")
    print(f"summary written to {Path(args.out) / 'summary.json'}")
    return 0


def cmd_eval(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(payload, which="best")
    dataset = load_dataset(args.dataset)
    patch_size = args.patch_size or int(payload.get("patch_size", 64))
    counts = evaluate_model(model, dataset, patch_size=patch_size)
    metrics = {
        "version": __version__,
        "config_hash": payload["config_hash"],
        "checkpoint": str(args.checkpoint),
        "samples": len(dataset),
        "counts": {"tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn},
        "degenerate": list(counts.degenerate_metrics()),
        "bacc": bacc(counts),
        "f1": f1(counts),
        "precision": precision(counts),
        "sensitivity": sensitivity(counts),
        "specificity": specificity(counts),
    }
    if args.out:
        write_json(args.out, metrics)
    print(f"BACC {metrics['bacc']:.4f}  F1 {metrics['f1']:.4f}  PREC {metrics['precision']:.4f} "
          f"({counts.total} pixels)")
    return 0


def _load_feature_image(path: str, d: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if d == 1:
                return np.asarray(img.convert("L"), dtype=np.float64)[:, :, None] / 255.0
            if d == 3:
                return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    raise ConfigurationError(f"expand supports d in {{1, 3}} for PNG input, got d={d}")


def cmd_expand(args) -> int:
    image = _load_feature_image(args.image, args.d)
    table = enumerate_exponents(args.d, args.m)
    source = "ones"
    coefficients = np.ones(table.D)
    if args.checkpoint:
        payload = load_checkpoint(args.checkpoint)
        if not payload.get("table"):
            raise DataError("checkpoint does not contain an expansion layer")
        if payload["table"]["d"] != args.d or payload["table"]["m"] != args.m:
            raise ConfigurationError("checkpoint expansion does not match --d/--m")
        coefficients = payload["best_params"]["expansion.coefficients"].detach().double().numpy()
        source = "checkpoint"
    layer = LefmLayer(table, coefficients)
    expanded = lefm_forward(layer, image).astype(np.float32)

    base = Path(args.out)
    if base.suffix == ".bin":
        base = base.with_suffix("")
    bin_path = base.with_suffix(".bin")
    json_path = base.with_suffix(".json")
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    expanded.tofile(bin_path)
    names = ["R", "G", "B"] if args.d == 3 else [f"x{i + 1}" for i in range(args.d)]
    sidecar = {
        "version": __version__,
        "config_hash": args_hash({"image": args.image, "d": args.d, "m": args.m, "coefficients": source}),
        "shape": list(expanded.shape),
        "dtype": "float32",
        "order": "C",
        "d": args.d,
        "m": args.m,
        "D": table.D,
        "coefficients": source,
        "term_labels": label_terms(table, names),
        "table": table.to_dict(),
    }
    write_json(json_path, sidecar)
    print(f"wrote {expanded.shape[0]}x{expanded.shape[1]}x{expanded.shape[2]} features to {bin_path}")
    return 0


def cmd_report_coeffs(args) -> int:
    report = report_coefficients(args.checkpoint)
    if args.out:
        write_json(args.out, report)
    top = report["terms"][:5]
    print("top terms: " + ", ".join(f"{t['label']} ({t['importance']:.3f})" for t in top))
    return 0


def cmd_kappa(args) -> int:
    dataset = load_dataset(args.dataset)
    raters = dataset[0].n_annotators
    if raters < 2:
        raise DataError("Fleiss kappa needs at least two annotators per image")
    tables = []
    per_image = {}
    for sample in dataset:
        positive = sample.annotations.astype(np.int64).sum(axis=0).ravel()
        table = np.stack([raters - positive, positive], axis=1)
        tables.append(table)
        per_image[sample.sample_id] = fleiss_kappa(table, raters)
    pooled = pooled_fleiss_kappa(tables, raters)
    payload = {
        "version": __version__,
        "config_hash": args_hash({"dataset": args.dataset}),
        "raters": raters,
        "per_image": per_image,
        "pooled": pooled,
        "interpretation": agreement_band(pooled),
    }
    if args.out:
        write_json(args.out, payload)
    for sample_id, value in per_image.items():
        print(f"{sample_id}: kappa = {value:.4f}")
    print(f"pooled kappa = {pooled:.4f} ({payload['interpretation']} agreement)")
    return 0


def cmd_anova(args) -> int:
    rows = read_runs_csv(args.runs)
    column = METRIC_COLUMNS[args.metric]
    groups = []
    for name in (args.group_a, args.group_b):
        values = [float(r[column]) for r in rows if r["model"] == name and r["status"] == "ok"]
        if len(values) < 2:
            raise DataError(f"group {name!r} has {len(values)} completed runs in {args.runs}; need at least 2")
        groups.append(values)
    verdict = anova_verdict(args.metric, [args.group_a, args.group_b], groups)
    verdict["version"] = __version__
    verdict["config_hash"] = args_hash({"runs": args.runs, "metric": args.metric,
                                        "group_a": args.group_a, "group_b": args.group_b})
    if args.out:
        write_json(args.out, verdict)
    word = "significant" if verdict["significant"] else "not significant"
    print(f"{args.metric} {args.group_a} vs {args.group_b}: F = {verdict['F']:.6g}, "
          f"p = {verdict['p']:.6g} ({word} at alpha = 0.05)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"E1: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError) as exc:
        print(f"E2: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"E3: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
