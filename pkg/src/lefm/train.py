"""Seeded multi-run experiments: training loop, A/B arms, reports.

A run is fully determined by (config, dataset, seed): weight init comes from
torch.manual_seed(seed), batch order and augmentation draw from numpy
streams keyed by (seed, epoch, patch index), and the test split is fixed by
config.split_seed so every arm sees the same test set.  Validation patches
are re-drawn from the training pool with the run seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from multiprocessing import get_all_start_methods, get_context
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import AnnotatedSample, AugmentationConfig, augment, make_patches, make_split
from .errors import ConfigurationError, DataError, NumericError
from .expansion import ExponentTable, label_terms
from .metrics import (
    RUNS_CSV_COLUMNS,
    ConfusionCounts,
    RunReport,
    anova_verdict,
    confusion,
)
from .network import (
    AdamState,
    adam_step,
    build_model,
    check_finite,
    count_parameters,
    dice_loss,
    expansion_parameter_increase,
    load_checkpoint,
    plateau_scheduler,
    save_checkpoint,
    verify_parameter_increase,
)

SUMMARY_METRICS = ("bacc", "f1", "precision", "sensitivity", "specificity")
ANOVA_METRICS = {"BACC": "bacc", "F1": "f1", "PREC": "precision"}
_VAL_STREAM = 101  # numpy seed-sequence tag for the validation draw


def arm_name(m: int) -> str:
    return "baseline" if m == 0 else f"lefm_m{m}"


@dataclass
class TrainConfig:
    max_epochs: int = 30000
    lr0: float = 1e-3
    plateau_patience: int = 20
    lr_factor: float = 0.5
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    early_stop_patience: int = 40
    batch_size: int = 8
    m: int = 2
    seeds: tuple = (0, 1, 2, 3, 4)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    val_fraction: float = 0.2
    patch_size: int = 64
    patch_stride: int = 64
    test_fraction: float = 0.2
    split_seed: int = 0
    threads: int = 1
    precision: str = "float32"
    use_batch_norm: bool = False
    prenormalized: bool = False

    def validate(self):
        for name in ("max_epochs", "lr0", "plateau_patience", "lr_factor", "lr_min",
                     "weight_decay", "early_stop_patience", "batch_size", "patch_size",
                     "patch_stride", "threads"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr_min > self.lr0:
            raise ConfigurationError("lr_min must not exceed lr0")
        if self.m < 0:
            raise ConfigurationError("m must be >= 0")
        if self.m not in (0, 2, 3):
            warnings.warn(f"expansion order m={self.m} is outside the usual {{0, 2, 3}}", stacklevel=2)
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")
        if not 0.0 <= self.augmentation.probability <= 1.0:
            raise ConfigurationError("augmentation probability must lie in [0, 1]")

    def to_mapping(self) -> dict:
        flat = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "augmentation":
                for key, sub in asdict(value).items():
                    flat[f"augmentation.{key}"] = sub
            elif f.name == "seeds":
                flat["seeds"] = ",".join(str(s) for s in value)
            else:
                flat[f.name] = value
        return flat

    def config_hash(self) -> str:
        dump = "\n".join(f"{k}={self.to_mapping()[k]}" for k in sorted(self.to_mapping()))
        return hashlib.sha256(dump.encode()).hexdigest()[:12]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        base = {f.name: f for f in fields(cls)}
        aug_kwargs = {}
        kwargs = {}
        for raw_key, raw_value in mapping.items():
            key = raw_key.strip()
            if key.startswith("augmentation."):
                sub = key.split(".", 1)[1]
                aug_fields = {f.name: f.type for f in fields(AugmentationConfig)}
                if sub not in aug_fields:
                    raise ConfigurationError(f"unknown config key {raw_key!r}")
                aug_kwargs[sub] = _parse_value(raw_value, aug_fields[sub])
            elif key in base:
                if key == "seeds":
                    kwargs["seeds"] = tuple(int(v) for v in str(raw_value).replace(" ", "").split(",") if v != "")
                elif key == "augmentation":
                    raise ConfigurationError("set augmentation fields as augmentation.<name>")
                else:
                    kwargs[key] = _parse_value(raw_value, base[key].type)
            else:
                raise ConfigurationError(f"unknown config key {raw_key!r}")
        if aug_kwargs:
            kwargs["augmentation"] = AugmentationConfig(**aug_kwargs)
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        mapping = {}
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)


def _parse_value(value, annotation):
    if not isinstance(value, str):
        return value
    text = value.strip()
    annotation = str(annotation)
    if "bool" in annotation:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {value!r}")
    if "int" in annotation:
        return int(text)
    if "float" in annotation:
        return float(text)
    return text


@dataclass
class TrainResult:
    report: RunReport
    checkpoint: dict
    checkpoint_path: Path | None
    val_history: list
    lr_history: list


def _patches_to_batch(patches, aug_config, seed, epoch, dtype):
    images = []
    labels = []
    for pool_index, patch in patches:
        image, label = patch.image, patch.label
        if aug_config is not None and aug_config.probability > 0:
            rng = np.random.default_rng([seed, epoch, pool_index])
            image, label = augment((image, label), aug_config, rng)
        images.append(image.transpose(2, 0, 1))
        labels.append(label[None, :, :])
    x = torch.from_numpy(np.ascontiguousarray(np.stack(images))).to(dtype)
    y = torch.from_numpy(np.ascontiguousarray(np.stack(labels))).to(dtype)
    return x, y


def _pooled_dice(model, batches) -> float:
    """Dice loss over a full patch set, accumulated across batches."""
    intersection = pred_sum = target_sum = 0.0
    with torch.no_grad():
        for x, y in batches:
            pred = model(x)
            intersection += float((pred * y).sum())
            pred_sum += float(pred.sum())
            target_sum += float(y.sum())
    return 1.0 - (2.0 * intersection + 1.0) / (pred_sum + target_sum + 1.0)


def predict_probabilities(model, sample: AnnotatedSample, patch_size: int, batch_size: int = 8) -> np.ndarray:
    """Per-pixel probability map; overlapping edge patches are averaged."""
    dtype = next(model.parameters()).dtype
    patches = make_patches(sample, patch_size, patch_size)
    h, w = sample.majority_label.shape
    prob = np.zeros((h, w), dtype=np.float64)
    cover = np.zeros((h, w), dtype=np.float64)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start:start + batch_size]
            x = torch.from_numpy(
                np.ascontiguousarray(np.stack([p.image.transpose(2, 0, 1) for p in chunk]))
            ).to(dtype)
            pred = model(x).squeeze(1).double().numpy()
            for patch, pmap in zip(chunk, pred):
                r, c = patch.origin
                prob[r:r + patch_size, c:c + patch_size] += pmap
                cover[r:r + patch_size, c:c + patch_size] += 1.0
    return prob / cover


def evaluate_model(model, samples, patch_size: int = 64, batch_size: int = 8) -> ConfusionCounts:
    """Pooled confusion counts over all pixels of all samples (threshold 0.5)."""
    counts = ConfusionCounts()
    for sample in samples:
        prob = predict_probabilities(model, sample, patch_size, batch_size)
        counts = counts + confusion((prob >= 0.5).astype(np.uint8), sample.majority_label)
    return counts


def _failed_report(config, seed, note) -> RunReport:
    return RunReport(
        model=arm_name(config.m),
        m=config.m,
        seed=seed,
        bacc=0.0,
        f1=0.0,
        precision=0.0,
        sensitivity=0.0,
        specificity=0.0,
        counts=ConfusionCounts(),
        epochs=0,
        wall_time_s=0.0,
        precision_mode=config.precision,
        config_hash=config.config_hash(),
        prenormalized=config.prenormalized,
        status="failed",
        note=note,
    )


def train_one(config: TrainConfig, dataset, seed: int, out_dir=None, resume_from=None,
              val_loss_override=None) -> TrainResult:
    """Train one seeded run and evaluate the best-validation model on the test split.

    `val_loss_override(model, epoch) -> float` replaces the validation loss
    computation; it exists so schedule handling (best-epoch restore, plateau,
    early stop) can be exercised against synthetic loss curves.
    """
    config.validate()
    torch.set_num_threads(config.threads)
    start_time = time.perf_counter()
    dtype = torch.float64 if config.precision == "float64" else torch.float32
    config_hash = config.config_hash()

    split = make_split(dataset, config.test_fraction, config.split_seed, config.val_fraction)
    by_id = {s.sample_id: s for s in dataset}
    train_samples = [by_id[i] for i in split.train_ids]
    test_samples = [by_id[i] for i in split.test_ids]
    in_features = train_samples[0].image.shape[2]

    pool = [p for s in train_samples for p in make_patches(s, config.patch_size, config.patch_stride)]
    if len(pool) < 2:
        raise ConfigurationError("need at least two training patches")
    n_val = max(1, int(round(len(pool) * config.val_fraction)))
    if n_val >= len(pool):
        n_val = len(pool) - 1
    perm = np.random.default_rng([seed, _VAL_STREAM]).permutation(len(pool))
    val_entries = [(int(i), pool[i]) for i in perm[:n_val]]
    train_entries = [(int(i), pool[i]) for i in perm[n_val:]]

    val_batches = [
        _patches_to_batch(val_entries[i:i + config.batch_size], None, seed, 0, dtype)
        for i in range(0, len(val_entries), config.batch_size)
    ]

    model = build_model(in_features, config.m, seed=seed, use_batch_norm=config.use_batch_norm, dtype=dtype)
    params = list(model.parameters())
    adam = AdamState.initialize(params)
    lr = config.lr0
    start_epoch = 0
    best_val = float("inf")
    best_epoch = 0
    best_params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    val_history: list[float] = []
    lr_history: list[float] = []

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        for key, want in (("m", config.m), ("in_features", in_features), ("precision_mode", config.precision)):
            if payload[key] != want:
                raise ConfigurationError(f"checkpoint {key}={payload[key]!r} does not match config {want!r}")
        model.load_state_dict(payload["params"])
        best_params = dict(payload["best_params"])
        adam = AdamState(step=payload["adam"]["step"], exp_avg=list(payload["adam"]["exp_avg"]),
                         exp_avg_sq=list(payload["adam"]["exp_avg_sq"]))
        lr = payload["lr"]
        start_epoch = payload["epoch"]
        best_epoch = payload["best_epoch"]
        best_val = payload["best_val_loss"]
        val_history = list(payload["val_history"])
        lr_history = list(payload["lr_history"])

    epoch = start_epoch
    status_note = ""
    try:
        for epoch in range(start_epoch + 1, config.max_epochs + 1):
            model.train()
            order = np.random.default_rng([seed, epoch]).permutation(len(train_entries))
            for start in range(0, len(order), config.batch_size):
                chunk = [train_entries[i] for i in order[start:start + config.batch_size]]
                x, y = _patches_to_batch(chunk, config.augmentation, seed, epoch, dtype)
                model.zero_grad()
                loss = dice_loss(model(x), y)
                check_finite(loss, "training loss")
                loss.backward()
                adam_step(params, [p.grad for p in params], adam, lr, config.weight_decay)

            model.eval()
            if val_loss_override is not None:
                val_loss = float(val_loss_override(model, epoch))
            else:
                val_loss = _pooled_dice(model, val_batches)
            if not np.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            val_history.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_params = {k: v.detach().clone() for k, v in model.state_dict().items()}
            lr = plateau_scheduler(val_history, lr, config.plateau_patience, config.lr_factor, config.lr_min)
            lr_history.append(lr)
            if epoch - best_epoch >= config.early_stop_patience:
                break
    except NumericError as exc:
        report = _failed_report(config, seed, str(exc))
        report.wall_time_s = time.perf_counter() - start_time
        report.epochs = epoch
        return TrainResult(report=report, checkpoint={}, checkpoint_path=None,
                           val_history=val_history, lr_history=lr_history)

    last_params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_params)
    counts = evaluate_model(model, test_samples, config.patch_size, config.batch_size)
    try:
        report = RunReport.from_counts(
            counts,
            model=arm_name(config.m),
            m=config.m,
            seed=seed,
            epochs=epoch,
            wall_time_s=time.perf_counter() - start_time,
            precision_mode=config.precision,
            config_hash=config_hash,
            prenormalized=config.prenormalized,
            note=status_note,
        )
    except DataError as exc:
        report = _failed_report(config, seed, f"degenerate test evaluation: {exc}")
        report.epochs = epoch

    checkpoint = {
        "in_features": in_features,
        "m": config.m,
        "use_batch_norm": config.use_batch_norm,
        "precision_mode": config.precision,
        "patch_size": config.patch_size,
        "batch_size": config.batch_size,
        "seed": seed,
        "epoch": epoch,
        "config_hash": config_hash,
        "params": last_params,
        "best_params": best_params,
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "val_history": val_history,
        "lr": lr,
        "lr_history": lr_history,
        "adam": {"step": adam.step, "exp_avg": adam.exp_avg, "exp_avg_sq": adam.exp_avg_sq},
        "table": model.expansion.table.to_dict() if model.expansion is not None else None,
        "split": split.to_dict(),
    }
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / f"checkpoint_{arm_name(config.m)}_seed{seed}.pt"
        save_checkpoint(checkpoint_path, checkpoint)
    return TrainResult(report=report, checkpoint=checkpoint, checkpoint_path=checkpoint_path,
                       val_history=val_history, lr_history=lr_history)


_WORKER_DATASET = None


def _worker_init(samples):
    global _WORKER_DATASET
    _WORKER_DATASET = samples


def _worker_run(job):
    config, seed, out_dir = job
    result = train_one(config, _WORKER_DATASET, seed, out_dir=out_dir)
    path = str(result.checkpoint_path) if result.checkpoint_path else None
    return config.m, seed, result.report, path


def _max_workers(n_jobs: int, workers) -> int:
    if workers is None:
        env = os.environ.get("LEFM_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(workers), n_jobs))


def summarize_metric(values) -> dict:
    values = [float(v) for v in values]
    mean = float(np.mean(values)) if values else 0.0
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std, "values": values}


def run_experiment(config: TrainConfig, dataset, arms=None, out_dir=None, workers=None) -> dict:
    """Train every (arm, seed) pair and build the comparison summary.

    Arms default to the baseline plus config.m.  Runs execute in parallel
    worker processes (capped by LEFM_THREADS), each single-threaded, so
    per-run results do not depend on the degree of parallelism.
    """
    config.validate()
    seeds = list(config.seeds)
    if len(seeds) < 2:
        raise ConfigurationError("run_experiment needs at least two seeds for significance testing")
    if arms is None:
        arms = [0] + ([config.m] if config.m > 0 else [])
    arms = list(dict.fromkeys(arms))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    jobs = [(replace(config, m=arm), seed, str(out_path) if out_path else None) for arm in arms for seed in seeds]
    reports: dict[tuple[int, int], RunReport] = {}
    n_workers = _max_workers(len(jobs), workers)
    if n_workers <= 1:
        for job in jobs:
            _worker_init(dataset)
            m, seed, report, _ = _worker_run(job)
            reports[(m, seed)] = report
    else:
        # fork avoids re-importing torch per worker; each run is
        # single-threaded so forked state cannot leak into results
        torch.set_num_threads(1)
        method = "fork" if "fork" in get_all_start_methods() else "spawn"
        with ProcessPoolExecutor(max_workers=n_workers, mp_context=get_context(method),
                                 initializer=_worker_init, initargs=(dataset,)) as pool:
            for m, seed, report, _ in pool.map(_worker_run, jobs):
                reports[(m, seed)] = report

    in_features = dataset[0].image.shape[2]
    baseline_params = count_parameters(build_model(in_features, 0, seed=0))
    summary = {
        "version": __version__,
        "config_hash": config.config_hash(),
        "seeds": seeds,
        "arms": {},
        "anova": [],
        "std_convention": "sample standard deviation over seeded runs (ddof=1)",
    }
    ordered_reports = []
    for arm in arms:
        name = arm_name(arm)
        arm_reports = [reports[(arm, seed)] for seed in seeds]
        ordered_reports.extend(arm_reports)
        ok = [r for r in arm_reports if r.status == "ok"]
        failed = [r.seed for r in arm_reports if r.status != "ok"]
        if arm > 0:
            increase = verify_parameter_increase(in_features, arm, config.use_batch_norm)
        else:
            increase = 0
        summary["arms"][name] = {
            "m": arm,
            "runs": len(arm_reports),
            "failed_seeds": failed,
            "complete": not failed,
            "parameters": baseline_params + increase,
            "parameter_increase": increase,
            "parameter_increase_pct": 100.0 * increase / baseline_params,
            "epochs": [r.epochs for r in arm_reports],
            "metrics": {metric: summarize_metric([getattr(r, metric) for r in ok]) for metric in SUMMARY_METRICS},
        }
    for arm in arms:
        if arm == 0 or 0 not in arms:
            continue
        for label, attr in ANOVA_METRICS.items():
            base_values = [getattr(reports[(0, s)], attr) for s in seeds if reports[(0, s)].status == "ok"]
            arm_values = [getattr(reports[(arm, s)], attr) for s in seeds if reports[(arm, s)].status == "ok"]
            if len(base_values) < 2 or len(arm_values) < 2:
                summary["anova"].append({
                    "metric": label,
                    "groups": [arm_name(0), arm_name(arm)],
                    "F": None, "p": None, "significant": None,
                    "note": "not enough completed runs",
                })
                continue
            summary["anova"].append(anova_verdict(label, [arm_name(0), arm_name(arm)], [base_values, arm_values]))

    if out_path is not None:
        append_runs_csv(out_path / "runs.csv", ordered_reports)
        for report in ordered_reports:
            write_json(out_path / f"report_{report.model}_seed{report.seed}.json",
                       {"version": __version__, **report.report_payload()})
        write_json(out_path / "summary.json", summary)
        write_json(out_path / "anova.json", {
            "version": __version__,
            "config_hash": config.config_hash(),
            "verdicts": summary["anova"],
        })
        split = make_split(dataset, config.test_fraction, config.split_seed, config.val_fraction)
        write_json(out_path / "split.json", split.to_dict())
        (out_path / "summary.md").write_text(summary_markdown(summary))
    return summary


def summary_markdown(summary: dict) -> str:
    arms = list(summary["arms"])
    lines = [
        f"# Experiment summary",
        "",
        f"- version: {summary['version']}",
        f"- config hash: `{summary['config_hash']}`",
        f"- seeds: {', '.join(str(s) for s in summary['seeds'])}",
        f"- convention: mean ± {summary['std_convention']}",
        "",
        "| Metric | " + " | ".join(arms) + " |",
        "|" + "---|" * (len(arms) + 1),
    ]
    display = {"bacc": "BACC", "f1": "F1", "precision": "PREC", "sensitivity": "SE", "specificity": "SP"}
    for metric in SUMMARY_METRICS:
        cells = []
        for arm in arms:
            stats = summary["arms"][arm]["metrics"][metric]
            if stats["values"]:
                cells.append(f"{stats['mean']:.4f} ± {stats['std']:.4f}")
            else:
                cells.append("n/a")
        lines.append(f"| {display[metric]} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("| Arm | parameters | increase | increase % |")
    lines.append("|---|---|---|---|")
    for arm in arms:
        info = summary["arms"][arm]
        lines.append(f"| {arm} | {info['parameters']} | {info['parameter_increase']} "
                     f"| {info['parameter_increase_pct']:.3f} |")
    lines.append("")
    for verdict in summary["anova"]:
        if verdict.get("p") is None:
            lines.append(f"- ANOVA {verdict['metric']} {verdict['groups'][1]}: {verdict['note']}")
        else:
            word = "significant" if verdict["significant"] else "not significant"
            lines.append(f"- ANOVA {verdict['metric']} {verdict['groups'][1]} vs {verdict['groups'][0]}: "
                         f"F={verdict['F']:.4g}, p={verdict['p']:.4g} ({word} at 0.05)")
    lines.append("")
    return "\n".join(lines)


def append_runs_csv(path, reports):
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(RUNS_CSV_COLUMNS)
        for report in reports:
            writer.writerow(report.csv_row())


def read_runs_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"runs file {path} does not exist")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def report_coefficients(checkpoint, channel_names=None) -> dict:
    """Per-term coefficient importances from a trained checkpoint.

    Records carry the raw coefficient, its magnitude, and the L1-normalized
    importance, sorted by importance; term indices refer to the embedded
    exponent table.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    if not payload.get("table") or int(payload["m"]) == 0:
        raise DataError("checkpoint does not contain an expansion layer")
    table = ExponentTable.from_dict(payload["table"])
    if channel_names is None:
        channel_names = ["R", "G", "B"] if table.d == 3 else [f"x{i + 1}" for i in range(table.d)]
    coeff = payload["best_params"]["expansion.coefficients"].detach().double().numpy()
    labels = label_terms(table, channel_names)
    magnitudes = np.abs(coeff)
    total = float(magnitudes.sum())
    order = sorted(range(table.D), key=lambda r: (-magnitudes[r], r))
    terms = [
        {
            "index": r,
            "label": labels[r],
            "coefficient": float(coeff[r]),
            "magnitude": float(magnitudes[r]),
            "importance": float(magnitudes[r] / total) if total > 0 else 0.0,
        }
        for r in order
    ]
    return {
        "version": __version__,
        "config_hash": payload["config_hash"],
        "m": int(payload["m"]),
        "d": table.d,
        "D": table.D,
        "channel_names": list(channel_names),
        "table": payload["table"],
        "terms": terms,
    }
