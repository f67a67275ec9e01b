import sys
import time
from lefm.data import AugmentationConfig, generate_synthetic
from lefm.train import TrainConfig, report_coefficients, train_one

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 80
seeds = [int(s) for s in (sys.argv[2].split(",") if len(sys.argv) > 2 else ["0"])]
dataset = generate_synthetic(200, 64, 64, "MIX", noise_sigma=0.05, seed=20250810)
import numpy as np
print("balance:", float(np.mean([s.majority_label.mean() for s in dataset])), flush=True)
config = TrainConfig(
    max_epochs=epochs, early_stop_patience=40, lr0=1e-4, m=2, seeds=tuple(seeds),
    test_fraction=0.5, use_batch_norm=False,
    augmentation=AugmentationConfig(probability=0.5),
)
hits = 0
for seed in seeds:
    t0 = time.perf_counter()
    result = train_one(config, dataset, seed=seed)
    payload = dict(result.checkpoint)
    payload["format_version"] = 1
    report = report_coefficients(payload)
    top5 = [t["label"] for t in report["terms"][:5]]
    ok = "RG" in top5 and "B²" in top5
    hits += ok
    print(f"seed {seed}: BACC {result.report.bacc:.4f} epochs {result.report.epochs} "
          f"wall {time.perf_counter()-t0:.0f}s top5 {top5} hit={ok}", flush=True)
    print("   all:", [(t["label"], round(t["importance"], 3)) for t in report["terms"]], flush=True)
print(f"hits: {hits}/{len(seeds)}", flush=True)
