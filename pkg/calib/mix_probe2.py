import sys
import time
import numpy as np
from lefm.data import AugmentationConfig, generate_synthetic
from lefm.train import TrainConfig, report_coefficients, train_one

tau = float(sys.argv[1]); lr = float(sys.argv[2]); epochs = int(sys.argv[3])
wd = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-4
seeds = [int(s) for s in (sys.argv[5].split(",") if len(sys.argv) > 5 else ["0", "1"])]

dataset = generate_synthetic(200, 64, 64, "MIX", noise_sigma=0.05, seed=20250810, tau=tau)
config = TrainConfig(
    max_epochs=epochs, early_stop_patience=40, lr0=lr, weight_decay=wd, m=2, seeds=tuple(seeds),
    test_fraction=0.2, use_batch_norm=False,
    augmentation=AugmentationConfig(probability=0.5),
)
hits = 0
for seed in seeds:
    t0 = time.perf_counter()
    result = train_one(config, dataset, seed=seed)
    payload = dict(result.checkpoint); payload["format_version"] = 1
    report = report_coefficients(payload)
    top5 = [t["label"] for t in report["terms"][:5]]
    ok = "RG" in top5 and "B²" in top5
    hits += ok
    print(f"seed {seed}: BACC {result.report.bacc:.4f} ep {result.report.epochs} "
          f"wall {time.perf_counter()-t0:.0f}s top5 {top5} hit={ok}", flush=True)
    print("   all:", [(t["label"], round(t["importance"], 3)) for t in report["terms"]], flush=True)
print(f"hits: {hits}/{len(seeds)}  (tau={tau} lr={lr} epochs={epochs} wd={wd})", flush=True)
