import sys
import time
from lefm.data import AugmentationConfig, generate_synthetic
from lefm.train import TrainConfig, run_experiment

dataset = generate_synthetic(200, 64, 64, "PRODUCT", noise_sigma=0.05, seed=20250809)
config = TrainConfig(
    max_epochs=50, early_stop_patience=40, lr0=1e-4, m=2, seeds=(0, 1, 2, 3, 4),
    test_fraction=0.5, use_batch_norm=True,
    augmentation=AugmentationConfig(probability=0.5),
)
t0 = time.perf_counter()
summary = run_experiment(config, dataset, workers=2)
wall = time.perf_counter() - t0
for name, info in summary["arms"].items():
    stats = info["metrics"]["bacc"]
    print(f"{name}: BACC {stats['mean']:.4f} +- {stats['std']:.4f}  values "
          f"{[round(v, 4) for v in stats['values']]}", flush=True)
print(f"wall: {wall:.0f}s", flush=True)
for v in summary["anova"]:
    print(v, flush=True)
