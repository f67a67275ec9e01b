import sys
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

from lefm.data import AugmentationConfig, generate_synthetic
from lefm.train import TrainConfig, report_coefficients, train_one


def probe(seed):
    dataset = generate_synthetic(150, 32, 32, "MIX", noise_sigma=0.02, seed=20250810,
                                 tau=0.8, smoothness=4.0)
    config = TrainConfig(
        max_epochs=300, early_stop_patience=300, lr0=3e-4, weight_decay=5e-4, m=2, seeds=(seed,),
        test_fraction=0.2, use_batch_norm=False, patch_size=32, patch_stride=32,
        augmentation=AugmentationConfig(probability=0.5),
    )
    t0 = time.perf_counter()
    result = train_one(config, dataset, seed=seed)
    payload = dict(result.checkpoint)
    payload["format_version"] = 1
    report = report_coefficients(payload)
    top5 = [t["label"] for t in report["terms"][:5]]
    hit = "RG" in top5 and "B²" in top5
    return (f"seed {seed}: BACC {result.report.bacc:.4f} wall {time.perf_counter() - t0:.0f}s hit={hit}\n"
            f"   all: {[(t['label'], round(t['importance'], 3)) for t in report['terms']]}")


if __name__ == "__main__":
    seeds = [int(s) for s in sys.argv[1].split(",")]
    with ProcessPoolExecutor(max_workers=2, mp_context=get_context("fork")) as pool:
        for line in pool.map(probe, seeds):
            print(line, flush=True)
