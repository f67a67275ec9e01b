import sys
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

from lefm.data import AugmentationConfig, generate_synthetic
from lefm.train import TrainConfig, report_coefficients, train_one


def probe(spec):
    tau, noise, lr, wd, smooth, aug, epochs, seed = spec
    dataset = generate_synthetic(200, 64, 64, "MIX", noise_sigma=noise, seed=20250810,
                                 tau=tau, smoothness=smooth)
    config = TrainConfig(
        max_epochs=epochs, early_stop_patience=40, lr0=lr, weight_decay=wd, m=2, seeds=(seed,),
        test_fraction=0.2, use_batch_norm=False,
        augmentation=AugmentationConfig(probability=aug),
    )
    t0 = time.perf_counter()
    result = train_one(config, dataset, seed=seed)
    payload = dict(result.checkpoint)
    payload["format_version"] = 1
    report = report_coefficients(payload)
    top5 = [t["label"] for t in report["terms"][:5]]
    hit = "RG" in top5 and "B²" in top5
    return (f"tau {tau} noise {noise} lr {lr} wd {wd} sm {smooth} aug {aug} ep {epochs} seed {seed}: "
            f"BACC {result.report.bacc:.4f} wall {time.perf_counter() - t0:.0f}s hit={hit}\n"
            f"   all: {[(t['label'], round(t['importance'], 3)) for t in report['terms']]}")


if __name__ == "__main__":
    specs = [tuple(float(v) for v in line.split(",")) for line in sys.argv[1:]]
    specs = [(t, n, lr, wd, sm, a, int(ep), int(sd)) for t, n, lr, wd, sm, a, ep, sd in specs]
    with ProcessPoolExecutor(max_workers=2, mp_context=get_context("fork")) as pool:
        for line in pool.map(probe, specs):
            print(line, flush=True)
