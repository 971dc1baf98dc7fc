"""Accuracy and latency of the three detectors on one shared corpus.

Generates a small patch set, trains the conv classifier on it for a few
epochs, then benchmarks the edge-counting detector, the classifier, and the
ground-truth oracle on the same files. The classifier should win on accuracy
and lose on per-patch latency.
"""

import os
import time

import numpy as np

from bridgesurvey import detect, nn, render

OUT = os.path.join(os.path.dirname(__file__), "out", "shootout")
N_PATCHES = 300
EPOCHS = 6


def main():
    os.makedirs(OUT, exist_ok=True)
    rng = np.random.default_rng(23)

    manifest = render.gen_dataset(N_PATCHES, 0.5, render.RenderConfig(),
                                  render.CrackConfig(), rng, OUT)
    dataset = render.load_dataset(manifest)

    t0 = time.perf_counter()
    cfg = detect.ClassifierConfig(epochs=EPOCHS, seed=3)
    params, report = detect.train_classifier(dataset, cfg)
    print(f"classifier: {EPOCHS} epochs in {time.perf_counter() - t0:.1f}s, "
          f"val_acc={report[-1]['val_acc']:.3f}")
    model = os.path.join(OUT, "model.bin")
    nn.save_params(model, detect.classifier_spec(dataset[0].shape[1]), params)

    detectors = [detect.CannyDetector(),
                 detect.build_detector("cnn", params_path=model),
                 detect.OracleDetector()]
    rows = detect.benchmark(detectors, manifest, np.random.default_rng(0),
                            repetitions=1)

    print(f"\n{'detector':>8}  {'accuracy':>8}  {'precision':>9}  "
          f"{'recall':>6}  {'ms/patch':>8}")
    for r in rows:
        print(f"{r['detector']:>8}  {r['accuracy']:>8.3f}  "
              f"{r['precision']:>9.3f}  {r['recall']:>6.3f}  "
              f"{r['latency_ms_mean']:>8.2f}")
    by_name = {r["detector"]: r for r in rows}
    ratio = by_name["cnn"]["latency_ms_mean"] / by_name["canny"]["latency_ms_mean"]
    print(f"\ncnn costs {ratio:.1f}x the canny latency per patch")


if __name__ == "__main__":
    main()
