"""Crack detectors over rendered scan patches.

Three detectors share one calling convention: detect(world, cell, rng)
returns a Detection. The edge-counting detector runs a classical pipeline
(blur, gradients, thinning, double threshold, connected hysteresis) and
fires when enough edge pixels survive. The learned detector is a small
convolutional network trained on labeled patches. The oracle reads ground
truth and optionally flips it, for controlled experiments.
"""

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import render as _render

__all__ = [
    "Detection", "CannyConfig", "CannyResult", "canny", "decide_canny",
    "ClassifierConfig", "classifier_spec", "train_classifier",
    "classify_batch", "infer_classifier",
    "OracleDetector", "CannyDetector", "ClassifierDetector", "build_detector",
    "benchmark", "write_bench_csv", "write_classifier_report",
    "BENCH_COLUMNS", "REPORT_COLUMNS", "DETECTOR_NAMES",
]


@dataclass(frozen=True)
class Detection:
    present: bool
    confidence: float
    cells: tuple = ()


# ---------------------------------------------------------------------------
# classical edge pipeline

@dataclass(frozen=True)
class CannyConfig:
    """Thresholds are fractions of the normalized gradient scale: raw Sobel
    magnitude is divided by 4x the blurred patch's dynamic range (the largest
    response a single step of that range can produce), which adapts the
    pipeline to patch contrast. decision_threshold applies to the edge-pixel
    count relative to 2x the patch side."""
    blur_size: int = 5
    blur_sigma: float = 1.0
    low: float = 0.1
    high: float = 0.3
    decision_threshold: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high:
            raise ValueError("need 0 <= low <= high")
        if not 0.0 < self.decision_threshold:
            raise ValueError("decision_threshold must be positive")


@dataclass(frozen=True)
class CannyResult:
    edges: np.ndarray      # final edge map after hysteresis
    strong: np.ndarray
    weak: np.ndarray
    magnitude: np.ndarray  # normalized gradient magnitude
    nms: np.ndarray        # magnitude after directional thinning
    direction: np.ndarray  # quantized gradient direction bin, 0..3


def _shift(a, dy, dx):
    """Translate a 2-d array, filling vacated pixels with zero."""
    out = np.zeros_like(a)
    h, w = a.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def _sobel(img):
    p = np.pad(img, 1, mode="symmetric")
    h, w = img.shape

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)
          - at(-1, -1) - 2 * at(0, -1) - at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)
          - at(-1, -1) - 2 * at(-1, 0) - at(-1, 1))
    return gx, gy


# neighbor offsets (dy, dx) to compare against, per direction bin
_NMS_NEIGHBORS = {
    0: ((0, 1), (0, -1)),    # gradient ~ horizontal
    1: ((1, 1), (-1, -1)),   # ~ 45 degrees
    2: ((1, 0), (-1, 0)),    # ~ vertical
    3: ((1, -1), (-1, 1)),   # ~ 135 degrees
}


def canny(pixels, config=CannyConfig()):
    """Edge pipeline over a grayscale patch in [0, 1]."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-d grayscale patch")
    blur = _render.gaussian_blur(img, size=config.blur_size, sigma=config.blur_sigma)
    gx, gy = _sobel(blur)
    span = blur.max() - blur.min()
    if span <= 0:
        mag = np.zeros_like(blur)
    else:
        mag = np.hypot(gx, gy) / (4.0 * span)

    angle = np.mod(np.arctan2(gy, gx), np.pi)
    direction = (np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int)) % 4

    keep = np.zeros(img.shape, dtype=bool)
    for b, ((dy1, dx1), (dy2, dx2)) in _NMS_NEIGHBORS.items():
        sel = direction == b
        keep |= (sel & (mag >= _shift(mag, dy1, dx1))
                 & (mag >= _shift(mag, dy2, dx2)))
    nms = np.where(keep, mag, 0.0)

    strong = nms >= config.high
    weak = (nms >= config.low) & ~strong
    return CannyResult(edges=_hysteresis(strong, weak), strong=strong,
                       weak=weak, magnitude=mag, nms=nms, direction=direction)


def _hysteresis(strong, weak):
    """Strong pixels plus every weak pixel 8-connected to them, transitively."""
    edges = strong.copy()
    while True:
        grow = np.zeros_like(edges)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    grow |= _shift(edges, dy, dx)
        grow &= weak & ~edges
        if not grow.any():
            return edges
        edges |= grow


def decide_canny(result, config=CannyConfig()):
    """Edge-pixel count against 2x the patch side: a resolvable crack's two
    stroke borders together span about twice the patch, so confidence 1.0
    means a full-width crack and the default bar sits at 0.6 of that."""
    edges = result.edges if isinstance(result, CannyResult) else np.asarray(result)
    side = edges.shape[0]
    count = int(edges.sum())
    confidence = min(1.0, count / (2.0 * side))
    return Detection(present=confidence >= config.decision_threshold,
                     confidence=confidence)


# ---------------------------------------------------------------------------
# learned classifier

@dataclass(frozen=True)
class ClassifierConfig:
    resolution: int = 64
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def classifier_spec(resolution=64):
    """Two conv blocks then a linear head over the flattened features."""
    r1 = (resolution - 2) // 2
    r2 = (r1 - 2) // 2
    if r2 < 1:
        raise ValueError(f"resolution {resolution} too small for the architecture")
    return nn.NetworkSpec(
        input_shape=(1, resolution, resolution),
        layers=(nn.Conv2D(1, 8, 3), nn.Relu(), nn.MaxPool(2),
                nn.Conv2D(8, 16, 3), nn.Relu(), nn.MaxPool(2),
                nn.Flatten(), nn.Dense(16 * r2 * r2, 2), nn.Softmax()))


def _cross_entropy_grad(probs, y):
    """Mean negative log-likelihood and its gradient w.r.t. the softmax
    output (fed to the network's backward pass)."""
    n = len(y)
    p_true = np.maximum(probs[np.arange(n), y], 1e-12)
    loss = -np.log(p_true).mean()
    grad = np.zeros_like(probs)
    grad[np.arange(n), y] = -1.0 / (p_true * n)
    return loss, grad


def classify_batch(spec, params, pixels):
    """Class probabilities for (n, res, res) patches, chunked to bound memory."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    out = []
    for start in range(0, len(x), 256):
        chunk = x[start:start + 256][:, None, :, :]
        probs, _ = nn.forward(spec, params, chunk)
        out.append(probs)
    return np.concatenate(out, axis=0)


def train_classifier(dataset, config=ClassifierConfig()):
    """Train the patch classifier on a generated dataset.

    dataset is a manifest path or an (pixels, labels) pair. Patches labeled
    'crack' are the positive class; 'false' and 'none' are negatives, so the
    network has to separate true cracks from look-alike surface marks.
    Returns (params, report) where report has one row per epoch.
    """
    if isinstance(dataset, (str, os.PathLike)):
        pixels, labels = _render.load_dataset(dataset)
    else:
        pixels, labels = dataset
        pixels = np.asarray(pixels, dtype=np.float64)
        labels = np.asarray(labels)
    if pixels.shape[1] != config.resolution or pixels.shape[2] != config.resolution:
        raise ValueError(f"dataset patches are {pixels.shape[1:]} "
                         f"but config.resolution is {config.resolution}")
    y = (labels == "crack").astype(int)
    if y.min() == y.max():
        raise ValueError("training data needs both crack and non-crack patches")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(y))
    n_val = max(1, int(round(len(y) * config.val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) < 1:
        raise ValueError("dataset too small for the requested split")

    spec = classifier_spec(config.resolution)
    params = nn.init_params(spec, rng)
    opt = nn.init_adam(params, lr=config.learning_rate)

    def accuracy(idx):
        probs = classify_batch(spec, params, pixels[idx])
        return float(((probs[:, 1] >= 0.5).astype(int) == y[idx]).mean())

    report = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            x = pixels[batch][:, None, :, :]
            probs, cache = nn.forward(spec, params, x)
            loss, grad_out = _cross_entropy_grad(probs, y[batch])
            grads, _ = nn.backward(cache, grad_out)
            params = nn.adam_step(params, grads, opt)
            losses.append(loss)
        report.append({"epoch": epoch,
                       "train_loss": float(np.mean(losses)),
                       "train_acc": accuracy(train_idx),
                       "val_acc": accuracy(val_idx)})
    return params, report


def infer_classifier(spec, params, pixels):
    """Detection for one patch; crack probability is the confidence and a
    probability of exactly 0.5 counts as present."""
    probs = classify_batch(spec, params, pixels)[0]
    p = float(probs[1])
    return Detection(present=p >= 0.5, confidence=p)


# ---------------------------------------------------------------------------
# detector objects used by the environment

@dataclass
class OracleDetector:
    """Reads ground truth; flips the answer with flip_probability. One
    uniform draw per call regardless of the probability, so trajectories
    stay aligned when only the flip rate changes."""
    flip_probability: float = 0.0
    name: str = "oracle"
    needs_patch: bool = False
    latency_s: float = 0.0

    def detect(self, world, cell, rng):
        truth = len(world.true_ids_in(cell)) > 0
        flip = rng.uniform() < self.flip_probability
        present = truth != flip
        return Detection(present=present,
                         confidence=1.0 if present else 0.0,
                         cells=(tuple(cell),))

    def predict_label(self, label, rng):
        truth = label == "crack"
        flip = rng.uniform() < self.flip_probability
        present = truth != flip
        return Detection(present=present, confidence=1.0 if present else 0.0)


@dataclass
class CannyDetector:
    """Renders the cell and counts surviving edge pixels."""
    config: CannyConfig = field(default_factory=CannyConfig)
    render_config: _render.RenderConfig = field(default_factory=_render.RenderConfig)
    name: str = "canny"
    needs_patch: bool = True
    latency_s: float = 0.022  # nominal per-scan processing time

    def detect(self, world, cell, rng):
        patch = _render.render_patch(world, cell, self.render_config, rng)
        det = self.predict_patch(patch.pixels)
        return Detection(present=det.present, confidence=det.confidence,
                         cells=(tuple(cell),))

    def predict_patch(self, pixels):
        return decide_canny(canny(pixels, self.config), self.config)


@dataclass
class ClassifierDetector:
    """Renders the cell and runs the trained convolutional classifier."""
    params: list
    classifier_config: ClassifierConfig = field(default_factory=ClassifierConfig)
    render_config: _render.RenderConfig = field(default_factory=_render.RenderConfig)
    name: str = "cnn"
    needs_patch: bool = True
    latency_s: float = 0.060  # nominal per-scan processing time

    def __post_init__(self):
        self.spec = classifier_spec(self.classifier_config.resolution)

    def detect(self, world, cell, rng):
        patch = _render.render_patch(world, cell, self.render_config, rng)
        det = self.predict_patch(patch.pixels)
        return Detection(present=det.present, confidence=det.confidence,
                         cells=(tuple(cell),))

    def predict_patch(self, pixels):
        return infer_classifier(self.spec, self.params, pixels)


DETECTOR_NAMES = ("canny", "cnn", "oracle")


def build_detector(name, flip_probability=0.0, params_path=None,
                   render_config=None, classifier_config=None):
    """Detector factory for the names accepted in scenario files."""
    render_cfg = render_config or _render.RenderConfig()
    if name == "oracle":
        return OracleDetector(flip_probability=flip_probability)
    if name == "canny":
        return CannyDetector(render_config=render_cfg)
    if name == "cnn":
        cfg = classifier_config or ClassifierConfig(resolution=render_cfg.resolution)
        if params_path is None:
            raise ValueError("the cnn detector needs a trained parameter file")
        spec = classifier_spec(cfg.resolution)
        params = nn.load_params(params_path, spec)
        return ClassifierDetector(params=params, classifier_config=cfg,
                                  render_config=render_cfg)
    raise ValueError(f"unknown detector {name!r}")


# ---------------------------------------------------------------------------
# benchmark over a labeled corpus

BENCH_COLUMNS = ("detector", "accuracy", "precision", "recall",
                 "fpr_false_cracks", "latency_ms_mean", "latency_ms_p95")


def benchmark(detectors, manifest_path, rng, repetitions=3, warmup=10):
    """Run each detector over every patch in the corpus, repetitions times.

    Accuracy counts label 'crack' as the positive class. fpr_false_cracks is
    the fire rate on false-crack patches alone (nan when the corpus has
    none). Latencies are wall-clock per call, after a short warm-up.
    """
    pixels, labels = _render.load_dataset(manifest_path)
    truth = labels == "crack"
    rows = []
    for det in detectors:
        patch_fn = getattr(det, "predict_patch", None)

        def predict(i):
            if patch_fn is not None:
                return patch_fn(pixels[i]).present
            return det.predict_label(labels[i], rng).present

        for i in range(min(warmup, len(labels))):
            predict(i)
        times = []
        preds = np.zeros(len(labels), dtype=bool)
        for _ in range(max(1, repetitions)):
            for i in range(len(labels)):
                t0 = time.perf_counter()
                preds[i] = predict(i)
                times.append(time.perf_counter() - t0)
        tp = int((preds & truth).sum())
        fp = int((preds & ~truth).sum())
        fn = int((~preds & truth).sum())
        is_false = labels == "false"
        times_ms = np.asarray(times) * 1e3
        rows.append({
            "detector": det.name,
            "accuracy": float((preds == truth).mean()),
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "fpr_false_cracks": float(preds[is_false].mean()) if is_false.any() else float("nan"),
            "latency_ms_mean": float(times_ms.mean()),
            "latency_ms_p95": float(np.percentile(times_ms, 95)),
        })
    return rows


def write_bench_csv(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in row.items()})
    os.replace(tmp, path)
    return path


REPORT_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc")


def write_classifier_report(path, rows):
    """Per-epoch training curve CSV from train_classifier's report."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in row.items()})
    os.replace(tmp, path)
    return path
