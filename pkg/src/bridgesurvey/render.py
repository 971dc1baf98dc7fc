"""Synthetic grayscale patch imagery for scanned cells.

A scan frames the crack geometry inside the cell (square window around the
geometry's bounding box, clamped to the deck) so strokes occupy a useful
share of the patch regardless of physical crack size, the way close-up
survey photographs do. True cracks are drawn dark, false cracks (surface
marks that mimic cracks) at reduced contrast, cars as occluding rectangles.
The ground-truth mask records pre-occlusion stroke geometry.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import env as _env

__all__ = [
    "RenderConfig", "CrackConfig", "Patch",
    "gaussian_kernel1d", "gaussian_blur", "rasterize",
    "crack_part_points", "render_patch", "gen_dataset", "load_dataset",
    "write_pgm", "read_pgm", "MANIFEST_COLUMNS",
]

MANIFEST_COLUMNS = ("filename", "label", "crack_kind", "seed")


@dataclass(frozen=True)
class RenderConfig:
    """Patch geometry and photometry.

    true_intensity and false_intensity are stroke gray levels; the false
    level sits much closer to the background so only contrast separates a
    real crack from a false one. The background is a constant level plus a
    zero-mean smooth blotch field (amplitude background_std) plus per-pixel
    sensor noise (noise_std).
    """
    resolution: int = 64
    background_mean: float = 0.62
    background_std: float = 0.04
    noise_std: float = 0.03
    true_intensity: float = 0.15
    false_intensity: float = 0.45
    occlusion_intensity: float = 0.35
    min_thickness_px: float = 2.0
    view_margin: float = 1.6
    min_view_m: float = 8.0

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if not (0.0 <= self.true_intensity < self.false_intensity < self.background_mean <= 1.0):
            raise ValueError("need true_intensity < false_intensity < background_mean "
                             "so true cracks have the higher contrast")
        if self.noise_std < 0 or self.background_std < 0:
            raise ValueError("noise levels must be >= 0")


@dataclass(frozen=True)
class CrackConfig:
    """Crack population for dataset generation: geometry ranges plus the
    share of non-crack patches that carry a false crack."""
    cell_m: float = 100.0
    length_range: tuple = (5.0, 20.0)
    width_range: tuple = (0.2, 1.0)
    max_extent_m: float = 20.0
    kinds: tuple = ("line", "fork", "bezier")
    false_fraction: float = 0.3
    car_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.false_fraction <= 1.0:
            raise ValueError("false_fraction must be in [0, 1]")
        if not 0.0 <= self.car_fraction <= 1.0:
            raise ValueError("car_fraction must be in [0, 1]")


@dataclass(frozen=True)
class Patch:
    """Rendered scan: pixels in [0, 1], boolean stroke mask (pre-occlusion),
    label in {crack, none, false}, kind of the labeling crack."""
    pixels: np.ndarray
    mask: np.ndarray
    label: str
    crack_kind: str


def gaussian_kernel1d(size, sigma):
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd and positive")
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _conv1d(img, kernel, axis):
    pad = len(kernel) // 2
    width = [(0, 0), (0, 0)]
    width[axis] = (pad, pad)
    padded = np.pad(img, width, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
    return win @ kernel


def gaussian_blur(img, size=5, sigma=1.0):
    """Separable Gaussian blur with symmetric edge padding."""
    k = gaussian_kernel1d(size, sigma)
    return _conv1d(_conv1d(np.asarray(img, dtype=np.float64), k, 0), k, 1)


def crack_part_points(crack, n_per_part=256):
    """Crack geometry as one densely sampled polyline per stroke run
    (line: one, fork: trunk + branch, bezier: one curve)."""
    pts = crack.as_array()
    t = np.linspace(0.0, 1.0, n_per_part)[:, None]
    if crack.kind == "line":
        return [pts[0] + t * (pts[1] - pts[0])]
    if crack.kind == "fork":
        return [pts[0] + t * (pts[1] - pts[0]),
                pts[1] + t * (pts[2] - pts[1])]
    if crack.kind == "bezier":
        u = 1.0 - t
        curve = (u ** 3 * pts[0] + 3 * u ** 2 * t * pts[1]
                 + 3 * u * t ** 2 * pts[2] + t ** 3 * pts[3])
        return [curve]
    raise ValueError(f"unknown crack kind {crack.kind!r}")


def rasterize(points_px, thickness_px, resolution):
    """Boolean mask of pixels whose centers lie within thickness/2 of the
    sampled polyline (round caps and joints fall out of the point metric).
    points_px is (n, 2) in pixel units, columns (x, y)."""
    pts = np.asarray(points_px, dtype=np.float64)
    mask = np.zeros((resolution, resolution), dtype=bool)
    if pts.size == 0:
        return mask
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    cx = xs + 0.5
    cy = ys + 0.5
    r2 = (thickness_px / 2.0) ** 2
    for start in range(0, len(pts), 512):
        chunk = pts[start:start + 512]
        d2 = ((cx[:, :, None] - chunk[None, None, :, 0]) ** 2
              + (cy[:, :, None] - chunk[None, None, :, 1]) ** 2)
        mask |= (d2.min(axis=2) <= r2)
    return mask


def _view_window(world, cell, cfg):
    """Square viewing window in deck meters: (origin xy, side)."""
    c = world.config
    ids = world.ids_in(cell)
    if ids:
        pts = np.vstack([p for i in ids
                         for p in crack_part_points(world.cracks[i], 64)])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = (lo + hi) / 2.0
        side = float(max((hi - lo).max() * cfg.view_margin, cfg.min_view_m))
    else:
        center = (np.array(cell, dtype=np.float64) + 0.5) * c.cell_m
        side = cfg.min_view_m
    side = min(side, c.cell_m)
    deck = np.array([c.length_m, c.breadth_m])
    origin = np.clip(center - side / 2.0, 0.0, np.maximum(deck - side, 0.0))
    return origin, side


def render_patch(world, cell, cfg, rng):
    """Render the scan patch for one cell.

    rng drives the background blotch field and sensor noise only; stroke
    geometry (and therefore the mask and label) is a pure function of the
    world, so the mask is identical across noise draws.
    """
    res = cfg.resolution
    origin, side = _view_window(world, cell, cfg)
    px_per_m = res / side

    # background: constant level + exactly zero-mean smooth blotches
    field = rng.normal(size=(res, res))
    if cfg.background_std > 0:
        sigma = max(res / 10.0, 1.0)
        size = int(2 * np.ceil(2 * sigma) + 1)
        field = gaussian_blur(field, size=size, sigma=sigma)
        sd = field.std()
        if sd > 0:
            field = field * (cfg.background_std / sd)
        field -= field.mean()
    else:
        field = np.zeros((res, res))
    pixels = cfg.background_mean + field

    # strokes: false first so overlapping true cracks keep the darker level
    mask = np.zeros((res, res), dtype=bool)
    true_here = false_here = None
    for want_false in (True, False):
        for i in world.ids_in(cell):
            crack = world.cracks[i]
            if crack.is_false != want_false:
                continue
            thickness = max(crack.width_m * px_per_m, cfg.min_thickness_px)
            stroke = np.zeros((res, res), dtype=bool)
            for part in crack_part_points(crack, 4 * res):
                stroke |= rasterize((part - origin) * px_per_m, thickness, res)
            mask |= stroke
            level = cfg.false_intensity if crack.is_false else cfg.true_intensity
            pixels[stroke] = level
            if crack.is_false:
                false_here = false_here or crack.kind
            else:
                true_here = true_here or crack.kind

    # cars occlude after strokes; the mask keeps pre-occlusion geometry
    c = world.config
    for car in world.cars:
        cx, cy = car.x_m, (car.lane + 0.5) * c.cell_m
        half = np.array([2.5, 1.1])  # car footprint in meters
        lo = (np.array([cx, cy]) - half - origin) * px_per_m
        hi = (np.array([cx, cy]) + half - origin) * px_per_m
        x0, y0 = np.clip(np.floor(lo).astype(int), 0, res)
        x1, y1 = np.clip(np.ceil(hi).astype(int), 0, res)
        if x1 > x0 and y1 > y0:
            pixels[y0:y1, x0:x1] = cfg.occlusion_intensity

    if cfg.noise_std > 0:
        pixels = pixels + rng.normal(0.0, cfg.noise_std, size=(res, res))
    pixels = np.clip(pixels, 0.0, 1.0)

    if true_here:
        label, kind = "crack", true_here
    elif false_here:
        label, kind = "false", false_here
    else:
        label, kind = "none", ""
    return Patch(pixels=pixels, mask=mask, label=label, crack_kind=kind)


# ---------------------------------------------------------------------------
# single-crack worlds and dataset generation

def _single_cell_world(crack_cfg, kind, is_false, with_car, rng):
    cell = crack_cfg.cell_m
    scen = _env.ScenarioConfig(length_m=cell, breadth_m=cell, cell_m=cell,
                               n_cracks=0, n_false_cracks=0, n_cars=0)
    cracks = []
    if kind is not None:
        cracks.append(_env.generate_crack(
            kind, rng, scen, is_false=is_false,
            max_extent_m=crack_cfg.max_extent_m,
            length_range=crack_cfg.length_range,
            width_range=crack_cfg.width_range))
    cars = []
    if with_car:
        cars.append(_env.CarState(lane=0, x_m=float(rng.uniform(0, cell)),
                                  direction=1, speed_mps=0.0))
    cell_map = {}
    for i, crack in enumerate(cracks):
        for cc in _env.crack_cells(crack, cell, 1, 1):
            cell_map.setdefault(cc, []).append(i)
    return _env.WorldState(config=scen, cracks=cracks, cars=cars,
                           crack_cell_map={k: tuple(v) for k, v in cell_map.items()})


def sample_patch(label, render_cfg, crack_cfg, rng):
    """One synthetic patch of the requested label ('crack'/'false'/'none')."""
    if label == "crack":
        kind, is_false = crack_cfg.kinds[rng.integers(len(crack_cfg.kinds))], False
    elif label == "false":
        kind, is_false = crack_cfg.kinds[rng.integers(len(crack_cfg.kinds))], True
    elif label == "none":
        kind, is_false = None, False
    else:
        raise ValueError(f"unknown label {label!r}")
    with_car = bool(crack_cfg.car_fraction and rng.uniform() < crack_cfg.car_fraction)
    world = _single_cell_world(crack_cfg, kind, is_false, with_car, rng)
    return render_patch(world, (0, 0), render_cfg, rng)


def gen_dataset(n, balance, render_cfg, crack_cfg, rng, out_dir):
    """Write n PGM patches plus a manifest.csv; returns the manifest path.

    round(n * balance) patches contain a true crack; of the remainder,
    crack_cfg.false_fraction carry a false crack, the rest are clean deck.
    Same seed, same arguments: byte-identical output.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= balance <= 1.0:
        raise ValueError("balance must be in [0, 1]")
    os.makedirs(out_dir, exist_ok=True)
    n_crack = int(round(n * balance))
    n_false = int(round((n - n_crack) * crack_cfg.false_fraction))
    labels = (["crack"] * n_crack + ["false"] * n_false
              + ["none"] * (n - n_crack - n_false))
    rng.shuffle(labels)
    rows = []
    for i, label in enumerate(labels):
        seed = int(rng.integers(2 ** 31))
        child = np.random.default_rng(seed)
        patch = sample_patch(label, render_cfg, crack_cfg, child)
        fname = f"patch_{i:05d}.pgm"
        write_pgm(os.path.join(out_dir, fname), patch.pixels)
        rows.append({"filename": fname, "label": patch.label,
                     "crack_kind": patch.crack_kind, "seed": seed})
    manifest = os.path.join(out_dir, "manifest.csv")
    tmp = manifest + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, manifest)
    return manifest


def load_dataset(manifest_path):
    """Read a generated dataset back: (pixels (n,res,res) float64, labels)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    pixels, labels = [], []
    with open(manifest_path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{manifest_path}: missing manifest columns {sorted(missing)}")
        for row in reader:
            pixels.append(read_pgm(os.path.join(base, row["filename"])))
            labels.append(row["label"])
    if not pixels:
        raise ValueError(f"{manifest_path}: empty dataset")
    return np.stack(pixels), np.array(labels)


# ---------------------------------------------------------------------------
# PGM (binary P5)

def write_pgm(path, pixels01):
    arr = np.asarray(pixels01, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM writer expects a 2-d image")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
    os.replace(tmp, path)


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed, single whitespace before pixel data
    tokens, i = [], 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise ValueError(f"{path}: truncated PGM header")
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    i += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob[i:i + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {data.size}")
    return data.reshape(h, w).astype(np.float64) / maxval
