"""Synthetic phantom datasets, dataset I/O and slice preprocessing.

A phantom is a rotated outer ellipse (class 1), optional concentric inner
ellipses (classes 2..K-1) and a sinusoidal tube (class K) clipped to the outer
ellipse, so neighbouring classes share boundaries. Images are per-class
intensities plus Gaussian noise, clipped to [0, 1].
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class PhantomSpec:
    n_samples: int = 200
    image_size: list[int] = field(default_factory=lambda: [64, 64])
    num_classes: int = 3
    # per foreground class [lo, hi]: the outer ellipse semi-axes as a fraction of
    # min(H, W); inner ellipses as a fraction of the enclosing ellipse; the tube
    # half-width as a fraction of min(H, W). None picks defaults.
    radius_ranges: list[list[float]] | None = None
    tube_amplitude: list[float] = field(default_factory=lambda: [0.0, 0.25])  # x outer minor axis
    tube_cycles: list[float] = field(default_factory=lambda: [0.5, 1.5])  # periods over the major axis
    intensity_ranges: list[list[float]] | None = None  # per class incl. background
    noise_sigma: float = 0.05
    spacing_mm: list[float] = field(default_factory=lambda: [1.0, 1.0])
    class_names: list[str] | None = None
    seed: int = 0

    def __post_init__(self):
        self.image_size = [int(s) for s in self.image_size]
        k = self.num_classes - 1
        if self.radius_ranges is None and k >= 1:
            rr = [[0.22, 0.42]] + [[0.45, 0.75]] * max(0, k - 2)
            if k >= 2:
                rr.append([0.03, 0.07])
            self.radius_ranges = rr
        if self.intensity_ranges is None and k >= 1:
            levels = np.linspace(0.45, 0.9, k)
            self.intensity_ranges = [[0.05, 0.15]] + [[float(x) - 0.05, float(x) + 0.05] for x in levels]
        if self.class_names is None:
            names = ["background"] + [f"structure_{i}" for i in range(1, k)]
            if k >= 2:
                names.append("tube")
            elif k == 1:
                names.append("structure_1")
            self.class_names = names
        self.validate()

    @property
    def n_ellipses(self) -> int:
        k = self.num_classes - 1
        return k if k == 1 else k - 1

    def validate(self) -> None:
        h, w = self.image_size if len(self.image_size) == 2 else (0, 0)
        if len(self.image_size) != 2 or h < 8 or w < 8:
            raise DatasetError(f"image_size must be two extents >= 8, got {self.image_size}")
        if self.num_classes < 2 or self.num_classes > 255:
            raise DatasetError("num_classes must be in [2, 255]")
        if self.n_samples < 1:
            raise DatasetError("n_samples must be >= 1")
        if len(self.radius_ranges) != self.num_classes - 1:
            raise DatasetError("radius_ranges needs one [lo, hi] per foreground class")
        if len(self.intensity_ranges) != self.num_classes or len(self.class_names) != self.num_classes:
            raise DatasetError("intensity_ranges and class_names need one entry per class")
        for lo, hi in self.radius_ranges + self.intensity_ranges + [self.tube_amplitude, self.tube_cycles]:
            if not 0 <= lo <= hi:
                raise DatasetError(f"invalid range [{lo}, {hi}]")
        outer_lo, outer_hi = self.radius_ranges[0]
        m = min(h, w)
        if outer_lo * m < 1.0:
            raise DatasetError("outer ellipse can shrink below one pixel (zero foreground possible)")
        if 2 * int(np.ceil(outer_hi * m)) + 2 >= m:
            raise DatasetError("outer ellipse can exceed the image")
        for lo, hi in self.radius_ranges[1:self.n_ellipses]:
            if hi >= 1.0 or lo <= 0:
                raise DatasetError("inner ellipse ratios must lie in (0, 1)")
        if self.noise_sigma < 0 or min(self.spacing_mm) <= 0:
            raise DatasetError("noise_sigma must be >= 0 and spacing positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise DatasetError(f"unknown PhantomSpec keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sample_shapes(spec: PhantomSpec, index: int) -> dict:
    """Geometry of phantom ``index``; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    m = min(h, w)
    lo, hi = spec.radius_ranges[0]
    a = rng.uniform(lo, hi) * m  # semi-major
    b = rng.uniform(lo, hi) * m
    a, b = max(a, b), min(a, b)
    cy = int(rng.integers(int(np.ceil(a)) + 1, h - int(np.ceil(a)) - 1))
    cx = int(rng.integers(int(np.ceil(a)) + 1, w - int(np.ceil(a)) - 1))
    theta = rng.uniform(0.0, np.pi)
    ratios = [rng.uniform(*r) for r in spec.radius_ranges[1:spec.n_ellipses]]
    shapes = {"center": [cy, cx], "theta": theta, "axes": [a, b], "inner_ratios": ratios,
              "intensities": [rng.uniform(*r) for r in spec.intensity_ranges]}
    if spec.num_classes - 1 >= 2:
        shapes["tube"] = {
            "half_width": rng.uniform(*spec.radius_ranges[-1]) * m,
            "amplitude": rng.uniform(*spec.tube_amplitude) * b,
            "wavenumber": 2 * np.pi * rng.uniform(*spec.tube_cycles) / (2 * a),
            "phase": rng.uniform(0.0, 2 * np.pi),
        }
    shapes["noise_seed"] = int(rng.integers(0, 2 ** 31 - 1))
    return shapes


def ellipse_frame(shapes: dict, rows: np.ndarray, cols: np.ndarray):
    """(u, v) coordinates along the major / minor axes of the outer ellipse."""
    cy, cx = shapes["center"]
    ct, st = np.cos(shapes["theta"]), np.sin(shapes["theta"])
    dy, dx = rows - cy, cols - cx
    return dx * ct + dy * st, -dx * st + dy * ct


def rasterize(shapes: dict, image_size, num_classes: int) -> np.ndarray:
    """Exact label map of the shapes evaluated at integer pixel centres."""
    h, w = image_size
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    u, v = ellipse_frame(shapes, rows, cols)
    a, b = shapes["axes"]
    mask = np.zeros((h, w), dtype=np.uint8)
    outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    mask[outer] = 1
    scale = 1.0
    for i, r in enumerate(shapes["inner_ratios"]):
        scale *= r
        mask[(u / (a * scale)) ** 2 + (v / (b * scale)) ** 2 <= 1.0] = i + 2
    if "tube" in shapes:
        t = shapes["tube"]
        centre = t["amplitude"] * np.sin(t["wavenumber"] * u + t["phase"])
        mask[outer & (np.abs(v - centre) <= t["half_width"])] = num_classes - 1
    return mask


def render_image(shapes: dict, mask: np.ndarray, noise_sigma: float) -> np.ndarray:
    levels = np.asarray(shapes["intensities"], dtype=np.float64)
    noise = np.random.default_rng(shapes["noise_seed"]).normal(0.0, noise_sigma, mask.shape)
    return np.clip(levels[mask] + noise, 0.0, 1.0).astype(np.float32)


def make_phantom(spec: PhantomSpec, index: int):
    shapes = sample_shapes(spec, index)
    mask = rasterize(shapes, spec.image_size, spec.num_classes)
    return render_image(shapes, mask, spec.noise_sigma), mask, shapes


def split_assignment(n: int, seed: int) -> list[str]:
    """70/15/15 train/val/test by seeded shuffle."""
    order = np.random.default_rng([seed, n, 7015]).permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.15 * n))
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def gen_phantoms(spec: PhantomSpec, out_dir) -> dict:
    """Write images, masks and manifest.json to out_dir; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    h, w = spec.image_size
    splits = split_assignment(spec.n_samples, spec.seed)
    samples = []
    for i in range(spec.n_samples):
        image, mask, _ = make_phantom(spec, i)
        sid = f"case_{i:05d}"
        image.astype("<f4").tofile(os.path.join(out_dir, sid + "_image.f32"))
        mask.astype(np.uint8).tofile(os.path.join(out_dir, sid + "_mask.u8"))
        samples.append({"id": sid, "image": sid + "_image.f32", "mask": sid + "_mask.u8",
                        "split": splits[i]})
    manifest = {"h": h, "w": w, "num_classes": spec.num_classes,
                "class_names": list(spec.class_names), "spacing_mm": list(spec.spacing_mm),
                "samples": samples}
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, MANIFEST)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetError(f"cannot read {path}: {err}") from err
    for key in ("h", "w", "num_classes", "samples"):
        if key not in manifest:
            raise DatasetError(f"{path}: missing key {key!r}")
    return manifest


def read_raw(path, shape, dtype) -> np.ndarray:
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != shape[0] * shape[1]:
        raise DatasetError(f"{path}: expected {shape[0] * shape[1]} values, found {arr.size}")
    return arr.reshape(shape)


def load_split(data_dir, split: str, manifest: dict | None = None):
    """-> (ids, images f32 (N,H,W), masks u8 (N,H,W)) in manifest order."""
    manifest = manifest or load_manifest(data_dir)
    shape = (manifest["h"], manifest["w"])
    ids, images, masks = [], [], []
    for s in manifest["samples"]:
        if s["split"] != split:
            continue
        ids.append(s["id"])
        images.append(read_raw(os.path.join(data_dir, s["image"]), shape, "<f4"))
        m = read_raw(os.path.join(data_dir, s["mask"]), shape, np.uint8)
        if m.max(initial=0) >= manifest["num_classes"]:
            raise DatasetError(f"{s['mask']}: class id out of range")
        masks.append(m)
    if not ids:
        return ids, np.zeros((0,) + shape, np.float32), np.zeros((0,) + shape, np.uint8)
    return ids, np.stack(images).astype(np.float32), np.stack(masks)


def preprocess_slice(img: np.ndarray, target_size=None, window=None) -> np.ndarray:
    """Optional window clamp, per-slice min-max to [0, 1] (constant -> zeros),
    bilinear resize to target_size. Returns float32 (1, H, W)."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2 or x.size == 0:
        raise ValueError(f"preprocess_slice expects a non-empty 2-D slice, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("preprocess_slice: non-finite input")
    if window is not None:
        lo, hi = window
        if not lo < hi:
            raise ValueError(f"window must satisfy lo < hi, got {window}")
        x = np.clip(x, lo, hi)
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    if target_size is not None and tuple(target_size) != x.shape:
        th, tw = target_size
        x = ops.interp_matrix(x.shape[0], th) @ x @ ops.interp_matrix(x.shape[1], tw).T
    return x.astype(np.float32)[None]


def resize_labels(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour label resize (pixel-centre sampling)."""
    h, w = mask.shape
    th, tw = size
    r = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.intp), h - 1)
    c = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.intp), w - 1)
    return mask[r[:, None], c[None, :]]


# ---------------------------------------------------------------- PGM / PPM

def read_pgm(path) -> np.ndarray:
    """Binary P5 greyscale (8- or 16-bit) -> float64 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    arr = np.frombuffer(data, dtype=dt, count=w * h, offset=pos) if len(data) - pos >= w * h * dt.itemsize \
        else None
    if arr is None:
        raise DatasetError(f"{path}: truncated PGM payload")
    return arr.reshape(h, w).astype(np.float64)


def write_pgm(path, arr: np.ndarray) -> None:
    a = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(a.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    a = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(a.tobytes())
