"""Procedural fine-grained dataset: every class shares the same body shape
(a rotated ellipse at a bucket-controlled scale over clutter) and differs
only in a small class-coded glyph stamped at the body center, scaled with
the object.  Also: binary PPM image I/O, the train/eval augmentation
pipeline, and class/bucket-balanced split generation with manifests.

Determinism contract: every sample is a pure function of
(class_id, bucket, rng state); split generation derives one child rng per
sample from (seed, split code, index), so any sample can be regenerated
in isolation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .bilinear import resize_image
from .errors import DataError

BUCKETS = ("S", "M", "L")
# Object-side fraction ranges: [0.15, 0.3), [0.3, 0.55), [0.55, 0.85].
_BUCKET_RANGES = {"S": (0.15, 0.30), "M": (0.30, 0.55), "L": (0.55, 0.85)}
# Integer rounding can grow the pixel bbox by up to 2px (2/64 ~ 0.032), so
# target fractions are drawn with an asymmetric safety margin.
_LO_MARGIN = 0.01


def _hi_margin(size: int) -> float:
    """Integer rounding inflates the stored bbox by under 2 px per axis, so
    the drawn side fraction must sit at least 2/size below the bucket's
    upper bound to keep the rendered sample in its requested bucket."""
    return 2.0 / size + 0.005

# 3x3 cell patterns and colors, one per class; both differ per class so the
# cue survives mild blur. Pattern cells with 0 render dark gray.
GLYPH_MASKS = np.array([
    [[1, 0, 1], [0, 1, 0], [1, 0, 1]],   # X
    [[0, 1, 0], [1, 1, 1], [0, 1, 0]],   # +
    [[1, 0, 1], [1, 1, 1], [1, 0, 1]],   # H
    [[1, 1, 1], [0, 1, 0], [0, 1, 0]],   # T
    [[1, 0, 0], [1, 0, 0], [1, 1, 1]],   # L
    [[1, 1, 0], [0, 1, 0], [0, 1, 1]],   # Z
    [[1, 1, 1], [1, 0, 1], [1, 1, 1]],   # ring
    [[1, 0, 0], [0, 1, 0], [0, 0, 1]],   # diagonal
], dtype=np.uint8)
GLYPH_COLORS = np.array([
    [0.95, 0.10, 0.10],   # red
    [0.10, 0.85, 0.10],   # green
    [0.15, 0.25, 0.95],   # blue
    [0.95, 0.90, 0.10],   # yellow
    [0.90, 0.15, 0.90],   # magenta
    [0.10, 0.90, 0.90],   # cyan
    [0.95, 0.55, 0.10],   # orange
    [0.55, 0.15, 0.85],   # purple
])
_GLYPH_OFF = np.array([0.12, 0.12, 0.12])


@dataclass
class SynthSpec:
    n_classes: int = 8
    image_size: int = 64
    clutter_density: float = 1.0


@dataclass
class Sample:
    image: np.ndarray          # (size, size, 3) float64 in [0, 1]
    label: int
    bucket: str                # "S" | "M" | "L"
    bbox: tuple[int, int, int, int]   # x, y, w, h in pixels


def bucket_of(side_fraction: float) -> str:
    """Bucket for an object-side fraction; outside the ranges is an error."""
    for name, (lo, hi) in _BUCKET_RANGES.items():
        if lo <= side_fraction < hi:
            return name
    if side_fraction == _BUCKET_RANGES["L"][1]:
        return "L"
    raise DataError(f"bucket_of: side fraction {side_fraction:.4f} outside "
                    f"[0.15, 0.85]")


def glyph_geometry(bbox: tuple[int, int, int, int]) -> tuple[int, int, int]:
    """(x0, y0, cell) of the 3x3-cell glyph, derived from the integer bbox
    alone so a reader of the manifest can reconstruct it exactly."""
    x, y, w, h = bbox
    g = max(3, int(np.floor(0.45 * min(w, h))))
    cell = max(1, int(round(g / 3)))
    side = 3 * cell
    return x + (w - side) // 2, y + (h - side) // 2, cell


def _stamp_glyph(img: np.ndarray, class_id: int,
                 bbox: tuple[int, int, int, int]) -> None:
    x0, y0, cell = glyph_geometry(bbox)
    mask = GLYPH_MASKS[class_id]
    color = GLYPH_COLORS[class_id]
    for r in range(3):
        for q in range(3):
            val = color if mask[r, q] else _GLYPH_OFF
            img[y0 + r * cell:y0 + (r + 1) * cell,
                x0 + q * cell:x0 + (q + 1) * cell] = val


def generate_sample(class_id: int, bucket: str, rng: np.random.Generator,
                    spec: SynthSpec | None = None) -> Sample:
    """Render one sample.  All random draws are class-independent: the glyph
    is stamped deterministically, so two classes rendered from identical rng
    states differ only inside the glyph square."""
    spec = spec or SynthSpec()
    if not 0 <= class_id < spec.n_classes:
        raise DataError(f"generate_sample: class {class_id} not in "
                        f"[0, {spec.n_classes})")
    if class_id >= len(GLYPH_MASKS):
        raise DataError(f"generate_sample: no glyph defined for class "
                        f"{class_id}")
    if bucket not in _BUCKET_RANGES:
        raise DataError(f"generate_sample: unknown bucket {bucket!r}")
    size = spec.image_size

    # Background and clutter (behind the body).
    bg = rng.uniform(0.55, 0.80, size=3)
    img = np.ones((size, size, 3)) * bg
    n_rects = int(round(4 * spec.clutter_density))
    for _ in range(n_rects):
        rw = int(rng.integers(3, 13))
        rh = int(rng.integers(3, 13))
        rx = int(rng.integers(0, size - rw + 1))
        ry = int(rng.integers(0, size - rh + 1))
        img[ry:ry + rh, rx:rx + rw] = rng.uniform(0.35, 0.70, size=3)

    # Body geometry: rotation and aspect first, then the scale chosen so the
    # rotated ellipse's float bounding box hits the target side exactly.
    lo, hi = _BUCKET_RANGES[bucket]
    draw_lo, draw_hi = lo + _LO_MARGIN, hi - _hi_margin(size)
    if draw_lo >= draw_hi:
        raise DataError(f"generate_sample: image size {size} too small to "
                        f"guarantee bucket {bucket!r}")
    frac = rng.uniform(draw_lo, draw_hi)
    theta = rng.uniform(0.0, np.pi)
    ratio = rng.uniform(0.60, 0.95)
    cth, sth = np.cos(theta), np.sin(theta)
    mx = 2.0 * np.sqrt(cth ** 2 + (ratio * sth) ** 2)
    my = 2.0 * np.sqrt(sth ** 2 + (ratio * cth) ** 2)
    target = frac * size
    a = target / max(mx, my)
    b = ratio * a
    bw_f, bh_f = a * mx, a * my

    margin = 1.0
    cx = rng.uniform(bw_f / 2 + margin, size - bw_f / 2 - margin)
    cy = rng.uniform(bh_f / 2 + margin, size - bh_f / 2 - margin)
    body_color = rng.uniform(0.20, 0.45, size=3)

    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    u = (dx * cth + dy * sth) / a
    v = (-dx * sth + dy * cth) / b
    body = u * u + v * v <= 1.0
    img[body] = body_color

    # Noise on the non-body region only, scaled with the clutter density.
    amp = 0.04 * spec.clutter_density
    noise = rng.uniform(-amp, amp, size=(size, size, 3))
    if amp > 0.0:
        img[~body] = np.clip(img[~body] + noise[~body], 0.0, 1.0)

    x0 = int(np.floor(cx - bw_f / 2))
    x1 = int(np.ceil(cx + bw_f / 2))
    y0 = int(np.floor(cy - bh_f / 2))
    y1 = int(np.ceil(cy + bh_f / 2))
    bbox = (x0, y0, x1 - x0, y1 - y0)

    _stamp_glyph(img, class_id, bbox)

    got_bucket = bucket_of(max(bbox[2], bbox[3]) / size)
    if got_bucket != bucket:
        raise DataError(f"generate_sample: rendered bbox {bbox} fell in "
                        f"bucket {got_bucket}, requested {bucket}")
    return Sample(image=img, label=class_id, bucket=bucket, bbox=bbox)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(image: np.ndarray, train: bool,
            rng: np.random.Generator | None = None,
            resize_to: int = 72, crop_to: int = 64) -> np.ndarray:
    """Train: resize, random crop, horizontal flip with p = 0.5.
    Eval: resize, center crop; no randomness consumed."""
    big = resize_image(image, resize_to, resize_to)
    span = resize_to - crop_to
    if train:
        if rng is None:
            raise DataError("augment: training mode needs an rng")
        oy = int(rng.integers(0, span + 1))
        ox = int(rng.integers(0, span + 1))
        out = big[oy:oy + crop_to, ox:ox + crop_to]
        if rng.random() < 0.5:
            out = out[:, ::-1]
    else:
        off = span // 2
        out = big[off:off + crop_to, off:off + crop_to]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# PPM I/O (binary P6, maxval 255)
# ---------------------------------------------------------------------------

def write_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"write_ppm: expected (h, w, 3), got {image.shape}")
    if np.min(image) < 0.0 or np.max(image) > 1.0:
        raise DataError("write_ppm: values outside [0, 1]")
    h, w = image.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return header + pixels.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    """Parse binary P6 bytes; errors carry the byte offset of the problem."""
    if data[:2] != b"P6":
        raise DataError(f"read_ppm: bad magic {data[:2]!r} at byte 0")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise DataError(f"read_ppm: expected integer at byte {start}, "
                            f"got {token!r}")
        fields.append(int(token))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError(f"read_ppm: missing whitespace after maxval at "
                        f"byte {pos}")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"read_ppm: unsupported maxval {maxval} (want 255)")
    need = w * h * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DataError(f"read_ppm: payload truncated at byte "
                        f"{pos + len(payload)}, need {pos + need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Splits and manifests
# ---------------------------------------------------------------------------

_SPLIT_CODES = {"train": 0, "test": 1}


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _SPLIT_CODES[split], index]))


def split_plan(n: int, n_classes: int) -> list[tuple[int, str]]:
    """(label, bucket) per index: classes round-robin, buckets cycling per
    class block, so both are balanced to within one sample."""
    return [(i % n_classes, BUCKETS[(i // n_classes) % 3]) for i in range(n)]


@dataclass
class SplitData:
    images: np.ndarray        # (N, size, size, 3)
    labels: np.ndarray        # (N,) int64
    buckets: list[str]
    bboxes: np.ndarray        # (N, 4) int64
    paths: list[str]


def build_split(out_dir: str, split: str, n: int, seed: int,
                spec: SynthSpec | None = None) -> str:
    """Generate samples, write PPMs plus a manifest, return manifest path.

    Manifest line format: ``path<TAB>label<TAB>bucket<TAB>x y w h``.
    """
    spec = spec or SynthSpec()
    if split not in _SPLIT_CODES:
        raise DataError(f"build_split: unknown split {split!r}")
    if n < spec.n_classes:
        raise DataError(f"build_split: {n} samples < {spec.n_classes} classes")
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for idx, (label, bucket) in enumerate(split_plan(n, spec.n_classes)):
        s = generate_sample(label, bucket, sample_rng(seed, split, idx), spec)
        rel = os.path.join("images", f"{split}_{idx:05d}.ppm")
        with open(os.path.join(out_dir, rel), "wb") as f:
            f.write(write_ppm(s.image))
        x, y, w, h = s.bbox
        lines.append(f"{rel}\t{label}\t{bucket}\t{x} {y} {w} {h}\n")
    manifest = os.path.join(out_dir, f"{split}.txt")
    with open(manifest, "w") as f:
        f.writelines(lines)
    return manifest


def load_split(out_dir: str, split: str) -> SplitData:
    manifest = os.path.join(out_dir, f"{split}.txt")
    if not os.path.exists(manifest):
        raise DataError(f"load_split: no manifest at {manifest}")
    images, labels, buckets, bboxes, paths = [], [], [], [], []
    with open(manifest) as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"load_split: line {ln} has {len(parts)} "
                                f"fields, want 4")
            rel, label_s, bucket, bbox_s = parts
            if bucket not in _BUCKET_RANGES:
                raise DataError(f"load_split: line {ln} bad bucket "
                                f"{bucket!r}")
            bbox = tuple(int(t) for t in bbox_s.split())
            if len(bbox) != 4:
                raise DataError(f"load_split: line {ln} bad bbox {bbox_s!r}")
            with open(os.path.join(out_dir, rel), "rb") as imf:
                images.append(read_ppm(imf.read()))
            labels.append(int(label_s))
            buckets.append(bucket)
            bboxes.append(bbox)
            paths.append(rel)
    return SplitData(images=np.stack(images),
                     labels=np.asarray(labels, dtype=np.int64),
                     buckets=buckets,
                     bboxes=np.asarray(bboxes, dtype=np.int64),
                     paths=paths)
