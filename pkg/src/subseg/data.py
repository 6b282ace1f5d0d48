"""Synthetic segmentation data and its on-disk format.

Images mimic short-axis cardiac slices at toy scale: a bright ellipse
("ventricle", class 2) wrapped by a darker ring ("myocardium", class 1) on a
dark background, plus one small off-center blob per extra class (class 3 and
up). Class pixel counts are deliberately long-tailed:
background > ventricle > myocardium > blob.

On disk each sample is one little-endian binary file:

    magic "SEG1" | version u16 | H u32 | W u32 | C u16 | flags u8
    image  f32[H*W] row-major
    label  u8[H*W]  present iff flags bit 0

Images are quantized to f32 at generation time so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SEG1"
VERSION = 1

# base intensity per class id; extra blob classes reuse the last entry
CLASS_INTENSITIES = (0.20, 0.45, 0.85, 0.60)

__all__ = [
    "Sample",
    "SplitSpec",
    "DataFormatError",
    "GeometryError",
    "generate_dataset",
    "generate_sample",
    "save_split",
    "load_split",
    "save_dataset",
    "load_dataset",
    "sample_path",
]


class DataFormatError(ValueError):
    """Malformed or inconsistent sample file."""


class GeometryError(RuntimeError):
    """Could not place the requested structures after bounded retries."""


class Sample:
    """One image with an optional label map."""

    def __init__(self, image, label, sample_id, num_classes):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 1:
            raise ValueError("image must be [1, H, W], got {}".format(image.shape))
        h, w = image.shape[1:]
        if h % 4 or w % 4:
            raise ValueError("H and W must be divisible by 4, got {}x{}".format(h, w))
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if label is not None:
            label = np.asarray(label)
            if label.shape != (h, w):
                raise ValueError("label shape {} does not match image {}x{}".format(
                    label.shape, h, w))
            if label.min() < 0 or label.max() >= num_classes:
                raise ValueError("label values must lie in [0, {})".format(num_classes))
            label = label.astype(np.int64)
        self.image = image
        self.label = label
        self.id = str(sample_id)
        self.num_classes = int(num_classes)

    @property
    def has_label(self):
        return self.label is not None

    @property
    def shape(self):
        return self.image.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_label = ((self.label is None and other.label is None)
                      or (self.label is not None and other.label is not None
                          and np.array_equal(self.label, other.label)))
        return (self.id == other.id
                and self.num_classes == other.num_classes
                and self.image.tobytes() == other.image.tobytes()
                and same_label)


class SplitSpec:
    """How many images to generate and how few of them carry labels."""

    def __init__(self, n_train=40, n_test=8, labeled_fraction=0.1, seed=0):
        if n_train < 2 or n_test < 1:
            raise ValueError("need at least 2 train and 1 test images")
        if not 0.0 < labeled_fraction < 1.0:
            raise ValueError("labeled_fraction must be in (0, 1)")
        self.n_train = int(n_train)
        self.n_test = int(n_test)
        self.labeled_fraction = float(labeled_fraction)
        self.seed = int(seed)
        self.n_labeled = max(1, round(self.n_train * self.labeled_fraction))
        self.n_unlabeled = self.n_train - self.n_labeled
        if self.n_labeled >= self.n_unlabeled:
            raise ValueError(
                "labeled count {} must stay below unlabeled count {}".format(
                    self.n_labeled, self.n_unlabeled))


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.ogrid[:h, :w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_sample(rng, height, width, num_classes, noise_level, sample_id,
                    labeled=True, max_tries=50):
    """One synthetic image + label map from the given generator."""
    if num_classes < 3:
        raise ValueError("need at least 3 classes (background, ring, ellipse)")
    s = min(height, width)
    for _ in range(max_tries):
        ry = rng.uniform(0.14, 0.19) * s
        rx = rng.uniform(0.14, 0.19) * s
        thick = rng.uniform(0.050, 0.058) * s
        cy = height / 2 + rng.uniform(-0.08, 0.08) * height
        cx = width / 2 + rng.uniform(-0.08, 0.08) * width
        outer_ry, outer_rx = ry + thick, rx + thick
        if (cy - outer_ry < 1 or cy + outer_ry > height - 2
                or cx - outer_rx < 1 or cx + outer_rx > width - 2):
            continue

        label = np.zeros((height, width), dtype=np.int64)
        outer = _ellipse_mask(height, width, cy, cx, outer_ry, outer_rx)
        inner = _ellipse_mask(height, width, cy, cx, ry, rx)
        label[outer] = 1
        label[inner] = 2

        ok = True
        for extra in range(3, num_classes):
            rho = rng.uniform(0.045, 0.06) * s
            placed = False
            for _ in range(max_tries):
                by = rng.uniform(rho + 1, height - rho - 2)
                bx = rng.uniform(rho + 1, width - rho - 2)
                # keep the blob clear of the ring and any earlier blob
                gap = ((by - cy) / (outer_ry + rho + 2)) ** 2 + \
                      ((bx - cx) / (outer_rx + rho + 2)) ** 2
                if gap <= 1.0:
                    continue
                blob = _ellipse_mask(height, width, by, bx, rho, rho)
                if not blob.any() or np.any(label[blob] != 0):
                    continue
                label[blob] = extra
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            continue

        intensities = np.array([
            CLASS_INTENSITIES[min(c, len(CLASS_INTENSITIES) - 1)]
            for c in range(num_classes)])
        # per-image class intensity jitter plus pixel noise, both off at 0
        jitter = rng.uniform(-1.0, 1.0, size=num_classes) * 0.75 * noise_level
        image = (intensities + jitter)[label]
        image = image + rng.normal(size=(height, width)) * noise_level
        image = np.clip(image, 0.0, 1.0)
        image = image.astype(np.float32).astype(np.float64)[None]
        return Sample(image, label if labeled else None, sample_id, num_classes)
    raise GeometryError(
        "no feasible geometry for {}x{} after {} tries".format(
            height, width, max_tries))


def generate_dataset(spec, height=64, width=64, num_classes=4, noise_level=0.08):
    """(labeled, unlabeled, test) sample lists, reproducible from spec.seed."""
    root = np.random.SeedSequence(spec.seed)
    train_ss, test_ss = root.spawn(2)
    labeled, unlabeled, test = [], [], []
    for i, child in enumerate(train_ss.spawn(spec.n_train)):
        rng = np.random.default_rng(child)
        is_labeled = i < spec.n_labeled
        sid = "train-{:04d}".format(i)
        sample = generate_sample(
            rng, height, width, num_classes, noise_level, sid, labeled=is_labeled)
        (labeled if is_labeled else unlabeled).append(sample)
    for i, child in enumerate(test_ss.spawn(spec.n_test)):
        rng = np.random.default_rng(child)
        sid = "test-{:04d}".format(i)
        test.append(generate_sample(
            rng, height, width, num_classes, noise_level, sid, labeled=True))
    return labeled, unlabeled, test


# ---------------------------------------------------------------------------
# binary format

_HEADER = struct.Struct("<4sHIIHB")


def sample_path(root, split, sample_id):
    return os.path.join(root, split, sample_id + ".seg1")


def _encode(sample):
    h, w = sample.shape
    flags = 1 if sample.has_label else 0
    parts = [_HEADER.pack(MAGIC, VERSION, h, w, sample.num_classes, flags)]
    parts.append(sample.image[0].astype("<f4").tobytes())
    if sample.has_label:
        parts.append(sample.label.astype(np.uint8).tobytes())
    return b"".join(parts)


def _decode(blob, sample_id):
    if len(blob) < _HEADER.size:
        raise DataFormatError("file shorter than header")
    magic, version, h, w, c, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataFormatError("bad magic {!r}".format(magic))
    if version != VERSION:
        raise DataFormatError("unknown version {}".format(version))
    has_label = bool(flags & 1)
    need = _HEADER.size + 4 * h * w + (h * w if has_label else 0)
    if len(blob) != need:
        raise DataFormatError(
            "expected {} bytes, file has {}".format(need, len(blob)))
    off = _HEADER.size
    image = np.frombuffer(blob, dtype="<f4", count=h * w, offset=off)
    image = image.astype(np.float64).reshape(1, h, w)
    label = None
    if has_label:
        raw = np.frombuffer(blob, dtype=np.uint8, count=h * w,
                            offset=off + 4 * h * w)
        label = raw.reshape(h, w).astype(np.int64)
        bad = np.argwhere(label >= c)
        if bad.size:
            r, col = bad[0]
            raise DataFormatError(
                "label {} at pixel ({}, {}) exceeds class count {}".format(
                    int(label[r, col]), int(r), int(col), c))
    return Sample(image, label, sample_id, c)


def save_split(root, split, samples):
    os.makedirs(os.path.join(root, split), exist_ok=True)
    for sample in samples:
        with open(sample_path(root, split, sample.id), "wb") as fh:
            fh.write(_encode(sample))


def load_split(root, split):
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise DataFormatError("missing split directory {}".format(split_dir))
    samples = []
    for name in sorted(os.listdir(split_dir)):
        if not name.endswith(".seg1"):
            continue
        with open(os.path.join(split_dir, name), "rb") as fh:
            blob = fh.read()
        samples.append(_decode(blob, name[:-5]))
    if not samples:
        raise DataFormatError("no samples in {}".format(split_dir))
    return samples


def save_dataset(root, labeled, unlabeled, test):
    save_split(root, "labeled", labeled)
    save_split(root, "unlabeled", unlabeled)
    save_split(root, "test", test)


def load_dataset(root):
    return (load_split(root, "labeled"),
            load_split(root, "unlabeled"),
            load_split(root, "test"))
