"""Seeded dataset provisioning: 2-D synthetic moons, IDX image files,
a synthetic MNIST-format glyph set, and deterministic batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    value_range: tuple
    name: str

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1 or len(self.inputs) != len(self.labels):
            raise ValueError("dataset needs n >= 1 with matching labels")
        lo, hi = self.value_range
        if self.inputs.min() < lo or self.inputs.max() > hi:
            raise ValueError("inputs fall outside value_range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(list(idx), dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.value_range,
                       self.name)


# canonical two-moons geometry, mapped into the unit square with a margin
_MOON_MARGIN = 0.12


def _moon_affine(x, y):
    sx = _MOON_MARGIN + (x + 1.0) / 3.0 * (1.0 - 2 * _MOON_MARGIN)
    sy = _MOON_MARGIN + (y + 0.5) / 1.5 * (1.0 - 2 * _MOON_MARGIN)
    return sx, sy


def moon_centroids():
    """Analytic class-conditional means of the noise-free arcs."""
    c0 = _moon_affine(0.0, 2.0 / np.pi)
    c1 = _moon_affine(1.0, 0.5 - 2.0 / np.pi)
    return np.array(c0), np.array(c1)


def synth_two_moons(n, noise_sd, seed):
    """Two interleaved half-circles in [0,1]^2 with Gaussian jitter.

    Arc positions use a midpoint angle grid (exact arcs at noise_sd=0);
    jittered points are clipped to the unit square. n must be even.
    """
    if n < 2 or n % 2 != 0:
        raise ValueError("n must be even and >= 2")
    m = n // 2
    t = np.pi * (np.arange(m) + 0.5) / m
    x0, y0 = _moon_affine(np.cos(t), np.sin(t))
    x1, y1 = _moon_affine(1.0 - np.cos(t), 0.5 - np.sin(t))
    pts = np.concatenate([np.stack([x0, y0], axis=1),
                          np.stack([x1, y1], axis=1)])
    labels = np.concatenate([np.zeros(m, dtype=np.int64),
                             np.ones(m, dtype=np.int64)])
    if noise_sd > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        pts = np.clip(pts + rng.normal(0.0, noise_sd, pts.shape), 0.0, 1.0)
    return Dataset(pts, labels, (0.0, 1.0), "two_moons")


def load_idx(images_path, labels_path, limit=None):
    """Load an IDX image/label pair; pixels scaled to [0,1] as value/255."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError(f"{images_path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">iiii", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: bad IDX magic {magic:#010x}")
    if len(blob) != 16 + n * h * w:
        raise ValueError(f"{images_path}: expected {n*h*w} pixel bytes, "
                         f"found {len(blob) - 16}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, h, w)

    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    if len(lblob) < 8:
        raise ValueError(f"{labels_path}: truncated IDX header")
    lmagic, ln = struct.unpack(">ii", lblob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: bad IDX magic {lmagic:#010x}")
    if len(lblob) != 8 + ln:
        raise ValueError(f"{labels_path}: expected {ln} label bytes, "
                         f"found {len(lblob) - 8}")
    if n != ln:
        raise ValueError(f"image/label count mismatch: {n} images, {ln} labels")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(inputs, labels, (0.0, 1.0), "idx")


def write_idx(images_u8, labels, images_path, labels_path):
    """Write an IDX image/label pair (uint8 images [n,h,w])."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def batches(ds, size, shuffle, epoch_seed=0):
    """Deterministic minibatch iterator; the last partial batch is emitted."""
    n = len(ds)
    if not 1 <= size <= n:
        raise ValueError(f"batch size {size} out of range [1, {n}]")
    if shuffle:
        order = np.random.default_rng(
            np.random.SeedSequence(epoch_seed)).permutation(n)
    else:
        order = np.arange(n)
    for i in range(0, n, size):
        idx = order[i:i + size]
        yield Batch(ds.inputs[idx], ds.labels[idx])


def export_csv(ds, path):
    """Synthetic dataset as comma-separated rows: features then label."""
    flat = ds.inputs.reshape(len(ds), -1)
    with open(path, "w") as fh:
        fh.write(",".join(f"x{i}" for i in range(flat.shape[1])) + ",label\n")
        for row, lab in zip(flat, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{lab}\n")


# ---------------------------------------------------------------------------
# synthetic MNIST-format glyphs: seven-segment digits with jitter

# segment boxes (row0, row1, col0, col1) on a 12x8 glyph canvas, 2px strokes
_SEGS = {
    "A": (0, 2, 0, 8), "B": (0, 6, 6, 8), "C": (6, 12, 6, 8),
    "D": (10, 12, 0, 8), "E": (6, 12, 0, 2), "F": (0, 6, 0, 2),
    "G": (5, 7, 0, 8),
}
_DIGIT_SEGS = ["ABCDEF", "BC", "ABGED", "ABGCD", "FGBC", "AFGCD", "AFGEDC",
               "ABC", "ABCDEFG", "ABCDFG"]
_GLYPH_H, _GLYPH_W = 12, 8


def _glyph_canvas(digit):
    canvas = np.zeros((_GLYPH_H, _GLYPH_W))
    for s in _DIGIT_SEGS[digit]:
        r0, r1, c0, c1 = _SEGS[s]
        canvas[r0:r1, c0:c1] = 1.0
    return canvas


def make_glyphs(n, seed, image_size=16, noise_sd=0.01, weak_frac=0.33,
                strong_band=(0.9, 1.0), weak_band=(0.42, 0.52)):
    """n seven-segment digit images; labels cycle through the 10 classes.

    A weak_frac share of images is rendered in the low-contrast band: still
    cleanly classifiable, but irreducibly attackable once a perturbation can
    exceed their stroke contrast. The rest use the strong band. This margin
    mix is what gives single-step training something to overfit to.
    """
    labels = np.arange(n, dtype=np.int64) % 10
    images = np.zeros((n, image_size, image_size))
    off_r = (image_size - _GLYPH_H) // 2
    off_c = (image_size - _GLYPH_W) // 2
    wiggle = max(1, min(off_r, off_c) - 1)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=seed, spawn_key=(int(i),)))
        band = weak_band if rng.uniform() < weak_frac else strong_band
        canvas = _glyph_canvas(labels[i]) * rng.uniform(*band)
        r = off_r + rng.integers(-wiggle, wiggle + 1)
        c = off_c + rng.integers(-wiggle, wiggle + 1)
        images[i, r:r + _GLYPH_H, c:c + _GLYPH_W] = canvas
        if noise_sd > 0:
            images[i] += rng.normal(0.0, noise_sd, (image_size, image_size))
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images[:, None, :, :], labels, (0.0, 1.0), "glyphs")


def glyphs_to_idx(ds, images_path, labels_path):
    """Quantize a glyph dataset to uint8 and write it as an IDX pair."""
    imgs = np.round(ds.inputs[:, 0] * 255.0).astype(np.uint8)
    write_idx(imgs, ds.labels, images_path, labels_path)
