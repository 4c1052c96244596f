#!/usr/bin/env python3
"""Fabricate an MNIST-format handwritten-digit dataset.

Upscales the 8x8 scikit-learn digits (real pen strokes, 1797 images) to
28x28 with randomized rotation/scale/shift augmentation and writes
standard IDX files (train-images-idx3-ubyte etc.). Base images are split
into train/test pools *before* augmentation so no stroke pattern leaks
across the boundary. Fully deterministic for a given seed.

Usage: python scripts/make_digits_idx.py --out data/digits [--seed 0]
                                         [--train-variants 39]
                                         [--test-variants 37]
"""

from __future__ import annotations

import argparse
import struct
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform


def _augment(base28: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    angle = np.deg2rad(rng.uniform(-12.0, 12.0))
    scale = rng.uniform(0.82, 1.05)
    shift = rng.uniform(-2.0, 2.0, size=2)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]]) / scale
    center = np.array([13.5, 13.5])
    offset = center - rot @ (center + shift)
    img = affine_transform(base28, rot, offset=offset, order=1, mode="constant")
    img = img * rng.uniform(0.85, 1.1)
    img += rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _upscale(img8: np.ndarray) -> np.ndarray:
    """8x8 [0,16] -> 28x28 [0,255] by bilinear interpolation with a
    2px margin, done with plain array math."""
    glyph = np.zeros((10, 10))
    glyph[1:9, 1:9] = img8 / 16.0
    yy, xx = np.mgrid[0:28, 0:28]
    fy = (yy + 0.5) * 10.0 / 28.0 - 0.5
    fx = (xx + 0.5) * 10.0 / 28.0 - 0.5
    y0 = np.clip(np.floor(fy).astype(int), 0, 8)
    x0 = np.clip(np.floor(fx).astype(int), 0, 8)
    wy = np.clip(fy - y0, 0.0, 1.0)
    wx = np.clip(fx - x0, 0.0, 1.0)
    out = (glyph[y0, x0] * (1 - wy) * (1 - wx)
           + glyph[y0 + 1, x0] * wy * (1 - wx)
           + glyph[y0, x0 + 1] * (1 - wy) * wx
           + glyph[y0 + 1, x0 + 1] * wy * wx)
    return out * 255.0


def _write_idx(out_dir: Path, prefix: str, images: np.ndarray,
               labels: np.ndarray) -> None:
    n, h, w = images.shape
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, n, h, w))
        fh.write(images.tobytes())
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x801, n))
        fh.write(labels.astype(np.uint8).tobytes())


def generate(out_dir, seed: int = 0, train_variants: int = 39,
             test_variants: int = 37, test_fraction: float = 0.15) -> dict:
    from sklearn.datasets import load_digits

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = load_digits()
    rng = np.random.default_rng(seed)

    bases28 = np.stack([_upscale(img) for img in raw.images])
    test_mask = np.zeros(len(bases28), dtype=bool)
    for digit in range(10):
        members = np.flatnonzero(raw.target == digit)
        k = max(1, int(round(test_fraction * members.size)))
        test_mask[rng.permutation(members)[:k]] = True

    def build(mask, variants):
        idx = np.flatnonzero(mask)
        images = np.empty((idx.size * variants, 28, 28), dtype=np.uint8)
        labels = np.empty(idx.size * variants, dtype=np.uint8)
        pos = 0
        for i in idx:
            for _ in range(variants):
                images[pos] = _augment(bases28[i], rng)
                labels[pos] = raw.target[i]
                pos += 1
        order = rng.permutation(idx.size * variants)
        return images[order], labels[order]

    train_images, train_labels = build(~test_mask, train_variants)
    test_images, test_labels = build(test_mask, test_variants)
    _write_idx(out_dir, "train", train_images, train_labels)
    _write_idx(out_dir, "t10k", test_images, test_labels)
    return {"train": int(train_labels.size), "test": int(test_labels.size)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-variants", type=int, default=39)
    ap.add_argument("--test-variants", type=int, default=37)
    args = ap.parse_args()
    counts = generate(args.out, args.seed, args.train_variants,
                      args.test_variants)
    print(f"wrote {counts['train']} train / {counts['test']} test images "
          f"to {args.out}")


if __name__ == "__main__":
    main()
