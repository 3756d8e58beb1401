"""Deterministic rendered-digit corpus in MNIST IDX format.

The evaluation pipeline expects IDX image/label files; when the real MNIST
files are not available this module renders a desk-scale stand-in: DejaVu
glyphs with random placement, scale, rotation, stroke intensity and pixel
noise, quantized to u8 like the original. Rendering is deterministic given
the seed.

Usage: python -m regroup.synth OUTDIR [--train 12000] [--test 2600] [--seed 7]
"""

from __future__ import annotations

import argparse
import os
import struct

import numpy as np

from .dataio import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC

_FONT_CACHE = {}


def _font(size: int, bold: bool):
    key = (size, bold)
    if key not in _FONT_CACHE:
        from matplotlib import font_manager
        from PIL import ImageFont
        prop = font_manager.FontProperties(family="DejaVu Sans",
                                           weight="bold" if bold else "normal")
        _FONT_CACHE[key] = ImageFont.truetype(font_manager.findfont(prop), size)
    return _FONT_CACHE[key]


def render_digit(digit: int, rng: np.random.Generator, side: int = 28) -> np.ndarray:
    """One grayscale digit image in [0,1], shape (side, side).

    Augmentation is deliberately gentle: per-class response patterns must
    stay consistent enough for layer-wise generative classifiers to be
    informative at desk scale, while leaving the classifier attackable.
    """
    from PIL import Image, ImageDraw

    size = int(rng.integers(18, 22))
    bold = bool(rng.integers(0, 2))
    font = _font(size, bold)
    canvas = Image.new("L", (side * 2, side * 2), 0)
    draw = ImageDraw.Draw(canvas)
    left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
    gw, gh = right - left, bottom - top
    draw.text((side - gw / 2 - left, side - gh / 2 - top), str(digit), fill=255, font=font)
    angle = float(rng.uniform(-3.0, 3.0))
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(side, side))
    dx = int(rng.integers(-1, 2))
    dy = int(rng.integers(-1, 2))
    box = (side // 2 + dx, side // 2 + dy, side // 2 + dx + side, side // 2 + dy + side)
    img = np.asarray(canvas.crop(box), dtype=np.float64) / 255.0
    img *= float(rng.uniform(0.9, 1.0))
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_dataset(n: int, seed: int, side: int = 28):
    """(images u8 (N, side, side), labels u8 (N,)) with a balanced class cycle."""
    rng = np.random.default_rng(np.random.SeedSequence([0xD161, seed]))
    images = np.empty((n, side, side), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        digit = i % 10
        img = render_digit(digit, rng, side)
        images[i] = np.round(img * 255.0).astype(np.uint8)
        labels[i] = digit
    # shuffle so class order carries no information
    perm = rng.permutation(n)
    return images[perm], labels[perm]


def write_idx_images(path, images: np.ndarray):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def generate(out_dir, n_train: int = 8000, n_test: int = 2600, seed: int = 7):
    """Write train/test IDX file pairs into out_dir; returns the four paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "train_images": os.path.join(out_dir, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(out_dir, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(out_dir, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(out_dir, "t10k-labels-idx1-ubyte"),
    }
    tr_images, tr_labels = make_dataset(n_train, seed)
    te_images, te_labels = make_dataset(n_test, seed + 1)
    write_idx_images(paths["train_images"], tr_images)
    write_idx_labels(paths["train_labels"], tr_labels)
    write_idx_images(paths["test_images"], te_images)
    write_idx_labels(paths["test_labels"], te_labels)
    return paths


def main(argv=None):
    parser = argparse.ArgumentParser(description="generate a rendered-digit IDX corpus")
    parser.add_argument("out_dir")
    parser.add_argument("--train", type=int, default=8000)
    parser.add_argument("--test", type=int, default=2600)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    paths = generate(args.out_dir, args.train, args.test, args.seed)
    for name, path in paths.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
