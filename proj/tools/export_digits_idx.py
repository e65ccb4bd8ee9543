#!/usr/bin/env python3
"""Export scikit-learn's bundled 8x8 digits set as IDX files.

The first 1437 samples become the training split, the remaining 360 the test
split. Pixel intensities 0..16 are rescaled to 0..255.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0).clip(0, 255)
    labels = digits.target
    split = 1437
    write_idx_images(out / "digits-train-images.idx", images[:split])
    write_idx_labels(out / "digits-train-labels.idx", labels[:split])
    write_idx_images(out / "digits-test-images.idx", images[split:])
    write_idx_labels(out / "digits-test-labels.idx", labels[split:])


if __name__ == "__main__":
    main()
