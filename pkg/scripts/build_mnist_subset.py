"""Build the bundled 9k/1k MNIST subset from the `mnist` npm package.

The npm package (``npm pack mnist``) ships 10,000 MNIST digits as JSON, one
file per class, with pixels stored as ``round(byte / 255, 3)``. Three decimals
are enough to recover every original byte exactly, so the output IDX files
hold the original 8-bit values.

    python scripts/build_mnist_subset.py path/to/package/src/digits data/mnist
"""

import json
import sys
from pathlib import Path

import numpy as np

from advl.io import save_idx
from advl.training import LabeledDataset


def main(src, dst, test_per_class=100):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        imgs = flat.reshape(-1, 28, 28)
        raw = np.rint(imgs * 255)
        if not np.allclose(np.round(raw / 255, 3), imgs):
            raise SystemExit(f"digit {digit}: pixel bytes are not recoverable")
        test_x.append(raw[:test_per_class])
        test_y += [digit] * test_per_class
        train_x.append(raw[test_per_class:])
        train_y += [digit] * (len(raw) - test_per_class)
    rng = np.random.default_rng(0)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)[:, None] / 255.0
        y = np.asarray(ys)
        order = rng.permutation(len(y))
        save_idx(LabeledDataset(x[order], y[order]),
                 dst / f"{name}-images-idx3-ubyte.gz", dst / f"{name}-labels-idx1-ubyte.gz")
        print(name, len(y))


if __name__ == "__main__":
    main(*sys.argv[1:3])
