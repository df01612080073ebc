"""Convert SVHN train_32x32.mat / test_32x32.mat to the CIFAR-10 record layout.

    python scripts/svhn_to_bin.py SRC_DIR DST_DIR

writes DST_DIR/svhn_train.bin and DST_DIR/svhn_test.bin. Needs scipy.
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from dlcaps.data_io import write_cifar_binary


def convert(mat_path: Path, out_path: Path) -> int:
    mat = loadmat(mat_path)
    images = np.transpose(mat["X"], (3, 0, 1, 2))  # (32, 32, 3, N) -> (N, 32, 32, 3)
    labels = mat["y"].ravel() % 10  # the digit 0 is stored as 10
    write_cifar_binary(out_path, images, labels)
    return len(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    args = ap.parse_args()
    args.dst.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        n = convert(args.src / f"{split}_32x32.mat", args.dst / f"svhn_{split}.bin")
        print(f"{split}: {n} images")


if __name__ == "__main__":
    main()
