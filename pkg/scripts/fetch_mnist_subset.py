"""Build gzipped IDX files from the 10k MNIST digits shipped in the npm ``mnist`` package.

The package stores 1001 digits per class as JSON arrays of intensities in [0, 1]
rounded to three decimals; ``round(v * 255)`` recovers the original bytes.

    python scripts/fetch_mnist_subset.py --out data/
"""
import argparse
import gzip
import json
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np


def pack_npm(dest: Path, version: str) -> Path:
    subprocess.run(["npm", "pack", f"mnist@{version}"], cwd=dest, check=True,
                   capture_output=True)
    return next(dest.glob("mnist-*.tgz"))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data")
    ap.add_argument("--tarball", help="existing mnist-*.tgz; skips npm")
    ap.add_argument("--version", default="1.1.0")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        tgz = Path(args.tarball) if args.tarball else pack_npm(tmp, args.version)
        with tarfile.open(tgz) as tf:
            tf.extractall(tmp / "x")
        images, labels = [], []
        for digit in range(10):
            raw = json.loads((tmp / "x/package/src/digits" / f"{digit}.json").read_text())
            arr = np.asarray(raw["data"], dtype=np.float64).reshape(-1, 784)
            images.append(np.rint(arr * 255).astype(np.uint8))
            labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    # mtime=0 keeps the gzip bytes reproducible
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.tobytes())
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main()
