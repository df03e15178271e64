#!/usr/bin/env python3
"""Rebuild data/mnist-desk/ from the 10,000 MNIST digits bundled in the npm
`mnist` package (v1.1.0).

The package stores pixels as value/255 rounded to three decimals, which is
fine enough to recover the original bytes exactly. Samples are shuffled with a
fixed seed and split 8000 train / 2000 test, then written as gzipped IDX files.
"""
import argparse
import gzip
import json
import pathlib
import random
import struct
import subprocess
import tarfile
import tempfile

SPLIT_SEED = 20191008
N_TRAIN = 8000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "mnist-desk"))
    ap.add_argument("--tarball", help="pre-downloaded mnist-1.1.0.tgz")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.tarball
        if tgz is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, capture_output=True)
            tgz = str(pathlib.Path(tmp) / "mnist-1.1.0.tgz")
        samples = []
        with tarfile.open(tgz) as tar:
            for digit in range(10):
                raw = json.load(tar.extractfile(f"package/src/digits/{digit}.json"))["data"]
                for i in range(len(raw) // 784):
                    px = bytes(round(v * 255) for v in raw[i * 784:(i + 1) * 784])
                    samples.append((px, digit))

    random.Random(SPLIT_SEED).shuffle(samples)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:N_TRAIN]), ("t10k", samples[N_TRAIN:])):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803, (len(part), 28, 28),
                  b"".join(p for p, _ in part))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801, (len(part),),
                  bytes(l for _, l in part))
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()
