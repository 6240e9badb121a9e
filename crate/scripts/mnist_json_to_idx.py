"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

Usage: python3 scripts/mnist_json_to_idx.py <package/src/digits> <out_dir>

Each class file holds a flat array of 28x28 grayscale samples in [0, 1].
The first 80% of every class goes to the training split, the rest to test.
Samples are written in class-interleaved order (round robin) so that a
prefix of either split is roughly class balanced.
"""
import gzip
import json
import os
import struct
import sys

SIDE = 28


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    splits = {"train": [], "test": []}
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        count = len(raw) // (SIDE * SIDE)
        samples = []
        for i in range(count):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append(bytes(max(0, min(255, round(v * 255))) for v in px))
        cut = (count * 8) // 10
        splits["train"].append([(s, digit) for s in samples[:cut]])
        splits["test"].append([(s, digit) for s in samples[cut:]])
    for name, per_class in splits.items():
        ordered = []
        longest = max(len(c) for c in per_class)
        for i in range(longest):
            for c in per_class:
                if i < len(c):
                    ordered.append(c[i])
        images = b"".join(s for s, _ in ordered)
        labels = bytes(d for _, d in ordered)
        n = len(ordered)
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), 0x00000803, [n, SIDE, SIDE], images)
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), 0x00000801, [n], labels)
        print(name, n)


if __name__ == "__main__":
    main()
