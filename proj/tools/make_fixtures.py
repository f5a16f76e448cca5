#!/usr/bin/env python3
"""Regenerate the frozen test fixtures under tests/fixtures.

Writes a 100-sample test / 300-sample train MNIST excerpt, trains a tiny
LeNet-MFC on full MNIST with the maxprune CLI, and freezes its accuracy on
the excerpt. Only rerun this when the checkpoint format changes.

usage: make_fixtures.py --cli build/maxprune --mnist $MAXPRUNE_DATA
"""

import argparse
import json
import pathlib
import shutil
import struct
import subprocess
import tempfile

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def excerpt(src: pathlib.Path, dst: pathlib.Path, prefix: str, count: int) -> None:
    images = (src / f"{prefix}-images-idx3-ubyte").read_bytes()
    labels = (src / f"{prefix}-labels-idx1-ubyte").read_bytes()
    _, _, rows, cols = struct.unpack(">IIII", images[:16])
    pixels = rows * cols
    (dst / f"{prefix}-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, count, rows, cols) + images[16 : 16 + count * pixels])
    (dst / f"{prefix}-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, count) + labels[8 : 8 + count])


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cli", required=True, type=pathlib.Path)
    parser.add_argument("--mnist", required=True, type=pathlib.Path)
    args = parser.parse_args()

    data = FIXTURES / "mnist"
    data.mkdir(parents=True, exist_ok=True)
    excerpt(args.mnist, data, "t10k", 100)
    excerpt(args.mnist, data, "train", 300)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([str(args.cli), "train", "--data", str(args.mnist), "--out", tmp,
                        "--variant", "mfc", "--fc-size", "32", "--k", "2", "--conv1", "4",
                        "--conv2", "8", "--iterations", "400", "--test-limit", "100"],
                       check=True)
        shutil.copyfile(pathlib.Path(tmp) / "model.mxpn", FIXTURES / "tiny_mfc.mxpn")
        subprocess.run([str(args.cli), "eval", "--checkpoint", str(FIXTURES / "tiny_mfc.mxpn"),
                        "--data", str(data), "--out", tmp], check=True)
        result = json.loads((pathlib.Path(tmp) / "eval.json").read_text())

    (FIXTURES / "expected.json").write_text(
        json.dumps({"checkpoint": "tiny_mfc.mxpn", "samples": result["samples"],
                    "accuracy": result["accuracy"]}, indent=2) + "\n")
    print(f"frozen accuracy {result['accuracy']} on {result['samples']} samples")


if __name__ == "__main__":
    main()
