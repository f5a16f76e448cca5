#!/usr/bin/env python3
"""Download MNIST into a directory under the standard IDX file names.

Tries the usual gzip mirrors first, then falls back to the MNIST-dir
package on PyPI, which ships the raw IDX files. Every file is checked
against its known SHA-256 before it is written.

usage: fetch_mnist.py [DEST]   (default: $MAXPRUNE_DATA or ./data/mnist)
"""

import argparse
import gzip
import hashlib
import io
import os
import pathlib
import re
import sys
import urllib.error
import urllib.parse
import urllib.request
import zipfile

SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

GZIP_MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]

PYPI_INDEX = "https://pypi.org/simple/mnist-dir/"
PYPI_WHEEL = "MNIST_dir-0.2.0-py3-none-any.whl"


def fetch(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as response:
        return response.read()


def from_mirrors(name: str) -> bytes | None:
    for mirror in GZIP_MIRRORS:
        try:
            return gzip.decompress(fetch(mirror + name + ".gz"))
        except (urllib.error.URLError, OSError) as exc:
            print(f"  {mirror}: {exc}", file=sys.stderr)
    return None


def from_pypi() -> dict[str, bytes]:
    index = fetch(PYPI_INDEX).decode()
    link = next(l for l in re.findall(r'href="([^"]+)"', index) if PYPI_WHEEL in l)
    archive = zipfile.ZipFile(io.BytesIO(fetch(urllib.parse.urljoin(PYPI_INDEX, link))))
    files = {}
    for info in archive.infolist():
        base = pathlib.PurePosixPath(info.filename).name
        if info.filename.startswith("__MACOSX"):
            continue
        # The package names files "train-images.idx3-ubyte".
        name = base.replace(".idx", "-idx")
        if name in SHA256:
            files[name] = archive.read(info)
    return files


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default = os.environ.get("MAXPRUNE_DATA", "data/mnist")
    parser.add_argument("dest", nargs="?", default=default, type=pathlib.Path)
    args = parser.parse_args()
    args.dest.mkdir(parents=True, exist_ok=True)

    missing = [n for n in SHA256 if not (args.dest / n).exists()]
    fallback = None
    for name in missing:
        print(f"fetching {name}")
        data = from_mirrors(name)
        if data is None or hashlib.sha256(data).hexdigest() != SHA256[name]:
            if fallback is None:
                print("  falling back to the MNIST-dir package on PyPI")
                fallback = from_pypi()
            data = fallback.get(name)
        if data is None or hashlib.sha256(data).hexdigest() != SHA256[name]:
            print(f"error: could not obtain a verified copy of {name}", file=sys.stderr)
            return 1
        (args.dest / name).write_bytes(data)

    for name, digest in SHA256.items():
        if hashlib.sha256((args.dest / name).read_bytes()).hexdigest() != digest:
            print(f"error: {args.dest / name} does not match its SHA-256", file=sys.stderr)
            return 1
    print(f"MNIST ready in {args.dest}; export MAXPRUNE_DATA={args.dest.resolve()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
