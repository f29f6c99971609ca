#!/usr/bin/env python
"""Extract the original MNIST IDX files from the npm ``mnist-data`` package.

The npm package ``mnist-data@1.2.6`` redistributes the four uncompressed
MNIST IDX files unchanged.  This script verifies their MD5 sums against the
published originals and stores gzip copies (fixed mtime, so the output is
reproducible) under ``data/mnist``.

Usage::

    npm pack mnist-data@1.2.6
    python scripts/fetch_mnist.py mnist-data-1.2.6.tgz data/mnist
"""

import argparse
import gzip
import hashlib
import os
import tarfile

MD5 = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte": "27ae3e4e09519cfbb04c329615203637",
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("tarball")
    parser.add_argument("out_dir")
    args = parser.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    with tarfile.open(args.tarball) as tar:
        for name, digest in MD5.items():
            raw = tar.extractfile(f"package/data/{name}").read()
            found = hashlib.md5(raw).hexdigest()
            if found != digest:
                raise SystemExit(f"{name}: md5 {found} does not match {digest}")
            with open(os.path.join(args.out_dir, name + ".gz"), "wb") as fh:
                fh.write(gzip.compress(raw, mtime=0))
            print(f"{name}: {len(raw)} bytes, md5 ok")


if __name__ == "__main__":
    main()
