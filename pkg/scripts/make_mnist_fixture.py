"""Build tests/data/mnist-2048-images-idx3-ubyte.gz from the MNIST sample bundled in mlxtend.

Usage: python scripts/make_mnist_fixture.py path/to/mlxtend-*.whl [count]

The mlxtend wheel ships 5000 MNIST training digits as ``mnist_5k.csv.gz``
(784 pixel columns followed by the label).  Only the first ``count`` images
are kept, written as a gzipped IDX u8 3-D tensor.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from pixelrnn.data import write_idx


def main(argv):
    wheel = argv[1]
    count = int(argv[2]) if len(argv) > 2 else 2048
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:count, :784].reshape(count, 28, 28).astype(np.uint8)
    out = Path(__file__).resolve().parents[1] / "tests" / "data" / "mnist-2048-images-idx3-ubyte.gz"
    write_idx(out, images)
    print(f"wrote {count} images to {out}")


if __name__ == "__main__":
    main(sys.argv)
