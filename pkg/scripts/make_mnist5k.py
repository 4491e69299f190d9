"""Convert the 5000-sample MNIST subset shipped inside the ``mlxtend`` wheel to IDX.

Usage::

    pip download --no-deps mlxtend -d /tmp/wheels
    python scripts/make_mnist5k.py /tmp/wheels/mlxtend-*.whl data/mnist5k

The CSV holds 784 pixel columns followed by the label, 500 samples per digit.
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from a5.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        text = gzip.decompress(zf.read(MEMBER)).decode("ascii")
    table = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist5k-images-idx3-ubyte.gz", images)
    write_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} samples to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
