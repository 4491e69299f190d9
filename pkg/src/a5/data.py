"""Datasets: IDX ingestion, synthetic point clouds, seeded splits and PGM glyph prototypes."""
from __future__ import annotations

import gzip
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from a5.errors import FormatError
from a5.nn import DTYPE
from a5.rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) == 0:
            raise ValueError("dataset is empty")
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if int(self.y.min()) < 0 or int(self.y.max()) >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if float(self.x.min()) < 0 or float(self.x.max()) > 1:
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self):
        return len(self.x)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx, provenance: str | None = None) -> "Dataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Dataset(self.x[idx], self.y[idx], self.num_classes,
                       provenance if provenance is not None else self.provenance, dict(self.meta))

    def class_histogram(self) -> list[int]:
        return torch.bincount(self.y, minlength=self.num_classes).tolist()


# -- IDX -------------------------------------------------------------------------

def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    raw = _open(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header != count:
        raise FormatError(f"{path}: header declares {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    payload = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += array.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair; images become ``(N, 1, rows, cols)`` in [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path} holds {images.shape[0]} images but "
                          f"{labels_path} holds {labels.shape[0]} labels")
    x = torch.from_numpy(images.astype(np.float64) / 255.0).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    if int(y.max()) >= num_classes:
        raise FormatError(f"{labels_path}: label {int(y.max())} >= {num_classes}")
    return Dataset(x, y, num_classes, f"idx:{images_path},{labels_path}")


# -- synthetic sets --------------------------------------------------------------------

def _blob_centers(gen: np.random.Generator, m: int, dim: int, radius: float, gap: float):
    for _ in range(200):
        centers = []
        for _ in range(5000):
            c = gen.uniform(radius, 1 - radius, size=dim)
            if all(np.linalg.norm(c - o) >= 2 * radius + gap for o in centers):
                centers.append(c)
                if len(centers) == m:
                    return np.stack(centers), radius
        radius *= 0.8
    raise ValueError(f"cannot place {m} separated blobs in {dim} dimensions")


def synth_dataset(kind: str, n: int, num_classes: int = 2, dim: int = 2, seed: int = 0) -> Dataset:
    """Deterministic point clouds in [0, 1]^dim.

    ``blobs``: balls around well separated centers; every pair of classes is split
    by the bisecting hyperplane of its centers with margin >= 0.1.
    ``two_rings``: concentric rings (class k at radius 0.12 + 0.25 k / (M - 1)) in
    the first two coordinates; remaining coordinates are uniform noise.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, M={num_classes}")
    gen = Rng(seed).generator("synth", kind)
    labels = np.arange(n) % num_classes
    gen.shuffle(labels)
    meta = {}
    if kind == "blobs":
        centers, r = _blob_centers(gen, num_classes, dim, radius=0.08, gap=0.2)
        direction = gen.standard_normal((n, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        rad = r * gen.uniform(size=(n, 1)) ** (1.0 / dim)
        pts = centers[labels] + direction * rad
        meta = {"centers": centers.tolist(), "radius": r}
    elif kind == "two_rings":
        if dim < 2:
            raise ValueError("two_rings needs dim >= 2")
        radii = 0.12 + 0.25 * labels / max(num_classes - 1, 1) + gen.uniform(-0.02, 0.02, size=n)
        theta = gen.uniform(0, 2 * np.pi, size=n)
        pts = gen.uniform(0, 1, size=(n, dim))
        pts[:, 0] = 0.5 + radii * np.cos(theta)
        pts[:, 1] = 0.5 + radii * np.sin(theta)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    x = torch.from_numpy(np.clip(pts, 0.0, 1.0)).to(DTYPE)
    return Dataset(x, torch.from_numpy(labels.astype(np.int64)), num_classes,
                   f"synth:{kind},{n},{num_classes},{dim},{seed}", meta)


def split_subset(ds: Dataset, train_n: int, test_n: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle followed by a prefix split into disjoint train/test subsets."""
    if train_n < 1 or test_n < 1 or train_n + test_n > len(ds):
        raise ValueError(f"cannot draw {train_n} + {test_n} samples from {len(ds)}")
    perm = Rng(seed).generator("split").permutation(len(ds))
    train_idx, test_idx = perm[:train_n], perm[train_n:train_n + test_n]
    return (ds.subset(train_idx, f"{ds.provenance}|train:{train_n}@{seed}"),
            ds.subset(test_idx, f"{ds.provenance}|test:{test_n}@{seed}"))


# -- PGM glyphs -------------------------------------------------------------------------

@dataclass
class Prototype:
    w: torch.Tensor  # (1, H, W) in [0, 1]
    label: int
    name: str

    def __post_init__(self):
        if float(self.w.min()) < 0 or float(self.w.max()) > 1:
            raise ValueError(f"prototype {self.name!r} has values outside [0, 1]")


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 graymap with maxval < 256 into a uint8 ``(H, W)`` array."""
    raw = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        match = _PGM_TOKEN.match(raw, pos)
        if match is None:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(match.group(1))
        pos = match.end()
    if fields[0] != b"P5":
        raise FormatError(f"{path}: bad PGM magic {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixels, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return arr


def write_pgm(path, image) -> None:
    """Write a [0, 1] image (``(H, W)`` or ``(1, H, W)``) as 8-bit P5."""
    arr = np.asarray(image.detach().cpu() if isinstance(image, torch.Tensor) else image, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    pix = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


_GLYPH_NAME = re.compile(r"^(\d+)_([A-Za-z0-9_-]+)\.pgm$")


def load_glyph_set(directory, robust: bool = False) -> list[Prototype]:
    """Load ``<class>_<name>.pgm`` prototypes sorted by (class, name).

    Robustified copies (``*_rob.pgm``) are skipped unless ``robust`` is set, in which
    case only they are loaded.
    """
    directory = Path(directory)
    protos = []
    for path in sorted(directory.glob("*.pgm")):
        if path.stem.endswith("_rob") != robust:
            continue
        match = _GLYPH_NAME.match(path.name)
        if match is None:
            raise FormatError(f"{path}: glyph files must be named <class>_<name>.pgm")
        w = torch.from_numpy(read_pgm(path).astype(np.float64) / 255.0).unsqueeze(0)
        protos.append(Prototype(w, int(match.group(1)), match.group(2)))
    if not protos:
        raise FormatError(f"{directory}: no glyph prototypes found")
    return sorted(protos, key=lambda p: (p.label, p.name))
