"""Datasets: tensor container, synthetic surrogate images, preprocessing, splits.

Container layout (little-endian)::

    b"ADTN" | u16 version | u8 dtype tag (1=f32, 2=f64) | u8 rank | u32 dims[rank]
    | payload | u8 has_labels | [u32 count | i32 labels[count]]
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffnet import atomic_write
from .errors import ConfigError, DataError, FormatError, InputError

MAGIC = b"ADTN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass
class SealedLabels:
    """True labels of the unlabeled pool, kept apart from training code."""

    labels: np.ndarray = field(repr=False)


@dataclass
class UnlabeledSet:
    x: np.ndarray
    audit: Optional[SealedLabels] = field(default=None, repr=False)

    def __len__(self):
        return len(self.x)


EvalSet = LabeledSet


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    image_dims: tuple[int, int, int]
    counts: dict[str, list[int]]
    pixel_scale: str = "float pixels in [0, 1]"
    seed: Optional[int] = None

    def to_json(self) -> str:
        d = {
            "name": self.name,
            "class_names": list(self.class_names),
            "image_dims": list(self.image_dims),
            "counts": {k: list(map(int, v)) for k, v in self.counts.items()},
            "pixel_scale": self.pixel_scale,
            "seed": self.seed,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(d["name"], d["class_names"], tuple(d["image_dims"]), d["counts"],
                   d.get("pixel_scale", ""), d.get("seed"))


# -- container ----------------------------------------------------------------

def tensor_to_bytes(x: np.ndarray, labels: Optional[np.ndarray] = None, dtype="<f4") -> bytes:
    dt = np.dtype(dtype)
    if dt not in _TAGS:
        raise InputError(f"unsupported container dtype {dtype}")
    x = np.ascontiguousarray(x, dtype=dt)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, _TAGS[dt], x.ndim))
    buf.write(struct.pack(f"<{x.ndim}I", *x.shape))
    buf.write(x.tobytes())
    if labels is None:
        buf.write(b"\x00")
    else:
        lab = np.ascontiguousarray(labels, dtype="<i4")
        buf.write(b"\x01")
        buf.write(struct.pack("<I", lab.size))
        buf.write(lab.tobytes())
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    version, tag, rank = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    pos = 8
    if len(data) < pos + 4 * rank:
        raise FormatError("truncated container header")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    dt = _DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(data) < pos + nbytes + 1:
        raise FormatError("truncated container payload")
    x = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
    pos += nbytes
    flag = data[pos]
    pos += 1
    labels = None
    if flag == 1:
        if len(data) < pos + 4:
            raise FormatError("truncated label block")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if len(data) < pos + 4 * count:
            raise FormatError("truncated label block")
        labels = np.frombuffer(data, dtype="<i4", count=count, offset=pos).astype(np.int64)
        pos += 4 * count
        if count != (dims[0] if rank else 0):
            raise FormatError(f"{count} labels for {dims[0] if rank else 0} samples")
    elif flag != 0:
        raise FormatError(f"bad label flag {flag}")
    if pos != len(data):
        raise FormatError("trailing bytes after container")
    return x, labels


def save_tensor(path, x, labels=None, dtype="<f4") -> None:
    atomic_write(path, tensor_to_bytes(x, labels, dtype))


def load_tensor(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def _check_pixels(x: np.ndarray) -> None:
    bad = ~((x >= 0.0) & (x <= 1.0))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"pixel value {x[idx]!r} outside [0, 1] at index {idx}")


def load_dataset(path, num_classes: Optional[int] = None, manifest_path=None):
    """Load a container as a ``LabeledSet`` (or ``UnlabeledSet`` when it has no labels).

    Returns ``(dataset, manifest)``; the manifest is read from
    ``manifest.json`` beside the file when present.
    """
    x, labels = load_tensor(path)
    if x.ndim != 4:
        raise FormatError(f"expected a rank-4 image tensor, got rank {x.ndim}")
    _check_pixels(x)
    manifest = None
    mp = manifest_path or os.path.join(os.path.dirname(os.fspath(path)), "manifest.json")
    if os.path.exists(mp):
        with open(mp) as fh:
            manifest = DatasetManifest.from_json(fh.read())
        if num_classes is None:
            num_classes = len(manifest.class_names)
    if labels is None:
        return UnlabeledSet(x), manifest
    if num_classes is not None:
        bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
        if bad.size:
            raise DataError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {num_classes})")
    return LabeledSet(x, labels), manifest


# -- preprocessing ------------------------------------------------------------

def preprocess(images: np.ndarray, crop: Optional[int] = None, scale: bool = False) -> np.ndarray:
    """Centre-crop ``(B, H, W, C)`` images to ``crop x crop``; optionally divide by 255."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    H, W = images.shape[1:3]
    if crop is not None:
        if crop < 1 or crop > H or crop > W:
            raise InputError(f"crop {crop} does not fit {H}x{W} images")
        top, left = (H - crop) // 2, (W - crop) // 2
        images = images[:, top:top + crop, left:left + crop, :]
    if scale:
        return images.astype(np.float64) / 255.0
    return images


def import_csv(path, dims: Sequence[int], scale: bool = True) -> LabeledSet:
    """Read ``label,p0,p1,...`` rows (integer pixels when ``scale``) into a labeled set."""
    dims = tuple(int(d) for d in dims)
    n = int(np.prod(dims))
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != n + 1:
                raise FormatError(f"line {lineno}: expected {n + 1} fields, got {len(row)}")
            try:
                ys.append(int(row[0]))
                xs.append([float(v) for v in row[1:]])
            except ValueError:
                raise FormatError(f"line {lineno}: non-numeric field") from None
    x = np.asarray(xs, dtype=np.float64).reshape((-1,) + dims)
    if scale:
        x = x / 255.0
    _check_pixels(x)
    return LabeledSet(x.astype(np.float32), np.asarray(ys, dtype=np.int64))


# -- synthetic surrogate ------------------------------------------------------

@dataclass
class SynthSpec:
    num_classes: int = 3
    image_dims: tuple[int, int, int] = (8, 8, 1)
    noise: float = 0.1
    samples_per_class: int = 1000
    amplitude: float = 0.3
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        self.image_dims = tuple(int(d) for d in self.image_dims)
        if self.noise < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not 0 <= self.amplitude <= 0.5:
            raise ConfigError("amplitude must lie in [0, 0.5]")


_FREQS = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (1, 2), (2, 1), (2, 2)]


def class_templates(spec: SynthSpec) -> np.ndarray:
    """One smooth pattern per class: 0.5 plus ``amplitude`` times a
    low-frequency cosine whose frequency pair (and, past eight classes,
    phase) is class specific."""
    H, W, C = spec.image_dims
    rr, cc = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    out = np.empty((spec.num_classes, H, W, C))
    for k in range(spec.num_classes):
        fy, fx = _FREQS[k % len(_FREQS)]
        phase = (k // len(_FREQS)) * np.pi / 2
        out[k] = (0.5 + spec.amplitude * np.cos(2 * np.pi * (fy * rr + fx * cc) + phase))[..., None]
    flat = out.reshape(spec.num_classes, -1)
    for a in range(spec.num_classes):
        for b in range(a):
            if np.allclose(flat[a], flat[b]):
                raise ConfigError(f"templates of classes {a} and {b} coincide")
    return out


def generate_synthetic(spec: SynthSpec) -> tuple[LabeledSet, DatasetManifest]:
    """Template plus i.i.d. Gaussian pixel noise, clipped to [0, 1], stored as float32."""
    rng = np.random.default_rng(spec.seed)
    tmpl = class_templates(spec)
    n = spec.samples_per_class
    y = np.repeat(np.arange(spec.num_classes), n)
    noise = rng.normal(0.0, 1.0, size=(len(y),) + spec.image_dims) * spec.noise
    x = np.clip(tmpl[y] + noise, 0.0, 1.0).astype(np.float32)
    manifest = DatasetManifest(
        name=spec.name,
        class_names=[f"class{k}" for k in range(spec.num_classes)],
        image_dims=spec.image_dims,
        counts={"pool": [n] * spec.num_classes},
        pixel_scale="float32 pixels in [0, 1]",
        seed=spec.seed,
    )
    return LabeledSet(x, y), manifest


# -- splitting ------------------------------------------------------------------

def _per_class(total: int, num_classes: int) -> list[int]:
    base, rem = divmod(total, num_classes)
    return [base + (1 if k < rem else 0) for k in range(num_classes)]


@dataclass
class SplitResult:
    train: LabeledSet
    unlabeled: UnlabeledSet
    test: LabeledSet
    indices: dict[str, np.ndarray]
    counts: dict[str, list[int]]


def split_balanced(pool: LabeledSet, n_train: int, n_unlabeled: int, n_test: int,
                   seed: int, num_classes: Optional[int] = None) -> SplitResult:
    """Disjoint class-balanced train / unlabeled / test splits.

    When a split size is not a multiple of the class count, the remainder
    goes one sample each to the lowest class indices.
    """
    y = np.asarray(pool.y)
    C = int(num_classes if num_classes is not None else y.max() + 1)
    want = {name: _per_class(n, C) for name, n in
            (("train", n_train), ("unlabeled", n_unlabeled), ("test", n_test))}
    rng = np.random.default_rng(seed)
    picked = {name: [] for name in want}
    for k in range(C):
        idx = np.flatnonzero(y == k)
        need = sum(want[name][k] for name in want)
        if idx.size < need:
            raise ConfigError(f"class {k} has {idx.size} samples, split needs {need}")
        idx = rng.permutation(idx)
        start = 0
        for name in ("train", "unlabeled", "test"):
            m = want[name][k]
            picked[name].append(idx[start:start + m])
            start += m
    indices = {name: np.sort(np.concatenate(v)) for name, v in picked.items()}
    x = pool.x
    return SplitResult(
        train=LabeledSet(x[indices["train"]], y[indices["train"]]),
        unlabeled=UnlabeledSet(x[indices["unlabeled"]], SealedLabels(y[indices["unlabeled"]])),
        test=LabeledSet(x[indices["test"]], y[indices["test"]]),
        indices=indices,
        counts=want,
    )


def write_split(out_dir, split: SplitResult, manifest: DatasetManifest) -> DatasetManifest:
    """Write train/unlabeled/test containers, the sealed audit labels and a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    save_tensor(os.path.join(out_dir, "train.adtn"), split.train.x, split.train.y)
    save_tensor(os.path.join(out_dir, "unlabeled.adtn"), split.unlabeled.x)
    save_tensor(os.path.join(out_dir, "test.adtn"), split.test.x, split.test.y)
    audit = {"indices": split.indices["unlabeled"].tolist(),
             "labels": split.unlabeled.audit.labels.tolist()}
    atomic_write(os.path.join(out_dir, "unlabeled_audit.json"), (json.dumps(audit) + "\n").encode())
    m = DatasetManifest(manifest.name, manifest.class_names, manifest.image_dims,
                        dict(split.counts), manifest.pixel_scale, manifest.seed)
    atomic_write(os.path.join(out_dir, "manifest.json"), m.to_json().encode())
    return m


def read_split(data_dir) -> tuple[LabeledSet, UnlabeledSet, LabeledSet, DatasetManifest]:
    train, manifest = load_dataset(os.path.join(data_dir, "train.adtn"))
    unl, _ = load_dataset(os.path.join(data_dir, "unlabeled.adtn"))
    test, _ = load_dataset(os.path.join(data_dir, "test.adtn"))
    if not isinstance(unl, UnlabeledSet):
        unl = UnlabeledSet(unl.x, SealedLabels(unl.y))
    audit = os.path.join(data_dir, "unlabeled_audit.json")
    if os.path.exists(audit):
        with open(audit) as fh:
            unl.audit = SealedLabels(np.asarray(json.load(fh)["labels"], dtype=np.int64))
    if manifest is None:
        C = int(max(train.y.max(), test.y.max())) + 1
        manifest = DatasetManifest("unnamed", [f"class{k}" for k in range(C)],
                                   tuple(train.x.shape[1:]), {})
    return train, unl, test, manifest
