"""Synthetic class x context out-of-distribution benchmark.

Each sample is ``class prototype + context prototype + noise``.  Class signal
lives in dims ``[0, class_dim)``, context signal in
``[class_dim, class_dim + context_dim)``; the remaining dims are pure noise.
Training contexts are spuriously linked to classes (``class % train_contexts``);
test samples come from held-out contexts when ``zero_shot`` is on.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["GenConfig", "Dataset", "generate", "context_histogram", "save_dataset", "load_dataset"]


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 10
    train_contexts: int = 4
    test_contexts: int = 2
    feature_dim: int = 32
    class_dim: int = 8
    context_dim: int = 4
    rho: float = 0.9
    n_train: int = 6000
    n_val: int = 1000
    n_test: int = 1000
    noise: float = 0.25
    class_scale: float = 0.7
    context_scale: float = 2.0
    zero_shot: bool = True
    seed: int = 0
    # "others": off-link contexts exclude the linked one, so P(linked) = rho.
    # "all": off-link contexts are uniform over every train context,
    # so P(linked) = rho + (1 - rho) / train_contexts.
    off_link: str = "others"

    def __post_init__(self):
        if self.class_dim + self.context_dim > self.feature_dim:
            raise ValueError(
                f"class_dim + context_dim ({self.class_dim + self.context_dim}) exceeds feature_dim {self.feature_dim}")
        if not 1.0 / self.train_contexts <= self.rho <= 1.0:
            raise ValueError(f"rho={self.rho} outside [1/{self.train_contexts}, 1]")
        for name in ("num_classes", "train_contexts", "feature_dim", "class_dim", "context_dim",
                     "n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.zero_shot and self.test_contexts <= 0:
            raise ValueError("zero_shot needs at least one test context")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.off_link not in ("others", "all"):
            raise ValueError(f"off_link must be 'others' or 'all', got {self.off_link!r}")

    @property
    def total_contexts(self) -> int:
        return self.train_contexts + self.test_contexts

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def linked_context(self, cls):
        return np.asarray(cls) % self.train_contexts


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of samples; ``contexts`` is never shown to the learners."""

    features: np.ndarray
    classes: np.ndarray
    contexts: np.ndarray
    role: str
    num_classes: int
    num_contexts: int
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.features, self.classes, self.contexts):
            arr.setflags(write=False)
        if not (len(self.features) == len(self.classes) == len(self.contexts)):
            raise ValueError("features, classes and contexts must have equal length")

    def __len__(self) -> int:
        return len(self.classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.role == other.role and self.num_classes == other.num_classes
                and self.num_contexts == other.num_contexts and self.config_hash == other.config_hash
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and np.array_equal(self.classes, other.classes)
                and np.array_equal(self.contexts, other.contexts))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.classes[idx], self.contexts[idx], self.role,
                       self.num_classes, self.num_contexts, self.config_hash, dict(self.meta))


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    return labels[rng.permutation(n)]


def _prototypes(rng, count, dim, scale):
    v = rng.standard_normal((count, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return scale * v


def generate(config: GenConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Draw (train, val, test).  Pure function of ``config`` (including its seed)."""
    rng = np.random.default_rng(config.seed)
    c, e_tr = config.num_classes, config.train_contexts
    class_protos = _prototypes(rng, c, config.class_dim, config.class_scale)
    context_protos = _prototypes(rng, config.total_contexts, config.context_dim, config.context_scale)
    c_lo, c_hi = config.class_dim, config.class_dim + config.context_dim

    def draw(n, role):
        classes = _balanced_labels(n, c, rng)
        if role == "test" and config.zero_shot:
            contexts = e_tr + rng.integers(0, config.test_contexts, size=n)
        elif role == "test":
            contexts = rng.integers(0, config.total_contexts, size=n)
        else:
            linked = config.linked_context(classes)
            if config.off_link == "all":
                other = rng.integers(0, e_tr, size=n)
            elif e_tr > 1:
                other = (linked + rng.integers(1, e_tr, size=n)) % e_tr
            else:
                other = linked
            keep = rng.random(n) < config.rho
            contexts = np.where(keep, linked, other)
        x = config.noise * rng.standard_normal((n, config.feature_dim))
        x[:, :c_lo] += class_protos[classes]
        x[:, c_lo:c_hi] += context_protos[contexts]
        return Dataset(x, classes.astype(np.int64), contexts.astype(np.int64), role, c,
                       config.total_contexts, config.config_hash(),
                       {"class_dims": (0, c_lo), "context_dims": (c_lo, c_hi)})

    return draw(config.n_train, "train"), draw(config.n_val, "val"), draw(config.n_test, "test")


def context_histogram(dataset: Dataset) -> np.ndarray:
    """Counts table of shape ``(num_classes, num_contexts)``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    table = np.zeros((dataset.num_classes, dataset.num_contexts), dtype=np.int64)
    np.add.at(table, (dataset.classes, dataset.contexts), 1)
    return table


# -- persistence --------------------------------------------------------
#
# Layout (all little-endian):
#   8 bytes   magic b"BMCLDS01"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: role, num_classes, num_contexts, dim, count,
#             config_hash, meta
#   count rows of: int32 context, int32 class, dim x float64 features

_MAGIC = b"BMCLDS01"


def _row_dtype(dim: int) -> np.dtype:
    return np.dtype([("context", "<i4"), ("class", "<i4"), ("x", "<f8", (dim,))])


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    header = {
        "role": dataset.role, "num_classes": dataset.num_classes,
        "num_contexts": dataset.num_contexts, "dim": dataset.dim, "count": len(dataset),
        "config_hash": dataset.config_hash, "meta": dataset.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    rows = np.empty(len(dataset), dtype=_row_dtype(dataset.dim))
    rows["context"] = dataset.contexts
    rows["class"] = dataset.classes
    rows["x"] = dataset.features
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rows.tobytes())
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    rows = np.frombuffer(raw[12 + hlen:], dtype=_row_dtype(header["dim"]))
    if len(rows) != header["count"]:
        raise ValueError(f"{path}: expected {header['count']} rows, found {len(rows)}")
    meta = {k: tuple(v) if isinstance(v, list) else v for k, v in header["meta"].items()}
    return Dataset(rows["x"].copy(), rows["class"].astype(np.int64), rows["context"].astype(np.int64),
                   header["role"], header["num_classes"], header["num_contexts"],
                   header["config_hash"], meta)
