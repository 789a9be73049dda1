"""Time-resolved multichannel signal datasets.

Every time point is one labelled sample: a vector holding one value per
electrode. Two on-disk formats are supported.

CSV::

    channels=<N>,classes=<O>[,names=L;R;B;F]
    v_0,v_1,...,v_{N-1},label
    ...

Binary (little-endian)::

    b"GCNS" | u16 version=1 | u32 n_channels | u32 n_classes | u64 n_samples
    | n_samples*n_channels float32, row-major | n_samples uint8 labels

All shuffling goes through ``numpy.random.default_rng(seed)``, i.e. the
64-bit PCG64 generator, so splits are reproducible for a given seed.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

__all__ = [
    "DataError",
    "MalformedHeaderError",
    "NonFiniteValueError",
    "LabelOutOfRangeError",
    "TruncatedPayloadError",
    "SignalDataset",
    "SplitPlan",
    "PHYSIONET_TASKS",
    "load_dataset",
    "save_dataset",
    "make_synthetic",
    "split",
    "parse_split_kind",
    "zscore_stats",
]

BINARY_MAGIC = b"GCNS"
BINARY_VERSION = 1
_BIN_HEADER = struct.Struct("<4sHIIQ")

# L = imagine left fist, R = right fist, B = both fists, F = both feet
PHYSIONET_TASKS = ("L", "R", "B", "F")


class DataError(ValueError):
    """Base class for dataset validation and parsing failures."""


class MalformedHeaderError(DataError):
    pass


class NonFiniteValueError(DataError):
    pass


class LabelOutOfRangeError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


@dataclass(frozen=True)
class SignalDataset:
    """``values`` is n_samples x n_channels; ``labels`` are dense class ids."""

    values: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        if labels.shape != (values.shape[0],):
            raise DataError(
                f"labels length {labels.shape} does not match {values.shape[0]} samples"
            )
        if values.shape[1] < 2:
            raise DataError("a dataset needs at least 2 channels")
        if len(self.class_names) < 1:
            raise DataError("at least one class name is required")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteValueError(f"non-finite value at sample {bad[0]}, channel {bad[1]}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise LabelOutOfRangeError(
                f"labels must lie in [0, {len(self.class_names)}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        values.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "SignalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SignalDataset(self.values[idx], self.labels[idx], self.class_names)


@dataclass(frozen=True)
class SplitPlan:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    kind: tuple = field(default=("holdout", 0.9))

    def describe(self) -> str:
        if self.kind[0] == "holdout":
            return f"holdout:{self.kind[1]}"
        return f"kfold:{self.kind[1]}:{self.kind[2]}"


def _default_names(n_classes: int) -> tuple[str, ...]:
    if n_classes == len(PHYSIONET_TASKS):
        return PHYSIONET_TASKS
    return tuple(str(c) for c in range(n_classes))


# ---------------------------------------------------------------------------
# I/O


def _parse_header(line: str) -> tuple[int, int, tuple[str, ...] | None]:
    fields = {}
    for part in line.strip().split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise MalformedHeaderError(f"header field {part!r} is not key=value")
        fields[key.strip()] = value.strip()
    try:
        n_channels = int(fields["channels"])
        n_classes = int(fields["classes"])
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(
            f"header must read 'channels=<N>,classes=<O>', got {line.strip()!r}"
        ) from exc
    if n_channels < 2 or n_classes < 1:
        raise MalformedHeaderError(f"invalid sizes in header {line.strip()!r}")
    names = None
    if "names" in fields:
        names = tuple(fields["names"].split(";"))
        if len(names) != n_classes:
            raise MalformedHeaderError(f"{len(names)} class names for {n_classes} classes")
    return n_channels, n_classes, names


def _load_csv(path: Path) -> SignalDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise MalformedHeaderError(f"{path}: empty file")
        n_channels, n_classes, names = _parse_header(header)
        rows, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != n_channels + 1:
                raise TruncatedPayloadError(
                    f"{path}:{lineno}: expected {n_channels + 1} fields, got {len(parts)}"
                )
            try:
                row = [float(p) for p in parts[:-1]]
                label = int(parts[-1])
            except ValueError as exc:
                raise MalformedHeaderError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in row):
                raise NonFiniteValueError(f"{path}:{lineno}: non-finite value")
            if not 0 <= label < n_classes:
                raise LabelOutOfRangeError(
                    f"{path}:{lineno}: label {label} outside [0, {n_classes})"
                )
            rows.append(row)
            labels.append(label)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), n_channels)
    return SignalDataset(values, np.array(labels, dtype=np.int64), names or _default_names(n_classes))


def _load_binary(path: Path) -> SignalDataset:
    blob = path.read_bytes()
    if len(blob) < _BIN_HEADER.size:
        raise TruncatedPayloadError(f"{path}: shorter than the {_BIN_HEADER.size}-byte header")
    magic, version, n_channels, n_classes, n_samples = _BIN_HEADER.unpack_from(blob)
    if magic != BINARY_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if n_channels < 2 or n_classes < 1 or n_classes > 256:
        raise MalformedHeaderError(f"{path}: invalid sizes channels={n_channels} classes={n_classes}")
    n_values = n_samples * n_channels
    expected = _BIN_HEADER.size + 4 * n_values + n_samples
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(blob)} bytes, expected {expected}")
    off = _BIN_HEADER.size
    values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=off)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n_samples, offset=off + 4 * n_values)
    values = values.astype(np.float64).reshape(n_samples, n_channels)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: non-finite value in payload")
    if n_samples and labels.max() >= n_classes:
        raise LabelOutOfRangeError(f"{path}: label {labels.max()} outside [0, {n_classes})")
    return SignalDataset(values, labels.astype(np.int64), _default_names(n_classes))


def _infer_format(path: Path) -> str:
    with open(path, "rb") as fh:
        return "binary" if fh.read(4) == BINARY_MAGIC else "csv"


def load_dataset(path, format: Literal["csv", "binary", "auto"] = "auto") -> SignalDataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if format == "auto":
        format = _infer_format(path)
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(dataset: SignalDataset, path, format: Literal["csv", "binary"] = "csv") -> None:
    """Write atomically (temp file, then rename).

    The binary format stores float32, so values not representable in 32 bits
    are rounded.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if format == "csv":
        header = f"channels={dataset.n_channels},classes={dataset.n_classes}"
        if dataset.class_names != _default_names(dataset.n_classes):
            header += ",names=" + ";".join(dataset.class_names)
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row, label in zip(dataset.values.tolist(), dataset.labels.tolist()):
                fh.write(",".join(repr(v) for v in row) + f",{label}\n")
    elif format == "binary":
        if dataset.n_classes > 256:
            raise DataError("binary format holds at most 256 classes")
        with open(tmp, "wb") as fh:
            fh.write(
                _BIN_HEADER.pack(
                    BINARY_MAGIC, BINARY_VERSION, dataset.n_channels, dataset.n_classes, dataset.n_samples
                )
            )
            fh.write(dataset.values.astype("<f4").tobytes())
            fh.write(dataset.labels.astype(np.uint8).tobytes())
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic data


def ring_patterns(n_channels: int, n_classes: int, width: float | None = None) -> np.ndarray:
    """One smooth pattern per class over a ring of electrodes.

    Class ``c`` is a von Mises bump centred at angle ``2*pi*c/n_classes``;
    ``width`` is the bump's angular scale (default: a quarter of the class
    spacing). Rows are scaled to unit RMS over channels.
    """
    angle = 2.0 * np.pi * np.arange(n_channels) / n_channels
    centre = 2.0 * np.pi * np.arange(n_classes) / n_classes
    if width is None:
        width = np.pi / n_classes
    pats = np.exp((np.cos(angle[None, :] - centre[:, None]) - 1.0) / width**2)
    rms = np.sqrt(np.mean(pats**2, axis=1, keepdims=True))
    return pats / rms


def make_synthetic(
    n_channels: int,
    n_per_class: int,
    n_classes: int,
    seed: int,
    separation: float,
    pattern_scale: float = 0.5,
) -> SignalDataset:
    """Gaussian classes around ring patterns: ``separation * scale * pattern_c + N(0, 1)``."""
    if n_channels < 2:
        raise ValueError("n_channels must be >= 2")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    means = separation * pattern_scale * ring_patterns(n_channels, n_classes)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((labels.size, n_channels))
    values = means[labels] + noise
    return SignalDataset(values, labels, _default_names(n_classes))


# ---------------------------------------------------------------------------
# splits


def parse_split_kind(text: str) -> tuple:
    """``holdout[:frac]`` or ``kfold:k:fold_id`` to a kind tuple."""
    parts = text.strip().split(":")
    try:
        if parts[0] == "holdout" and len(parts) <= 2:
            frac = float(parts[1]) if len(parts) == 2 else 0.9
            if not 0.0 < frac < 1.0:
                raise ValueError
            return ("holdout", frac)
        if parts[0] == "kfold" and len(parts) == 3:
            k, fold = int(parts[1]), int(parts[2])
            if k < 2 or not 0 <= fold < k:
                raise ValueError
            return ("kfold", k, fold)
    except ValueError:
        pass
    raise ValueError(f"bad split spec {text!r}; expected holdout:<frac> or kfold:<k>:<fold>")


def split(dataset: SignalDataset | int, kind: tuple | str = ("holdout", 0.9), seed: int = 0) -> SplitPlan:
    """Seeded uniform shuffle, then a holdout cut or k contiguous folds.

    Not stratified by class.
    """
    n = dataset if isinstance(dataset, int) else dataset.n_samples
    if isinstance(kind, str):
        kind = parse_split_kind(kind)
    order = np.random.default_rng(seed).permutation(n)
    if kind[0] == "holdout":
        n_train = int(math.floor(kind[1] * n))
        train, test = order[:n_train], order[n_train:]
    elif kind[0] == "kfold":
        k, fold = kind[1], kind[2]
        if k > n:
            raise ValueError(f"k={k} exceeds the {n} available samples")
        if not 0 <= fold < k:
            raise ValueError(f"fold id {fold} outside [0, {k})")
        blocks = np.array_split(order, k)
        test = blocks[fold]
        train = np.concatenate([b for i, b in enumerate(blocks) if i != fold])
    else:
        raise ValueError(f"unknown split kind {kind!r}")
    return SplitPlan(np.sort(train), np.sort(test), seed, tuple(kind))


def zscore_stats(values: np.ndarray, indices: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over ``indices`` (all rows if None); zero std maps to 1."""
    rows = values if indices is None else values[np.asarray(indices)]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std
