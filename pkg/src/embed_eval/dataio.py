"""Feature/label file I/O, class-disjoint splits and per-class subsampling.

Feature matrices are plain 2-D ``float64`` numpy arrays (one row per
sample). On disk they are stored as 32-bit floats, either in the EMB1
binary layout or as numeric CSV::

    bytes 0-3   b"EMB1"
    bytes 4-7   n_rows  (uint32, little-endian)
    bytes 8-11  n_dims  (uint32, little-endian)
    bytes 12-   n_rows * n_dims float32 little-endian values, row-major

Random subsampling uses numpy's PCG64 generator (``np.random.default_rng``),
which produces the same stream on every platform for a given seed.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

EMB1_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
_STORED = np.dtype("<f4")


def as_feature_matrix(values, name="features"):
    """Validate and convert ``values`` to a finite 2-D float64 array."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DataFormatError(f"{name}: expected a 2-D matrix, got {m.ndim}-D")
    if m.shape[0] < 1:
        raise DataFormatError(f"{name}: n_rows must be >= 1")
    if m.shape[1] < 1:
        raise DataFormatError(f"{name}: n_dims must be >= 1")
    bad = np.argwhere(~np.isfinite(m))
    if len(bad):
        r, c = bad[0]
        raise DataFormatError(f"{name}: non-finite value at row {r}, column {c}")
    return m


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("binary", "csv"):
            raise ConfigError(f"unknown feature format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"


def load_features(path, format: str | None = None) -> np.ndarray:
    """Read an EMB1 or CSV feature file into a float64 matrix.

    ``format`` is ``"binary"`` or ``"csv"``; when omitted it is inferred from
    the file extension (``.csv``/``.txt`` mean CSV, anything else EMB1).
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "csv":
        return _load_csv(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated EMB1 header ({len(raw)} bytes)")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != EMB1_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {EMB1_MAGIC!r}")
    if n < 1:
        raise DataFormatError(f"{path}: n_rows must be >= 1")
    if d < 1:
        raise DataFormatError(f"{path}: n_dims must be >= 1")
    expected = _HEADER.size + n * d * _STORED.itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: shape mismatch, header says {n}x{d} "
            f"({expected} bytes) but file has {len(raw)} bytes"
        )
    values = np.frombuffer(raw, dtype=_STORED, offset=_HEADER.size).reshape(n, d)
    return as_feature_matrix(values.astype(np.float64), name=str(path))


def _load_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r, record in enumerate(csv.reader(fh)):
            if not record or all(not cell.strip() for cell in record):
                continue
            try:
                rows.append([float(cell) for cell in record])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {r}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataFormatError(
                    f"{path}: row {r} has {len(rows[-1])} columns, expected {len(rows[0])}"
                )
    if not rows:
        raise DataFormatError(f"{path}: n_rows must be >= 1")
    # round through float32 so CSV and EMB1 hold the same stored precision
    m = np.asarray(rows, dtype=np.float64)
    return as_feature_matrix(m.astype(_STORED).astype(np.float64), name=str(path))


def save_features(matrix, path, format: str | None = None) -> None:
    """Write ``matrix`` as EMB1 (default) or CSV, at float32 precision."""
    m = as_feature_matrix(matrix)
    path = Path(path)
    fmt = _infer_format(path, format)
    stored = m.astype(_STORED)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in stored:
                # repr of the float32 value widened to float64 round-trips exactly
                writer.writerow([repr(float(v)) for v in row])
        return
    n, d = stored.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB1_MAGIC, n, d))
        fh.write(np.ascontiguousarray(stored).tobytes())


def load_labels(path) -> tuple[np.ndarray, list[str]]:
    """Read an ``index,label`` CSV; returns (labels ordered by index, ids)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index", "label"]:
            raise DataFormatError(f"{path}: header must be exactly 'index,label'")
        by_index: dict[int, int] = {}
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != 2:
                raise DataFormatError(f"{path}: line {lineno}: expected 2 fields")
            try:
                idx, lab = int(record[0]), int(record[1])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-integer field") from None
            if idx < 0:
                raise DataFormatError(f"{path}: line {lineno}: negative index {idx}")
            if lab < 0:
                raise DataFormatError(f"{path}: line {lineno}: negative label {lab}")
            if idx in by_index:
                raise DataFormatError(f"{path}: line {lineno}: duplicate index {idx}")
            by_index[idx] = lab
    n = len(by_index)
    if n == 0:
        raise DataFormatError(f"{path}: no label rows")
    missing = sorted(set(range(n)) - by_index.keys())
    if missing:
        raise DataFormatError(
            f"{path}: indices must be contiguous 0..{n - 1}; missing index {missing[0]}"
        )
    labels = np.array([by_index[i] for i in range(n)], dtype=np.int64)
    return labels, [str(i) for i in range(n)]


def save_labels(labels, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        for i, lab in enumerate(np.asarray(labels, dtype=np.int64)):
            writer.writerow([i, int(lab)])


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        feats = as_feature_matrix(self.features)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or len(labels) != feats.shape[0]:
            raise DataFormatError(
                f"labels length {labels.size} does not match {feats.shape[0]} feature rows"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DataFormatError("labels must be integers")
        labels = labels.astype(np.int64)
        if np.any(labels < 0):
            raise DataFormatError("class ids must be non-negative")
        ids = self.ids if self.ids is not None else [str(i) for i in range(len(labels))]
        if len(ids) != len(labels):
            raise DataFormatError("ids length does not match labels")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", list(ids))

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def take(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(
            self.features[rows], self.labels[rows], [self.ids[i] for i in rows]
        )


def load_dataset(features_path, labels_path, format: str | None = None) -> LabeledDataset:
    feats = load_features(features_path, format)
    labels, ids = load_labels(labels_path)
    if len(labels) != feats.shape[0]:
        raise DataFormatError(
            f"{labels_path}: {len(labels)} labels for {feats.shape[0]} feature rows"
        )
    return LabeledDataset(feats, labels, ids)


@dataclass(frozen=True)
class SplitSpec:
    """How classes are assigned to the train and test sides.

    ``rule="first-half"`` sorts class ids ascending and sends the first
    ceil(C/2) to train. ``rule="explicit"`` uses the given class lists,
    which must be disjoint and together cover every class in the dataset.
    ``seed`` is carried for subsampling; the class split itself is not random.
    """

    rule: str = "first-half"
    train_classes: tuple[int, ...] | None = None
    test_classes: tuple[int, ...] | None = None
    seed: int = 0


def class_disjoint_split(ds: LabeledDataset, spec: SplitSpec = SplitSpec()):
    classes = ds.classes
    if len(classes) < 2:
        raise ConfigError(f"class-disjoint split needs >= 2 classes, got {len(classes)}")
    if spec.rule == "first-half":
        cut = math.ceil(len(classes) / 2)
        train_cls, test_cls = set(classes[:cut].tolist()), set(classes[cut:].tolist())
    elif spec.rule == "explicit":
        if spec.train_classes is None or spec.test_classes is None:
            raise ConfigError("explicit split needs train_classes and test_classes")
        train_cls, test_cls = set(spec.train_classes), set(spec.test_classes)
        if train_cls & test_cls:
            raise ConfigError(
                f"train and test classes overlap: {sorted(train_cls & test_cls)}"
            )
        uncovered = set(classes.tolist()) - train_cls - test_cls
        if uncovered:
            raise ConfigError(f"classes not assigned to either split: {sorted(uncovered)}")
    else:
        raise ConfigError(f"unknown split rule {spec.rule!r}")
    in_train = np.isin(ds.labels, list(train_cls))
    return ds.take(np.flatnonzero(in_train)), ds.take(np.flatnonzero(~in_train))


def per_class_count(m: int, fraction: float) -> int:
    # round half up; python's round() is banker's rounding
    return max(1, int(math.floor(fraction * m + 0.5)))


def subsample_per_class(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Keep ``max(1, round(fraction * m))`` random rows of each class.

    Rows are drawn without replacement; the kept rows stay in their original
    order. ``fraction=1.0`` returns every row.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in ds.classes:
        rows = np.flatnonzero(ds.labels == c)
        n_keep = per_class_count(len(rows), fraction)
        if n_keep >= len(rows):
            keep.append(rows)
        else:
            keep.append(rows[rng.choice(len(rows), size=n_keep, replace=False)])
    return ds.take(np.sort(np.concatenate(keep)))
