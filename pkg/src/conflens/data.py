"""Domain containers: label sets, probability/label maps, dataset manifest,
and classifier-output preprocessing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import segt
from .errors import DataError

SPLIT_ESTIMATION = "estimation"
SPLIT_EVALUATION = "evaluation"
SPLITS = (SPLIT_ESTIMATION, SPLIT_EVALUATION)

DEFAULT_SUM_TOL = 1e-4


def _frozen_array(values, dtype):
    arr = np.asarray(values, dtype=dtype)
    if not arr.flags.owndata:
        arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabelSet:
    """The label universe: |L| classes, optional display names, optional
    void (ignore) id that must lie outside [0, size)."""

    size: int
    names: tuple[str, ...] | None = None
    void_id: int | None = None

    def __post_init__(self):
        if self.size < 2:
            raise DataError(f"label set needs >= 2 classes, got {self.size}")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
            if len(self.names) != self.size:
                raise DataError(
                    f"{len(self.names)} names for {self.size} classes"
                )
        if self.void_id is not None and 0 <= self.void_id < self.size:
            raise DataError(f"void_id {self.void_id} collides with class ids")

    @property
    def void_sentinel(self) -> int:
        """void_id if set, else a value no valid label map contains."""
        return self.void_id if self.void_id is not None else -1


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel distributions over labels, H x W x |L| float32."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values, np.float32)
        if arr.ndim != 3 or any(d < 1 for d in arr.shape):
            raise DataError(f"probability map must be HxWxC, got {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer labels, H x W."""

    labels: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.labels, np.int32)
        if arr.ndim != 2 or any(d < 1 for d in arr.shape):
            raise DataError(f"label map must be HxW, got {arr.shape}")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    probs_path: Path
    gt_path: Path
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class Manifest:
    """Dataset index: the label set plus per-image tensor paths and split
    tags. Paths are stored resolved."""

    label_set: LabelSet
    records: tuple[ManifestRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image ids in manifest")

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]


def validate_probability_map(probs: ProbabilityMap, tol: float) -> list[tuple[tuple[int, int], float]]:
    """All sites whose channel sum deviates from 1 by more than tol, as
    ((row, col), deviation) in row-major order. Empty list means valid."""
    if tol <= 0:
        raise DataError(f"tolerance must be positive, got {tol}")
    sums = probs.values.astype(np.float64).sum(axis=2)
    dev = np.abs(sums - 1.0)
    bad = np.argwhere(dev > tol)
    return [((int(i), int(j)), float(dev[i, j])) for i, j in bad]


def strip_class_and_renormalize(probs: ProbabilityMap, class_id: int) -> ProbabilityMap:
    """Drop one channel and rescale the remainder to sum to 1 per pixel.

    Pixels left with no mass (<= 1e-12) become uniform over the surviving
    channels.
    """
    n = probs.channels
    if n < 3:
        raise DataError(f"need >= 3 channels to strip one, got {n}")
    if not 0 <= class_id < n:
        raise DataError(f"class_id {class_id} outside [0, {n})")
    kept = np.delete(probs.values.astype(np.float64), class_id, axis=2)
    sums = kept.sum(axis=2, keepdims=True)
    degenerate = sums <= 1e-12
    uniform = 1.0 / (n - 1)
    out = np.where(degenerate, uniform, kept / np.where(degenerate, 1.0, sums))
    return ProbabilityMap(out.astype(np.float32))


# ---------------------------------------------------------------------------
# tensor-file wrappers
# ---------------------------------------------------------------------------

def save_probability_map(probs: ProbabilityMap, path: str | Path) -> None:
    segt.store_tensor(path, probs.values)


def load_probability_map(
    path: str | Path,
    labels: LabelSet | None = None,
    tol: float = DEFAULT_SUM_TOL,
) -> ProbabilityMap:
    """Load and validate a probability map: dtype/rank, value range, channel
    count when `labels` is given, and per-pixel sums at `tol`."""
    arr = segt.load_tensor(path)
    if arr.dtype != np.float32 or arr.ndim != 3:
        raise DataError(f"{path}: expected 3-d float32 tensor")
    if labels is not None and arr.shape[2] != labels.size:
        raise DataError(
            f"{path}: {arr.shape[2]} channels, label set has {labels.size}"
        )
    if float(arr.min()) < 0.0 or float(arr.max()) > 1.0 + 1e-6:
        raise DataError(f"{path}: values outside [0, 1]")
    probs = ProbabilityMap(arr)
    bad = validate_probability_map(probs, tol)
    if bad:
        (i, j), dev = bad[0]
        raise DataError(
            f"{path}: {len(bad)} sites fail sum check at tol {tol}, "
            f"first ({i},{j}) deviates by {dev:.2e}"
        )
    return probs


def save_label_map(label_map: LabelMap, path: str | Path) -> None:
    arr = label_map.labels
    if arr.min() < 0 or arr.max() > 0xFFFF:
        raise DataError("label map values outside u16 range")
    segt.store_tensor(path, arr.astype(np.uint16))


def load_label_map(path: str | Path, labels: LabelSet | None = None) -> LabelMap:
    arr = segt.load_tensor(path)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise DataError(f"{path}: expected 2-d uint16 tensor")
    out = arr.astype(np.int32)
    if labels is not None:
        valid = (out >= 0) & (out < labels.size)
        if labels.void_id is not None:
            valid |= out == labels.void_id
        if not valid.all():
            bad = out[~valid].flat[0]
            raise DataError(f"{path}: label {bad} outside the label set")
    return LabelMap(out)


# ---------------------------------------------------------------------------
# manifest JSON
# ---------------------------------------------------------------------------

def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write the manifest with tensor paths relative to its directory."""
    path = Path(path)
    base = path.resolve().parent
    obj = {
        "labels": {
            "size": manifest.label_set.size,
            "names": list(manifest.label_set.names) if manifest.label_set.names else None,
            "void_id": manifest.label_set.void_id,
        },
        "records": [
            {
                "id": r.image_id,
                "probs": _relativize(r.probs_path, base),
                "gt": _relativize(r.gt_path, base),
                "split": r.split,
            }
            for r in manifest.records
        ],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _relativize(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base).as_posix()
    except ValueError:
        return Path(p).resolve().as_posix()


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Parse a manifest; with check_files, every record's tensor headers are
    read and must agree on height/width with probs channels == |L|."""
    path = Path(path)
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        labels = LabelSet(
            size=int(obj["labels"]["size"]),
            names=tuple(obj["labels"]["names"]) if obj["labels"].get("names") else None,
            void_id=obj["labels"].get("void_id"),
        )
        base = path.resolve().parent
        records = tuple(
            ManifestRecord(
                image_id=str(r["id"]),
                probs_path=base / r["probs"],
                gt_path=base / r["gt"],
                split=str(r["split"]),
            )
            for r in obj["records"]
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from exc
    manifest = Manifest(label_set=labels, records=records)
    if check_files:
        _check_record_files(manifest)
    return manifest


def _check_record_files(manifest: Manifest) -> None:
    for rec in manifest.records:
        p_dtype, p_dims = segt.read_header(rec.probs_path)
        g_dtype, g_dims = segt.read_header(rec.gt_path)
        if len(p_dims) != 3 or p_dtype != np.float32:
            raise DataError(f"{rec.probs_path}: expected 3-d float32 tensor")
        if len(g_dims) != 2 or g_dtype != np.uint16:
            raise DataError(f"{rec.gt_path}: expected 2-d uint16 tensor")
        if p_dims[:2] != g_dims:
            raise DataError(
                f"{rec.image_id}: probs {p_dims[:2]} and gt {g_dims} disagree"
            )
        if p_dims[2] != manifest.label_set.size:
            raise DataError(
                f"{rec.image_id}: {p_dims[2]} channels, label set has "
                f"{manifest.label_set.size}"
            )
