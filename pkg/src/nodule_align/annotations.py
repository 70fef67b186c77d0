"""Annotation ingest, class derivation, attribute weighting, and fold splitting."""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

ATTRIBUTE_NAMES = (
    "subtlety",
    "internal structure",
    "calcification",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
)
NUM_ATTRIBUTES = len(ATTRIBUTE_NAMES)

# calcification is rated 1-6, all other attributes 1-5
ATTRIBUTE_RANGES = tuple(
    (1.0, 6.0) if name == "calcification" else (1.0, 5.0) for name in ATTRIBUTE_NAMES
)

CSV_COLUMNS = [
    "nodule_id",
    "patient_id",
    "volume_path",
    "center_z",
    "center_y",
    "center_x",
    "equiv_diameter_mm",
    "malignancy",
    "subtlety",
    "internal_structure",
    "calcification",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
]

VARIANTS = ("LIDC-A", "LIDC-B", "LIDC-C")
NUM_FOLDS = 5


class AnnotationError(ValueError):
    """Raised when an annotation record or table violates the schema."""


class SplitError(ValueError):
    """Raised when a dataset split cannot satisfy its invariants."""


class ClassLabel(IntEnum):
    BENIGN = 0
    UNSURE = 1
    MALIGNANT = 2


CLASS_NAMES = {
    ClassLabel.BENIGN: "benign",
    ClassLabel.UNSURE: "unsure",
    ClassLabel.MALIGNANT: "malignant",
}


def derive_class(score: float, *, record_name: str = "<score>") -> ClassLabel:
    """Map an averaged malignancy score in [1, 5] to a class label.

    Boundary scores 2.5 and 3.5 are treated as unsure (inclusive).
    """
    if not math.isfinite(score) or not 1.0 <= score <= 5.0:
        raise AnnotationError(
            f"{record_name}: malignancy score {score!r} outside [1, 5]"
        )
    if score < 2.5:
        return ClassLabel.BENIGN
    if score <= 3.5:
        return ClassLabel.UNSURE
    return ClassLabel.MALIGNANT


def attribute_weights(values, *, record_name: str = "<values>") -> list[float]:
    """Softmax-normalize the eight annotated attribute values into a simplex vector."""
    values = list(values)
    if len(values) != NUM_ATTRIBUTES:
        raise AnnotationError(
            f"{record_name}: expected {NUM_ATTRIBUTES} attribute values, got {len(values)}"
        )
    for name, v, (lo, hi) in zip(ATTRIBUTE_NAMES, values, ATTRIBUTE_RANGES):
        if not math.isfinite(v) or not lo <= v <= hi:
            raise AnnotationError(
                f"{record_name}: attribute {name!r} value {v!r} outside [{lo}, {hi}]"
            )
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


@dataclass(frozen=True)
class NoduleRecord:
    """One annotated nodule."""

    nodule_id: str
    patient_id: str
    volume_path: str
    center_voxel: tuple[int, int, int]  # (z, y, x)
    equiv_diameter_mm: float
    malignancy_score: float
    attribute_values: tuple[float, ...]

    def __post_init__(self):
        if self.equiv_diameter_mm <= 0:
            raise AnnotationError(
                f"{self.nodule_id}: equiv_diameter_mm must be positive, "
                f"got {self.equiv_diameter_mm}"
            )
        derive_class(self.malignancy_score, record_name=self.nodule_id)
        attribute_weights(self.attribute_values, record_name=self.nodule_id)

    @property
    def class_label(self) -> ClassLabel:
        return derive_class(self.malignancy_score, record_name=self.nodule_id)

    @property
    def weights(self) -> list[float]:
        return attribute_weights(self.attribute_values, record_name=self.nodule_id)


@dataclass
class DatasetSplit:
    variant: str
    fold_index: int
    seed: int
    train: list[NoduleRecord]
    test: list[NoduleRecord]

    @property
    def num_classes(self) -> int:
        return 2 if self.variant == "LIDC-C" else 3

    def label_of(self, record: NoduleRecord) -> int:
        """Training-target index for a record under this variant."""
        label = record.class_label
        if self.variant == "LIDC-C":
            # unsure never appears; remap benign=0, malignant=1
            if label == ClassLabel.UNSURE:
                raise SplitError(f"{record.nodule_id}: unsure record in LIDC-C split")
            return 0 if label == ClassLabel.BENIGN else 1
        return int(label)


def load_annotation_table(path) -> list[NoduleRecord]:
    """Parse the CSV annotation table with strict schema validation."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise AnnotationError(
                f"{path}: bad header, expected {CSV_COLUMNS}, got {reader.fieldnames}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            name = row.get("nodule_id") or f"{path}:{lineno}"
            missing = [c for c in CSV_COLUMNS if not (row.get(c) or "").strip()]
            if missing:
                raise AnnotationError(f"{name}: missing values for {missing}")
            try:
                center = (
                    int(row["center_z"]),
                    int(row["center_y"]),
                    int(row["center_x"]),
                )
                attrs = tuple(
                    float(row[c])
                    for c in CSV_COLUMNS[8:]
                )
                record = NoduleRecord(
                    nodule_id=row["nodule_id"],
                    patient_id=row["patient_id"],
                    volume_path=row["volume_path"],
                    center_voxel=center,
                    equiv_diameter_mm=float(row["equiv_diameter_mm"]),
                    malignancy_score=float(row["malignancy"]),
                    attribute_values=attrs,
                )
            except ValueError as exc:
                if isinstance(exc, AnnotationError):
                    raise
                raise AnnotationError(f"{name}: {exc}") from exc
            records.append(record)
    if not records:
        raise AnnotationError(f"{path}: annotation table is empty")
    return records


def _fold_patients(records: list[NoduleRecord], seed: int) -> list[set[str]]:
    patients = sorted({r.patient_id for r in records})
    rng = random.Random(seed)
    rng.shuffle(patients)
    folds: list[set[str]] = [set() for _ in range(NUM_FOLDS)]
    for i, pid in enumerate(patients):
        folds[i % NUM_FOLDS].add(pid)
    return folds


def build_split(
    records: list[NoduleRecord], variant: str, fold_index: int, seed: int
) -> DatasetSplit:
    """Patient-disjoint fold split for one dataset variant.

    LIDC-A keeps all three classes in train and test; LIDC-B drops unsure from
    the test set only; LIDC-C drops unsure everywhere.
    """
    if variant not in VARIANTS:
        raise SplitError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if not records:
        raise SplitError("no records to split")
    if not 0 <= fold_index < NUM_FOLDS:
        raise SplitError(f"fold_index {fold_index} outside 0..{NUM_FOLDS - 1}")

    test_patients = _fold_patients(records, seed)[fold_index]
    train = [r for r in records if r.patient_id not in test_patients]
    test = [r for r in records if r.patient_id in test_patients]

    if variant == "LIDC-B":
        test = [r for r in test if r.class_label != ClassLabel.UNSURE]
    elif variant == "LIDC-C":
        train = [r for r in train if r.class_label != ClassLabel.UNSURE]
        test = [r for r in test if r.class_label != ClassLabel.UNSURE]

    split = DatasetSplit(variant=variant, fold_index=fold_index, seed=seed,
                         train=train, test=test)
    present = {split.label_of(r) for r in train}
    needed = set(range(split.num_classes))
    if present != needed:
        missing = sorted(needed - present)
        raise SplitError(
            f"variant {variant} fold {fold_index}: classes {missing} absent from train set"
        )
    return split


def save_split_manifest(split: DatasetSplit, path) -> None:
    payload = {
        "variant": split.variant,
        "fold_index": split.fold_index,
        "seed": split.seed,
        "train": [r.nodule_id for r in split.train],
        "test": [r.nodule_id for r in split.test],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_split_manifest(path, records: list[NoduleRecord]) -> DatasetSplit:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    by_id = {r.nodule_id: r for r in records}
    try:
        train = [by_id[i] for i in payload["train"]]
        test = [by_id[i] for i in payload["test"]]
    except KeyError as exc:
        raise SplitError(f"{path}: manifest references unknown nodule {exc}") from exc
    return DatasetSplit(
        variant=payload["variant"],
        fold_index=int(payload["fold_index"]),
        seed=int(payload["seed"]),
        train=train,
        test=test,
    )
