"""Dataset manifests: sample records, class lists, and JSONL round-tripping.

A manifest is a JSON Lines file. The first line is a header object carrying
the ordered foreground class list; every following line is one sample record.
Records are immutable once constructed and validated, so they are safe to
share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPLIT_IN_DIST = "in_dist"
SPLIT_OOD_CANDIDATE = "ood_candidate"
SPLIT_OOD_HARD = "ood_hard"
SPLITS = (SPLIT_IN_DIST, SPLIT_OOD_CANDIDATE, SPLIT_OOD_HARD)


class ManifestError(Exception):
    """Base class for manifest loading/validation failures."""


class ManifestParseError(ManifestError):
    """A line is not valid JSON or lacks required fields."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ManifestSchemaError(ManifestError):
    """A record violates the schema (label length, split value, ...)."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ManifestIntegrityError(ManifestError):
    """Cross-record constraint violated (duplicate ids, unknown references)."""


@dataclass(frozen=True)
class ClassList:
    """Ordered list of foreground class names."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ManifestSchemaError("class list must not be empty")
        if len(set(self.names)) != len(self.names):
            raise ManifestSchemaError("class names must be unique")
        if any(not n for n in self.names):
            raise ManifestSchemaError("class names must be non-empty strings")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class SampleRecord:
    """One image: multi-hot labels over the class list plus provenance."""

    id: str
    path: str
    labels: tuple[int, ...]
    split: str
    gt_mask_path: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ManifestSchemaError("record id must be non-empty")
        if self.split not in SPLITS:
            raise ManifestSchemaError(
                f"record {self.id!r}: unknown split {self.split!r}"
            )
        if any(v not in (0, 1) for v in self.labels):
            raise ManifestSchemaError(
                f"record {self.id!r}: labels must be 0/1, got {self.labels}"
            )
        if self.split == SPLIT_IN_DIST and not any(self.labels):
            raise ManifestSchemaError(
                f"record {self.id!r}: in_dist records need at least one positive label"
            )
        if self.split != SPLIT_IN_DIST and any(self.labels):
            raise ManifestSchemaError(
                f"record {self.id!r}: {self.split} records must carry all-zero labels"
            )

    def positive_classes(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.labels) if v)


@dataclass(frozen=True)
class Manifest:
    """A class list plus the sample records labeled against it."""

    classes: ClassList
    records: tuple[SampleRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        n = len(self.classes)
        seen: set[str] = set()
        for rec in self.records:
            if len(rec.labels) != n:
                raise ManifestSchemaError(
                    f"record {rec.id!r}: expected {n} labels, got {len(rec.labels)}"
                )
            if rec.id in seen:
                raise ManifestIntegrityError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)

    def by_split(self, split: str) -> tuple[SampleRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def record(self, record_id: str) -> SampleRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise ManifestIntegrityError(f"no record with id {record_id!r}")


def _record_from_obj(obj: dict, n_classes: int, line: int) -> SampleRecord:
    for key in ("id", "labels", "split"):
        if key not in obj:
            raise ManifestParseError(f"record missing field {key!r}", line)
    labels = obj["labels"]
    if not isinstance(labels, list):
        raise ManifestParseError("labels must be a JSON array", line)
    if len(labels) != n_classes:
        raise ManifestSchemaError(
            f"expected {n_classes} labels, got {len(labels)}", line
        )
    try:
        return SampleRecord(
            id=str(obj["id"]),
            path=str(obj.get("path", "")),
            labels=tuple(int(v) for v in labels),
            split=str(obj["split"]),
            gt_mask_path=obj.get("gt_mask_path"),
        )
    except ManifestSchemaError as e:
        raise ManifestSchemaError(str(e), line) from None


def load_manifest(path: str | Path) -> Manifest:
    """Load and validate a JSONL manifest.

    Raises ManifestParseError/ManifestSchemaError with the offending line
    number, or ManifestIntegrityError for duplicate ids. Invalid records are
    never silently dropped.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestParseError("empty file, expected a header line", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestParseError(f"invalid JSON in header: {e.msg}", 1) from None
    if not isinstance(header, dict) or "classes" not in header:
        raise ManifestParseError("header must be an object with a 'classes' array", 1)
    classes = ClassList(tuple(str(c) for c in header["classes"]))

    records = []
    for i, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ManifestParseError(f"invalid JSON: {e.msg}", i) from None
        if not isinstance(obj, dict):
            raise ManifestParseError("record line must be a JSON object", i)
        records.append(_record_from_obj(obj, len(classes), i))
    return Manifest(classes=classes, records=tuple(records))


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest as JSONL; load_manifest(save_manifest(m)) == m.

    The manifest is re-validated before anything is written (constructing a
    Manifest already validates, but callers may hand us a hand-built one).
    """
    # Re-run the cross-record checks in case the dataclass was built via
    # object.__setattr__ tricks or stale references.
    Manifest(classes=manifest.classes, records=manifest.records)
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"classes": list(manifest.classes.names)}) + "\n")
        for rec in manifest.records:
            obj = {
                "id": rec.id,
                "path": rec.path,
                "labels": list(rec.labels),
                "split": rec.split,
            }
            if rec.gt_mask_path is not None:
                obj["gt_mask_path"] = rec.gt_mask_path
            fh.write(json.dumps(obj) + "\n")


def merge_records(
    manifest: Manifest, extra: Iterable[SampleRecord]
) -> Manifest:
    """Return a new manifest with `extra` appended (ids must stay unique)."""
    return Manifest(classes=manifest.classes, records=manifest.records + tuple(extra))
