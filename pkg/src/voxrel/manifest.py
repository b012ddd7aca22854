"""Cohort manifest: subjects, covariates, volume paths, named masks.

The manifest is a JSON document saved next to the volume files it
references; all paths inside it are relative to its own directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DimMismatchError,
    DuplicateSubjectError,
    ManifestSchemaError,
    MissingInputError,
)
from .volume import BinaryMask, Volume3D, read_mask, read_volume, read_volume_dims

LABELS = ("NC", "MCI", "AD")
GENDERS = ("M", "F")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    label: str
    age: float
    gender: str
    tiv: float
    field_strength: float
    volume_path: str
    mmse: int | None = None

    def covariate_row(self) -> list[float]:
        """Design-matrix row: intercept, age, gender (M=0, F=1), TIV, field strength."""
        return [
            1.0,
            float(self.age),
            0.0 if self.gender == "M" else 1.0,
            float(self.tiv),
            float(self.field_strength),
        ]


COVARIATE_NAMES = ("intercept", "age", "gender", "tiv", "field_strength")


@dataclass
class DatasetManifest:
    dims: tuple[int, int, int]
    subjects: list[SubjectRecord]
    masks: dict[str, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    root: Path = Path(".")

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise MissingInputError(f"unknown subject id: {subject_id}")

    def load_volume(self, subject_id: str) -> Volume3D:
        rec = self.subject(subject_id)
        return read_volume(self.root / rec.volume_path)

    def load_mask(self, name: str) -> BinaryMask:
        if name not in self.masks:
            raise MissingInputError(f"unknown mask: {name}")
        return read_mask(self.root / self.masks[name])


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ManifestSchemaError(msg)


def _parse_subject(entry: dict, idx: int) -> SubjectRecord:
    _require(isinstance(entry, dict), f"subjects[{idx}] is not an object")
    required = {"id", "label", "age", "gender", "tiv", "field_strength", "volume_path"}
    allowed = required | {"mmse"}
    keys = set(entry)
    _require(required <= keys, f"subjects[{idx}] missing {sorted(required - keys)}")
    _require(keys <= allowed, f"subjects[{idx}] has unknown keys {sorted(keys - allowed)}")
    _require(isinstance(entry["id"], str) and entry["id"], f"subjects[{idx}]: bad id")
    _require(entry["label"] in LABELS, f"subjects[{idx}]: label must be one of {LABELS}")
    _require(entry["gender"] in GENDERS, f"subjects[{idx}]: gender must be one of {GENDERS}")
    for k in ("age", "tiv", "field_strength"):
        _require(isinstance(entry[k], (int, float)) and entry[k] > 0, f"subjects[{idx}]: {k} must be positive")
    mmse = entry.get("mmse")
    _require(mmse is None or isinstance(mmse, int), f"subjects[{idx}]: mmse must be an integer")
    return SubjectRecord(
        id=entry["id"],
        label=entry["label"],
        age=float(entry["age"]),
        gender=entry["gender"],
        tiv=float(entry["tiv"]),
        field_strength=float(entry["field_strength"]),
        volume_path=str(entry["volume_path"]),
        mmse=mmse,
    )


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest.

    With check_files (the default) every referenced volume/mask must exist
    and share the manifest dims; only headers are read.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestSchemaError(f"{path}: not valid JSON ({e})") from e
    _require(isinstance(doc, dict), "manifest root must be an object")
    allowed = {"dims", "subjects", "masks", "provenance"}
    _require(set(doc) <= allowed, f"manifest has unknown keys {sorted(set(doc) - allowed)}")
    _require("dims" in doc and "subjects" in doc, "manifest requires 'dims' and 'subjects'")
    dims = doc["dims"]
    _require(
        isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims),
        "dims must be three positive integers",
    )
    _require(isinstance(doc["subjects"], list) and doc["subjects"], "subjects must be a non-empty list")

    subjects = [_parse_subject(e, i) for i, e in enumerate(doc["subjects"])]
    seen: set[str] = set()
    for s in subjects:
        if s.id in seen:
            raise DuplicateSubjectError(f"duplicate subject id: {s.id}")
        seen.add(s.id)

    masks = doc.get("masks", {})
    _require(
        isinstance(masks, dict) and all(isinstance(k, str) and isinstance(v, str) for k, v in masks.items()),
        "masks must map names to paths",
    )

    man = DatasetManifest(
        dims=tuple(dims),
        subjects=subjects,
        masks=dict(masks),
        provenance=doc.get("provenance", {}),
        root=path.parent,
    )
    if check_files:
        for s in subjects:
            got = read_volume_dims(man.root / s.volume_path)
            if got != man.dims:
                raise DimMismatchError(f"subject {s.id}: volume dims {got} != manifest dims {man.dims}")
        for name, rel in man.masks.items():
            got = read_volume_dims(man.root / rel)
            if got != man.dims:
                raise DimMismatchError(f"mask {name}: dims {got} != manifest dims {man.dims}")
    return man


def save_manifest(man: DatasetManifest, path: str | Path) -> None:
    doc = {
        "dims": list(man.dims),
        "subjects": [
            {k: v for k, v in {
                "id": s.id,
                "label": s.label,
                "age": s.age,
                "gender": s.gender,
                "tiv": s.tiv,
                "field_strength": s.field_strength,
                "mmse": s.mmse,
                "volume_path": s.volume_path,
            }.items() if v is not None}
            for s in man.subjects
        ],
        "masks": man.masks,
        "provenance": man.provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
