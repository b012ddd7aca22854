"""Preprocessing: per-voxel covariate removal, fold splits, augmentation.

Residualization fits, per voxel, an ordinary least-squares model of
intensity on (intercept, age, gender, TIV, field strength) using control
(NC) subjects only, then subtracts the prediction from every subject. All
voxels share one 5x5 normal-equations factorization. Fitting runs in
float64; the persisted container rounds coefficients to float32 because it
reuses the volume format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    DimMismatchError,
    MissingInputError,
    RankDeficientError,
    ValidationError,
)
from .manifest import COVARIATE_NAMES, DatasetManifest, SubjectRecord
from .volume import Volume3D, read_volume, shift_volume, write_volume

_MIN_CONTROLS = 6
_MAX_CONDITION = 1e12


@dataclass
class ResidualModel:
    """Per-voxel OLS coefficients, one plane per covariate column."""

    betas: np.ndarray  # (5, nx, ny, nz) float64
    fit_subjects: list[str]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.betas.shape[1:])


def _collinear_columns(design: np.ndarray) -> list[str]:
    names = []
    for j in range(design.shape[1]):
        others = np.delete(design, j, axis=1)
        coef, *_ = np.linalg.lstsq(others, design[:, j], rcond=None)
        resid = design[:, j] - others @ coef
        scale = np.linalg.norm(design[:, j]) or 1.0
        if np.linalg.norm(resid) < 1e-8 * scale:
            names.append(COVARIATE_NAMES[j])
    return names or list(COVARIATE_NAMES)


def fit_residual_model(
    man: DatasetManifest,
    volumes: dict[str, Volume3D] | None = None,
    subject_ids: list[str] | None = None,
) -> ResidualModel:
    """Fit on the NC subjects among subject_ids (default: the whole cohort)."""
    pool = man.subjects if subject_ids is None else [man.subject(s) for s in subject_ids]
    controls = [s for s in pool if s.label == "NC"]
    if len(controls) < _MIN_CONTROLS:
        raise ValidationError(f"residualization needs >= {_MIN_CONTROLS} NC subjects, got {len(controls)}")
    design = np.array([s.covariate_row() for s in controls], dtype=np.float64)
    cond = np.linalg.cond(design)
    if not np.isfinite(cond) or cond > _MAX_CONDITION:
        cols = _collinear_columns(design)
        raise RankDeficientError(
            f"design matrix is rank deficient (condition {cond:.3g}); collinear columns: {', '.join(cols)}"
        )

    def _vol(s: SubjectRecord) -> Volume3D:
        if volumes is not None and s.id in volumes:
            return volumes[s.id]
        return man.load_volume(s.id)

    dims = man.dims
    y = np.empty((len(controls), int(np.prod(dims))), dtype=np.float64)
    for i, s in enumerate(controls):
        v = _vol(s)
        if v.dims != dims:
            raise DimMismatchError(f"subject {s.id}: volume dims {v.dims} != manifest dims {dims}")
        y[i] = v.values.reshape(-1)
    xtx = design.T @ design
    xty = design.T @ y
    betas = cho_solve(cho_factor(xtx), xty)
    return ResidualModel(
        betas=betas.reshape((len(COVARIATE_NAMES),) + dims),
        fit_subjects=[s.id for s in controls],
    )


def residualize(model: ResidualModel, subject: SubjectRecord, vol: Volume3D) -> Volume3D:
    """Subtract the covariate prediction; result keeps the volume dtype (float32)."""
    if vol.dims != model.dims:
        raise DimMismatchError(f"volume dims {vol.dims} != residual model dims {model.dims}")
    row = np.asarray(subject.covariate_row(), dtype=np.float64)
    pred = np.tensordot(row, model.betas, axes=([0], [0]))
    resid = vol.values.astype(np.float64) - pred
    return Volume3D(resid.astype(np.float32))


def save_residual_model(model: ResidualModel, path: str | Path) -> None:
    """Store the 5 coefficient planes stacked along z in one volume container,
    plus a JSON sidecar naming the plane order and fit population."""
    nx, ny, nz = model.dims
    stacked = np.concatenate([model.betas[i] for i in range(len(COVARIATE_NAMES))], axis=2)
    write_volume(Volume3D(stacked.astype(np.float32)), path)
    sidecar = {
        "kind": "residual-model",
        "dims": [nx, ny, nz],
        "plane_order": list(COVARIATE_NAMES),
        "fit_subjects": model.fit_subjects,
    }
    Path(path).with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_residual_model(path: str | Path) -> ResidualModel:
    sidecar_path = Path(path).with_suffix(".json")
    if not sidecar_path.exists():
        raise MissingInputError(f"residual model sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("plane_order") != list(COVARIATE_NAMES):
        raise ValidationError(f"{sidecar_path}: unexpected plane order")
    vol = read_volume(path)
    nx, ny, nz = sidecar["dims"]
    if vol.dims != (nx, ny, nz * len(COVARIATE_NAMES)):
        raise DimMismatchError(f"{path}: stacked dims {vol.dims} do not match sidecar dims {sidecar['dims']}")
    planes = [vol.values[:, :, i * nz : (i + 1) * nz].astype(np.float64) for i in range(len(COVARIATE_NAMES))]
    return ResidualModel(betas=np.stack(planes), fit_subjects=list(sidecar.get("fit_subjects", [])))


# ---------------------------------------------------------------------------
# stratified folds


@dataclass(frozen=True)
class FoldSplit:
    seed: int
    fold_count: int
    assignments: dict[str, int]  # subject id -> fold index

    def val_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return sorted(s for s, f in self.assignments.items() if f != fold)

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.fold_count:
            raise ValidationError(f"fold {fold} out of range 0..{self.fold_count - 1}")


def stratified_kfold(man: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Deal each class round-robin after a seeded shuffle, so per-fold class
    counts differ from exact proportion by at most one."""
    if k < 2:
        raise ValidationError("need at least 2 folds")
    by_label: dict[str, list[str]] = {}
    for s in man.subjects:
        by_label.setdefault(s.label, []).append(s.id)
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for label in sorted(by_label):
        ids = sorted(by_label[label])
        if len(ids) < k:
            raise ValidationError(f"class {label} has {len(ids)} members, fewer than {k} folds")
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            assignments[ids[idx]] = pos % k
    return FoldSplit(seed=seed, fold_count=k, assignments=assignments)


def save_split(split: FoldSplit, path: str | Path) -> None:
    doc = {"seed": split.seed, "fold_count": split.fold_count, "assignments": split.assignments}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_split(path: str | Path) -> FoldSplit:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"split file not found: {path}")
    doc = json.loads(path.read_text())
    try:
        split = FoldSplit(seed=int(doc["seed"]), fold_count=int(doc["fold_count"]), assignments={str(k): int(v) for k, v in doc["assignments"].items()})
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{path}: malformed split file ({e})") from e
    if not split.assignments:
        raise ValidationError(f"{path}: empty split")
    bad = {s: f for s, f in split.assignments.items() if not 0 <= f < split.fold_count}
    if bad:
        raise ValidationError(f"{path}: fold indices out of range: {bad}")
    return split


# ---------------------------------------------------------------------------
# augmentation

# canonical shift list; augmentation level k applies the first k-1 entries
AUGMENT_SHIFTS: list[tuple[int, int, int]] = [
    (-2, 0, 0),
    (2, 0, 0),
    (0, -2, 0),
    (0, 2, 0),
    (0, 0, -2),
    (0, 0, 2),
]


@dataclass(frozen=True)
class TrainingSample:
    subject_id: str
    label: int
    shift: tuple[int, int, int]
    volume: Volume3D


def make_augmented_training_set(
    items: list[tuple[str, int, Volume3D]], level: int
) -> list[TrainingSample]:
    """Expand (subject_id, label, volume) items: level k yields the original
    plus the first k-1 canonical shifts, grouped per subject in input order.
    Validation data must never pass through here; augmented copies keep the
    source subject_id so leaks stay detectable."""
    if not 1 <= level <= len(AUGMENT_SHIFTS) + 1:
        raise ValidationError(f"augmentation level must be in 1..{len(AUGMENT_SHIFTS) + 1}, got {level}")
    out: list[TrainingSample] = []
    for sid, label, vol in items:
        out.append(TrainingSample(sid, label, (0, 0, 0), vol))
        for shift in AUGMENT_SHIFTS[: level - 1]:
            out.append(TrainingSample(sid, label, shift, shift_volume(vol, *shift)))
    return out
