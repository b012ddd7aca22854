"""Training loop: Adam with 1/(1+decay*t) schedule, per-fold training, CV.

Determinism contract: everything flows from integer seeds (model init from
config.seed, per-epoch shuffles and dropout from derived streams, fold f of
a CV run uses config.seed + f), so rerunning with an identical config gives
bitwise identical models, logs and reports. Folds are independent and may
run in parallel worker processes without changing any result.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .manifest import DatasetManifest, load_manifest
from .model import ModelSpec, TrainedModel, backward, build_model, forward, save_model
from .metrics import auc_subsplits
from . import nn
from .preprocess import (
    FoldSplit,
    TrainingSample,
    fit_residual_model,
    load_split,
    make_augmented_training_set,
    residualize,
    save_residual_model,
)
from .volume import Volume3D


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr0: float = 0.001
    decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augmentation_level: int = 1
    residualize: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be positive")
        if self.decay < 0:
            raise ValidationError("decay must be >= 0")


def lr_at(iteration: int, lr0: float, decay: float) -> float:
    """Learning rate before optimizer step `iteration` (0-based)."""
    return lr0 / (1.0 + decay * iteration)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


@dataclass
class TrainLog:
    epochs: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    zero_variance_events: int = 0

    @property
    def final_val_accuracy(self) -> float | None:
        return self.val_accuracy[-1] if self.val_accuracy else None

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "final_val_accuracy": self.final_val_accuracy,
            "lr": self.lr,
            "zero_variance_events": self.zero_variance_events,
        }


def _stack(volumes: list[Volume3D]) -> np.ndarray:
    return np.stack([v.values[None] for v in volumes]).astype(np.float32)


def evaluate(model: TrainedModel, x: np.ndarray, labels: np.ndarray, batch_size: int):
    """Infer-mode loss/accuracy/scores; scores are softmax class-1 probabilities."""
    losses = []
    scores = np.empty(len(x), dtype=np.float64)
    correct = 0
    for lo in range(0, len(x), batch_size):
        xb = x[lo : lo + batch_size]
        yb = labels[lo : lo + batch_size]
        logits, _ = forward(model, xb, "infer")
        loss, _ = nn.cross_entropy(logits, yb)
        losses.append(loss * len(xb))
        probs = nn.softmax(logits)
        scores[lo : lo + batch_size] = probs[:, 1]
        correct += int((probs.argmax(axis=1) == yb).sum())
    return float(np.sum(losses) / len(x)), correct / len(x), scores


def train_fold(
    spec: ModelSpec,
    train_samples: list[TrainingSample],
    val_items: list[tuple[str, int, Volume3D]],
    config: TrainConfig,
) -> tuple[TrainedModel, TrainLog]:
    """Train one model; validation always runs in infer mode."""
    if not train_samples:
        raise ValidationError("empty training set")
    model = build_model(spec, config.seed)
    x_train = _stack([s.volume for s in train_samples])
    y_train = np.array([s.label for s in train_samples], dtype=np.int64)
    x_val = _stack([v for _, _, v in val_items]) if val_items else None
    y_val = np.array([lab for _, lab, _ in val_items], dtype=np.int64)

    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    state = init_adam(model.params)
    log = TrainLog(epochs=config.epochs)
    step = 0
    for _ in range(config.epochs):
        perm = shuffle_rng.permutation(len(x_train))
        epoch_loss = 0.0
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            logits, cache = forward(model, x_train[idx], "train", dropout_rng)
            loss, d_logits = nn.cross_entropy(logits, y_train[idx])
            grads = backward(model, cache, d_logits)
            lr = lr_at(step, config.lr0, config.decay)
            adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            log.lr.append(lr)
            step += 1
            epoch_loss += loss * len(idx)
            for kind, _, payload in cache:
                if kind == "bn" and payload["cache"] is not None:
                    log.zero_variance_events += payload["cache"]["zero_variance"]
        log.train_loss.append(epoch_loss / len(x_train))
        if x_val is not None:
            vloss, vacc, _ = evaluate(model, x_val, y_val, config.batch_size)
            log.val_loss.append(vloss)
            log.val_accuracy.append(vacc)
    if config.epochs > 0:
        model.train_meta = dict(model.train_meta)
        model.train_meta["trained"] = {
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "lr0": config.lr0,
            "decay": config.decay,
            "seed": config.seed,
            "augmentation_level": config.augmentation_level,
            "final_val_accuracy": log.final_val_accuracy,
        }
    return model, log


# ---------------------------------------------------------------------------
# cross-validation


def binary_label(label: str) -> int:
    """NC -> 0; MCI and AD pool into the positive class."""
    return 0 if label == "NC" else 1


@dataclass
class CvReport:
    fold_count: int
    mean_accuracy: float
    sd_accuracy: float
    best_fold: int
    folds: list[dict]
    curves: dict
    spec: dict
    config: dict
    accuracy_provenance: str = "final-epoch validation accuracy per fold; mean with population SD"

    def to_dict(self) -> dict:
        return asdict(self)


def _fold_result(
    spec: ModelSpec,
    man: DatasetManifest,
    volumes: dict[str, Volume3D],
    split: FoldSplit,
    fold: int,
    config: TrainConfig,
    out_dir: Path,
) -> dict:
    train_ids = split.train_ids(fold)
    val_ids = split.val_ids(fold)
    fold_dir = out_dir / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    fold_config = replace(config, seed=config.seed + fold)

    train_vols = {sid: volumes[sid] for sid in train_ids}
    val_vols = {sid: volumes[sid] for sid in val_ids}
    if config.residualize:
        rmodel = fit_residual_model(man, volumes, subject_ids=train_ids)
        train_vols = {sid: residualize(rmodel, man.subject(sid), v) for sid, v in train_vols.items()}
        val_vols = {sid: residualize(rmodel, man.subject(sid), v) for sid, v in val_vols.items()}
        save_residual_model(rmodel, fold_dir / "residual.voxw")

    train_items = [(sid, binary_label(man.subject(sid).label), train_vols[sid]) for sid in train_ids]
    samples = make_augmented_training_set(train_items, config.augmentation_level)
    val_items = [(sid, binary_label(man.subject(sid).label), val_vols[sid]) for sid in val_ids]

    model, log = train_fold(spec, samples, val_items, fold_config)
    save_model(model, fold_dir / "model.vxm")
    (fold_dir / "train_log.json").write_text(json.dumps(log.to_dict(), sort_keys=True) + "\n")

    _, acc, scores = evaluate(
        model, _stack([v for _, _, v in val_items]), np.array([l for _, l, _ in val_items]), config.batch_size
    )
    truth3 = [man.subject(sid).label for sid in val_ids]
    auc = auc_subsplits(scores, truth3)
    predictions = [
        {
            "subject": sid,
            "fold": fold,
            "label": man.subject(sid).label,
            "truth": binary_label(man.subject(sid).label),
            "predicted": int(scores[i] >= 0.5),
            "score": float(scores[i]),
        }
        for i, sid in enumerate(val_ids)
    ]
    return {
        "fold": fold,
        "accuracy": acc,
        "auc": auc,
        "val_subjects": val_ids,
        "train_subject_count": len(train_ids),
        "sample_count": len(samples),
        "zero_variance_events": log.zero_variance_events,
        "curves": {
            "train_loss": log.train_loss,
            "val_loss": log.val_loss,
            "val_accuracy": log.val_accuracy,
        },
        "predictions": predictions,
    }


def _fold_worker(args: tuple) -> dict:
    spec_dict, manifest_path, split_path, fold, config_dict, out_dir = args
    man = load_manifest(manifest_path)
    volumes = {s.id: man.load_volume(s.id) for s in man.subjects}
    return _fold_result(
        ModelSpec.from_dict(spec_dict),
        man,
        volumes,
        load_split(split_path),
        fold,
        TrainConfig(**config_dict),
        Path(out_dir),
    )


def _worker_init() -> None:
    # one BLAS thread per fold worker; the folds themselves are the parallelism
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def run_cv(
    spec: ModelSpec,
    man: DatasetManifest,
    split: FoldSplit,
    config: TrainConfig,
    out_dir: str | Path,
    n_jobs: int = 1,
    manifest_path: str | Path | None = None,
    split_path: str | Path | None = None,
) -> CvReport:
    """Train one model per fold and aggregate; writes report.json, curves.csv,
    predictions.json and per-fold artifacts under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    missing = [s.id for s in man.subjects if s.id not in split.assignments]
    if missing:
        raise ValidationError(f"split is missing {len(missing)} subjects (e.g. {missing[:3]})")

    if n_jobs > 1:
        if manifest_path is None or split_path is None:
            raise ValidationError("parallel folds need manifest_path and split_path")
        args = [
            (spec.to_dict(), str(manifest_path), str(split_path), f, asdict(config), str(out_dir))
            for f in range(split.fold_count)
        ]
        # spawn: workers import numpy after the thread-count env vars are set
        with ProcessPoolExecutor(
            max_workers=min(n_jobs, split.fold_count),
            mp_context=get_context("spawn"),
            initializer=_worker_init,
        ) as pool:
            fold_results = list(pool.map(_fold_worker, args))
    else:
        volumes = {s.id: man.load_volume(s.id) for s in man.subjects}
        fold_results = [
            _fold_result(spec, man, volumes, split, f, config, out_dir)
            for f in range(split.fold_count)
        ]

    accs = np.array([r["accuracy"] for r in fold_results], dtype=np.float64)
    best_fold = int(np.argmax(accs))
    curves: dict = {}
    for key in ("train_loss", "val_loss", "val_accuracy"):
        series = np.array([r["curves"][key] for r in fold_results], dtype=np.float64)
        curves[key] = {
            "mean": series.mean(axis=0).tolist() if series.size else [],
            "sd": series.std(axis=0).tolist() if series.size else [],
        }
    predictions = [p for r in fold_results for p in r["predictions"]]
    folds = [{k: v for k, v in r.items() if k not in ("curves", "predictions")} for r in fold_results]
    report = CvReport(
        fold_count=split.fold_count,
        mean_accuracy=float(accs.mean()),
        sd_accuracy=float(accs.std()),
        best_fold=best_fold,
        folds=folds,
        curves=curves,
        spec=spec.to_dict(),
        config=asdict(config),
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    (out_dir / "predictions.json").write_text(json.dumps(predictions, sort_keys=True, indent=2) + "\n")
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "train_loss_mean", "train_loss_sd", "val_loss_mean", "val_loss_sd",
             "val_accuracy_mean", "val_accuracy_sd"]
        )
        for e in range(config.epochs):
            writer.writerow(
                [e]
                + [f"{curves[k][s][e]:.10g}" for k in ("train_loss", "val_loss", "val_accuracy") for s in ("mean", "sd")]
            )
    return report
