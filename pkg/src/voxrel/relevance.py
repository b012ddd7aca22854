"""Relevance propagation through a trained network, plus map post-processing.

The decomposition follows the alpha/beta rule: at every linear layer the
relevance of an output neuron is split over its inputs proportionally to the
positive contributions x_i * w_ij (weight alpha) minus the negative ones
(weight beta), with alpha - beta = 1 so totals are preserved. Max-pool
winners inherit the window's relevance unchanged, relu passes relevance
through, and batchnorm is folded into the preceding convolution beforehand
(canonicalize) so it never appears in the decomposition. Biases enter the
positive/negative denominators as virtual inputs; their share of relevance
is absorbed rather than redistributed, and every layer reports how much it
absorbed so conservation can be audited instead of trusted.

Propagation runs in float64 regardless of the model precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import MissingInputError, ValidationError
from . import nn
from .model import TrainedModel
from .volume import BinaryMask, Volume3D, read_volume, write_volume

_BN_EPS = 1e-5  # must match nn.batchnorm's default

AXIS_NAMES = {"sagittal": 0, "coronal": 1, "axial": 2}


@dataclass(frozen=True)
class LrpConfig:
    alpha: float = 1.0
    beta: float = 0.0
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValidationError(f"alpha - beta must equal 1, got {self.alpha} - {self.beta}")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


@dataclass
class RelevanceMap:
    values: np.ndarray  # (nx, ny, nz)
    subject_id: str
    target_class: int
    logit: float
    model_id: str

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)


# ---------------------------------------------------------------------------
# batchnorm folding


def canonicalize(model: TrainedModel) -> TrainedModel:
    """Fold each batchnorm into its preceding conv and drop dropout.

    The returned model computes the same function in infer mode (the only
    mode relevant to explanation); applying canonicalize twice is a no-op.
    """
    spec = model.spec
    params = {k: v.copy() for k, v in model.params.items()}
    if not spec.batchnorm:
        return TrainedModel(
            spec=replace(spec, dropout_rate=0.0),
            params=params,
            running={},
            train_meta=dict(model.train_meta),
        )
    for b in range(spec.n_blocks):
        gamma = model.params[f"bn{b}.gamma"].astype(np.float64)
        beta = model.params[f"bn{b}.beta"].astype(np.float64)
        mean = model.running[f"bn{b}.mean"].astype(np.float64)
        var = model.running[f"bn{b}.var"].astype(np.float64)
        scale = gamma / np.sqrt(var + _BN_EPS)
        w = model.params[f"conv{b}.w"].astype(np.float64)
        bias = model.params[f"conv{b}.b"].astype(np.float64)
        params[f"conv{b}.w"] = (w * scale[:, None, None, None, None]).astype(np.float32)
        params[f"conv{b}.b"] = ((bias - mean) * scale + beta).astype(np.float32)
        for suffix in ("gamma", "beta"):
            del params[f"bn{b}.{suffix}"]
    new_spec = replace(spec, batchnorm=False, dropout_rate=0.0)
    meta = dict(model.train_meta)
    meta["batchnorm_folded"] = True
    return TrainedModel(spec=new_spec, params=params, running={}, train_meta=meta)


# ---------------------------------------------------------------------------
# the alpha/beta decomposition


def _stabilize(d: np.ndarray, eps: float) -> np.ndarray:
    """Keep denominators away from zero, preserving sign (sign(0) = +1)."""
    sign = np.where(d >= 0, 1.0, -1.0)
    return np.where(np.abs(d) < eps, eps * sign, d)


def _lrp_dense(x, w, b, rel, cfg: LrpConfig):
    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    bp, bn_ = np.maximum(b, 0.0), np.minimum(b, 0.0)
    sp = xp @ wp + xn @ wn + bp
    cp = cfg.alpha * rel / _stabilize(sp, cfg.epsilon)
    absorbed = float(np.sum(cp * bp))
    if cfg.beta != 0.0:
        sn = xp @ wn + xn @ wp + bn_
        cn = cfg.beta * rel / _stabilize(sn, cfg.epsilon)
        absorbed -= float(np.sum(cn * bn_))
        r_in = xp * (cp @ wp.T - cn @ wn.T) + xn * (cp @ wn.T - cn @ wp.T)
    else:
        r_in = xp * (cp @ wp.T) + xn * (cp @ wn.T)
    return r_in, absorbed


def _lrp_conv(x, w, b, rel, cfg: LrpConfig):
    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    bp, bn_ = np.maximum(b, 0.0), np.minimum(b, 0.0)
    zeros = np.zeros_like(b)
    shape = (1, -1, 1, 1, 1)
    sp = nn.conv3d(xp, wp, zeros) + nn.conv3d(xn, wn, zeros) + bp.reshape(shape)
    cp = cfg.alpha * rel / _stabilize(sp, cfg.epsilon)
    absorbed = float(np.sum(cp * bp.reshape(shape)))
    if cfg.beta != 0.0:
        sn = nn.conv3d(xp, wn, zeros) + nn.conv3d(xn, wp, zeros) + bn_.reshape(shape)
        cn = cfg.beta * rel / _stabilize(sn, cfg.epsilon)
        absorbed -= float(np.sum(cn * bn_.reshape(shape)))
        r_in = xp * (nn.conv3d_input_grad(wp, cp) - nn.conv3d_input_grad(wn, cn)) + xn * (
            nn.conv3d_input_grad(wn, cp) - nn.conv3d_input_grad(wp, cn)
        )
    else:
        r_in = xp * nn.conv3d_input_grad(wp, cp) + xn * nn.conv3d_input_grad(wn, cp)
    return r_in, absorbed


def _propagate(model: TrainedModel, x: np.ndarray, target_class: int, cfg: LrpConfig):
    """Forward in float64, then walk the stack backwards redistributing
    relevance. Returns (input relevance, logit, per-layer records)."""
    spec = model.spec
    if spec.batchnorm:
        raise ValidationError("relevance propagation needs a canonicalized model (batchnorm folded)")
    if not 0 <= target_class < spec.n_classes:
        raise ValidationError(f"target class {target_class} out of range")
    p64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    h = x.astype(np.float64)
    stack: list[tuple] = []
    for b in range(spec.n_blocks):
        stack.append(("conv", f"conv{b}", h))
        h = nn.conv3d(h, p64[f"conv{b}.w"], p64[f"conv{b}.b"])
        shape_before = h.shape
        h, arg = nn.maxpool3d(h)
        stack.append(("pool", f"pool{b}", (shape_before, arg)))
        stack.append(("relu", f"relu{b}", None))
        h = nn.relu(h)
    stack.append(("flatten", "flatten", h.shape))
    h = h.reshape(h.shape[0], -1)
    for j in range(spec.n_fc_layers):
        stack.append(("dense", f"fc{j}", h))
        h = nn.dense(h, p64[f"fc{j}.w"], p64[f"fc{j}.b"])
        if j < spec.n_fc_layers - 1:
            stack.append(("relu", f"fc_relu{j}", None))
            h = nn.relu(h)
    logits = h
    logit = float(logits[0, target_class])

    rel = np.zeros_like(logits)
    rel[0, target_class] = logit
    records: list[dict] = []
    for kind, name, payload in reversed(stack):
        sum_out = float(rel.sum())
        absorbed = 0.0
        if kind == "dense":
            rel, absorbed = _lrp_dense(payload, p64[f"{name}.w"], p64[f"{name}.b"], rel, cfg)
        elif kind == "relu":
            pass  # relevance passes through elementwise nonlinearities
        elif kind == "flatten":
            rel = rel.reshape(payload)
        elif kind == "pool":
            shape_before, arg = payload
            rel = nn.maxpool3d_backward(shape_before, arg, rel)
        elif kind == "conv":
            rel, absorbed = _lrp_conv(payload, p64[f"{name}.w"], p64[f"{name}.b"], rel, cfg)
        records.append(
            {
                "layer": name,
                "kind": kind,
                "sum_out": sum_out,
                "sum_in": float(rel.sum()),
                "absorbed": absorbed,
            }
        )
    return rel, logit, records


def lrp_relevance(
    model: TrainedModel,
    vol: Volume3D,
    target_class: int,
    cfg: LrpConfig = LrpConfig(),
    subject_id: str = "",
    model_id: str = "",
) -> RelevanceMap:
    """Per-voxel relevance of `target_class`'s logit for one input volume."""
    if vol.dims != model.spec.input_dims[1:]:
        raise ValidationError(f"volume dims {vol.dims} do not match model input {model.spec.input_dims[1:]}")
    x = vol.values[None, None].astype(np.float64)
    rel, logit, _ = _propagate(model, x, target_class, cfg)
    return RelevanceMap(
        values=rel[0, 0],
        subject_id=subject_id,
        target_class=target_class,
        logit=logit,
        model_id=model_id,
    )


def conservation_report(
    model: TrainedModel,
    vol: Volume3D,
    target_class: int,
    cfg: LrpConfig = LrpConfig(),
    rel_map: RelevanceMap | None = None,
    flag_tolerance: float = 1e-3,
) -> dict:
    """Audit relevance totals layer by layer.

    Each record carries the totals entering/leaving the layer and the
    relevance absorbed by its bias; `deviation` is what remains after
    accounting for absorption, relative to the logit. Layers above the
    tolerance are flagged. When rel_map is given it is cross-checked
    against the recomputed propagation.
    """
    x = vol.values[None, None].astype(np.float64)
    rel, logit, records = _propagate(model, x, target_class, cfg)
    scale = max(abs(logit), 1e-12)
    flagged = []
    for rec in records:
        rec["deviation"] = (rec["sum_in"] - (rec["sum_out"] - rec["absorbed"])) / scale
        rec["flagged"] = abs(rec["deviation"]) > flag_tolerance
        if rec["flagged"]:
            flagged.append(rec["layer"])
    report = {
        "logit": logit,
        "input_sum": float(rel.sum()),
        "total_absorbed": float(sum(r["absorbed"] for r in records)),
        "layers": records,
        "flagged": flagged,
    }
    if rel_map is not None:
        report["map_matches"] = bool(
            np.allclose(rel_map.values.astype(np.float64), rel[0, 0], rtol=1e-5, atol=1e-10)
        )
    return report


# ---------------------------------------------------------------------------
# map post-processing


def _map_values(map_like) -> np.ndarray:
    return map_like.values if hasattr(map_like, "values") else np.asarray(map_like)


def _rewrap(map_like, values: np.ndarray):
    if isinstance(map_like, RelevanceMap):
        return replace(map_like, values=values)
    return values


def scale_map(map_like, lo: float, hi: float):
    """Affine rescale: min -> lo, max -> hi; constant maps go entirely to lo."""
    if hi < lo:
        raise ValidationError("hi must be >= lo")
    v = _map_values(map_like).astype(np.float64)
    vmin, vmax = float(v.min()), float(v.max())
    if vmax == vmin:
        return _rewrap(map_like, np.full_like(v, lo))
    return _rewrap(map_like, lo + (v - vmin) * ((hi - lo) / (vmax - vmin)))


def top_percentile_count(n: int, p: float) -> int:
    """How many of n values the top p percent keeps: ceil(n * p / 100).

    p is quantized to 1e-6 percent and the ceiling is taken in integer
    arithmetic so any reimplementation (e.g. the browser viewer) can match
    the result exactly.
    """
    if not 0 < p <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {p}")
    q = max(1, round(p * 1e6))
    return int(min(-(-(n * q) // 10**8), n))


def threshold_top_percentile(map_like, p: float):
    """Zero everything but the k = ceil(p% * n) largest values.

    Ties at the cutoff are broken by scan order (x fastest, then y, then z):
    earlier voxels win. Exactly k voxels survive for every input.
    """
    v = _map_values(map_like)
    flat = v.ravel(order="F").copy()
    k = top_percentile_count(flat.size, p)
    order = np.argsort(-flat, kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return _rewrap(map_like, np.asarray(out.reshape(v.shape, order="F")))


def binarize_positive(map_like) -> BinaryMask:
    """Strictly positive voxels. Apply to raw maps: rescaling shifts the
    zero point, so binarize(scale_map(m, 0, 1)) is not binarize(m)."""
    return BinaryMask(_map_values(map_like) > 0)


def filter_clusters(mask: BinaryMask, min_size: int) -> BinaryMask:
    """Drop 26-connected components smaller than min_size voxels."""
    if min_size < 1:
        raise ValidationError("min_size must be >= 1")
    if min_size == 1:
        return BinaryMask(mask.bits.copy())
    labels, n = ndimage.label(mask.bits, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return BinaryMask(np.zeros_like(mask.bits))
    counts = np.bincount(labels.ravel())
    keep = counts >= min_size
    keep[0] = False
    return BinaryMask(keep[labels])


def slice_histogram(map_like, axis: str | int = "coronal") -> np.ndarray:
    """Per-slice sums along one anatomical axis; entries total the map sum."""
    v = _map_values(map_like)
    if isinstance(axis, str):
        if axis not in AXIS_NAMES:
            raise ValidationError(f"axis must be one of {sorted(AXIS_NAMES)}")
        axis = AXIS_NAMES[axis]
    if not 0 <= axis <= 2:
        raise ValidationError(f"axis index out of range: {axis}")
    other = tuple(a for a in range(3) if a != axis)
    return v.sum(axis=other, dtype=np.float64)


# ---------------------------------------------------------------------------
# persistence: volume container plus a JSON sidecar


def write_relevance_map(rmap: RelevanceMap, path: str | Path) -> None:
    path = Path(path)
    write_volume(Volume3D(rmap.values.astype(np.float32)), path)
    sidecar = {
        "kind": "relevance-map",
        "subject": rmap.subject_id,
        "target_class": rmap.target_class,
        "logit": rmap.logit,
        "model": rmap.model_id,
        "min": float(rmap.values.min()),
        "max": float(rmap.values.max()),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_relevance_map(path: str | Path) -> RelevanceMap:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise MissingInputError(f"relevance map sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    vol = read_volume(path)
    return RelevanceMap(
        values=vol.values,
        subject_id=sidecar.get("subject", ""),
        target_class=int(sidecar.get("target_class", 0)),
        logit=float(sidecar.get("logit", 0.0)),
        model_id=sidecar.get("model", ""),
    )
