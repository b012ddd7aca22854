"""Model zoo: architecture specs, initialization, forward/backward, storage.

An architecture is a stack of identical blocks (conv 3x3x3 -> batchnorm ->
maxpool 2x2x2 -> relu, optionally followed by dropout), a flatten, and a
small fully connected head whose hidden layers all have the flatten width.
The final dense layer emits one logit per class; softmax lives in the loss
and in predict(), not in the network.

Models are stored in a single self-describing file: magic ``VXMD0001``, a
little-endian uint32 header length, a JSON header (spec, tensor table,
training metadata), then the raw little-endian float32 tensor payload.
Saving and loading is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingInputError, ModelIntegrityError, ValidationError
from . import nn

MODEL_MAGIC = b"VXMD0001"
PLACEMENTS = ("after_each_block", "after_all_blocks")


@dataclass(frozen=True)
class ModelSpec:
    n_blocks: int = 3
    filters: int = 5
    dropout_placement: str = "after_all_blocks"
    dropout_rate: float = 0.4
    n_fc_layers: int = 1
    input_dims: tuple[int, int, int, int] = (1, 32, 32, 32)  # (C, X, Y, Z)
    n_classes: int = 2
    batchnorm: bool = True  # False only for batchnorm-folded copies

    def __post_init__(self):
        if not 1 <= self.n_blocks <= 6:
            raise ValidationError(f"n_blocks must be in 1..6, got {self.n_blocks}")
        if self.filters < 1:
            raise ValidationError("filters must be positive")
        if self.dropout_placement not in PLACEMENTS:
            raise ValidationError(f"dropout_placement must be one of {PLACEMENTS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if not 1 <= self.n_fc_layers <= 3:
            raise ValidationError("n_fc_layers must be 1, 2 or 3")
        if len(self.input_dims) != 4 or self.input_dims[0] != 1:
            raise ValidationError("input_dims must be (1, X, Y, Z)")
        if any(d < 1 for d in self.input_dims):
            raise ValidationError("input dims must be positive")
        if self.n_classes < 2:
            raise ValidationError("n_classes must be at least 2")
        # every block halves the grid (floor); each pool needs extent >= 2
        object.__setattr__(self, "input_dims", tuple(self.input_dims))
        self.block_dims()

    def block_dims(self) -> list[tuple[int, int, int]]:
        """Spatial dims after each block; raises if any pool would starve."""
        dims = self.input_dims[1:]
        out = []
        for b in range(self.n_blocks):
            if min(dims) < 2:
                raise ValidationError(
                    f"block {b}: spatial dims {dims} too small to pool "
                    f"({self.n_blocks} blocks on input {self.input_dims[1:]})"
                )
            dims = tuple(d // 2 for d in dims)
            out.append(dims)
        return out

    def flatten_width(self) -> int:
        fx, fy, fz = self.block_dims()[-1]
        return self.filters * fx * fy * fz

    def fc_widths(self) -> list[int]:
        d = self.flatten_width()
        return [d] * (self.n_fc_layers - 1) + [self.n_classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValidationError(f"unknown ModelSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "input_dims" in d:
            d["input_dims"] = tuple(d["input_dims"])
        return cls(**d)


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    train_meta: dict = field(default_factory=dict)


def expected_tensors(spec: ModelSpec) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind, shape) for every tensor the model spec allocates, in file order."""
    out = []
    c_in = spec.input_dims[0]
    for b in range(spec.n_blocks):
        out.append((f"conv{b}.w", "param", (spec.filters, c_in, 3, 3, 3)))
        out.append((f"conv{b}.b", "param", (spec.filters,)))
        if spec.batchnorm:
            out.append((f"bn{b}.gamma", "param", (spec.filters,)))
            out.append((f"bn{b}.beta", "param", (spec.filters,)))
            out.append((f"bn{b}.mean", "running", (spec.filters,)))
            out.append((f"bn{b}.var", "running", (spec.filters,)))
        c_in = spec.filters
    d = spec.flatten_width()
    for j, width in enumerate(spec.fc_widths()):
        out.append((f"fc{j}.w", "param", (d, width)))
        out.append((f"fc{j}.b", "param", (width,)))
        d = width
    return out


def build_model(spec: ModelSpec, seed: int) -> TrainedModel:
    """He-style fan-in scaled uniform init for weights; biases zero;
    batchnorm starts as the identity (gamma 1, beta 0, mean 0, var 1)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    for name, kind, shape in expected_tensors(spec):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith((".b", ".beta", ".mean")):
            (params if kind == "param" else running)[name] = np.zeros(shape, dtype=np.float32)
        else:  # gamma, var
            (params if kind == "param" else running)[name] = np.ones(shape, dtype=np.float32)
    return TrainedModel(spec=spec, params=params, running=running, train_meta={"init_seed": seed})


def forward(model: TrainedModel, x: np.ndarray, mode: str, rng: np.random.Generator | None = None):
    """Run the network; returns (logits, cache).

    cache is a list of (kind, name, payload) records holding exactly what
    backward() and the relevance engine need. In train mode the batchnorm
    running statistics of the model are updated in place and dropout is
    active (rng required when the architecture has dropout).
    """
    if mode not in ("train", "infer"):
        raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = model.spec
    if x.ndim != 5 or x.shape[1:] != spec.input_dims:
        raise ValidationError(f"input shape {x.shape} does not match spec dims {spec.input_dims}")
    if mode == "train" and spec.dropout_rate > 0.0 and rng is None:
        raise ValidationError("train mode with dropout needs an rng")
    p = model.params
    cache: list = [("mode", mode, {})]
    h = x

    def _dropout(tag):
        nonlocal h
        y, mask = nn.dropout(h, spec.dropout_rate, mode, rng)
        cache.append(("dropout", tag, {"mask": mask}))
        h = y

    for b in range(spec.n_blocks):
        cache.append(("conv", f"conv{b}", {"x": h}))
        h, col = nn.conv3d_with_col(h, p[f"conv{b}.w"], p[f"conv{b}.b"])
        cache[-1][2]["col"] = col
        if spec.batchnorm:
            h, bncache, new_mean, new_var = nn.batchnorm(
                h, p[f"bn{b}.gamma"], p[f"bn{b}.beta"], mode,
                model.running[f"bn{b}.mean"], model.running[f"bn{b}.var"],
            )
            if mode == "train":
                model.running[f"bn{b}.mean"] = new_mean
                model.running[f"bn{b}.var"] = new_var
            cache.append(("bn", f"bn{b}", {"cache": bncache}))
        cache.append(("pool", f"pool{b}", {"x_shape": h.shape, "arg": None}))
        h, arg = nn.maxpool3d(h)
        cache[-1][2]["arg"] = arg
        cache.append(("relu", f"relu{b}", {"x": h}))
        h = nn.relu(h)
        if spec.dropout_placement == "after_each_block":
            _dropout(f"dropout{b}")
    if spec.dropout_placement == "after_all_blocks":
        _dropout("dropout")
    cache.append(("flatten", "flatten", {"shape": h.shape}))
    h = h.reshape(h.shape[0], -1)
    n_fc = spec.n_fc_layers
    for j in range(n_fc):
        cache.append(("dense", f"fc{j}", {"x": h}))
        h = nn.dense(h, p[f"fc{j}.w"], p[f"fc{j}.b"])
        if j < n_fc - 1:
            cache.append(("relu", f"fc_relu{j}", {"x": h}))
            h = nn.relu(h)
    return h, cache


def backward(model: TrainedModel, cache: list, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the scalar loss whose logit gradient is d_logits."""
    spec = model.spec
    p = model.params
    grads: dict[str, np.ndarray] = {}
    dy = d_logits
    for kind, name, payload in reversed(cache):
        if kind == "mode":
            continue
        if kind == "dense":
            dy, grads[f"{name}.w"], grads[f"{name}.b"] = nn.dense_backward(
                payload["x"], p[f"{name}.w"], dy
            )
        elif kind == "relu":
            dy = nn.relu_backward(payload["x"], dy)
        elif kind == "flatten":
            dy = dy.reshape(payload["shape"])
        elif kind == "dropout":
            mask = payload["mask"]
            dy = dy * mask.astype(dy.dtype) / np.asarray(1.0 - spec.dropout_rate, dtype=dy.dtype)
        elif kind == "pool":
            dy = nn.maxpool3d_backward(payload["x_shape"], payload["arg"], dy)
        elif kind == "bn":
            dy, grads[f"{name}.gamma"], grads[f"{name}.beta"] = nn.batchnorm_backward(
                payload["cache"], p[f"{name}.gamma"], dy
            )
        elif kind == "conv":
            # the first conv's input gradient feeds nothing; skip its cost
            dy, grads[f"{name}.w"], grads[f"{name}.b"] = nn.conv3d_backward(
                payload["x"], p[f"{name}.w"], dy,
                need_dx=(name != "conv0"), col=payload.get("col"),
            )
        else:
            raise ValidationError(f"unknown cache record kind {kind!r}")
    return grads


def predict(model: TrainedModel, x: np.ndarray):
    """Infer-mode class predictions; returns (labels, probabilities)."""
    logits, _ = forward(model, x, "infer")
    probs = nn.softmax(logits)
    return probs.argmax(axis=1), probs


# ---------------------------------------------------------------------------
# parameter accounting


def count_parameters(spec: ModelSpec) -> dict:
    """Closed-form per-layer parameter counts.

    Batchnorm contributes 2F trainable (gamma, beta) plus 2F non-trainable
    running statistics; the totals therefore match what build_model allocates
    across params and running, exactly.
    """
    layers = []
    c_in = spec.input_dims[0]
    for b in range(spec.n_blocks):
        layers.append({"name": f"conv{b}", "trainable": spec.filters * (27 * c_in) + spec.filters, "non_trainable": 0})
        if spec.batchnorm:
            layers.append({"name": f"bn{b}", "trainable": 2 * spec.filters, "non_trainable": 2 * spec.filters})
        c_in = spec.filters
    d = spec.flatten_width()
    for j, width in enumerate(spec.fc_widths()):
        layers.append({"name": f"fc{j}", "trainable": d * width + width, "non_trainable": 0})
        d = width
    trainable = sum(l["trainable"] for l in layers)
    non_trainable = sum(l["non_trainable"] for l in layers)
    return {
        "layers": layers,
        "trainable": trainable,
        "non_trainable": non_trainable,
        "total": trainable + non_trainable,
    }


SUBVOLUME_DIMS = (1, 88, 32, 94)
WHOLE_BRAIN_DIMS = (1, 88, 111, 94)


def study_grid() -> list[tuple[str, ModelSpec]]:
    """The twelve architecture variants exercised by the hyperparameter study."""

    def spec(blocks, filters, fc=1, placement="after_all_blocks", dims=SUBVOLUME_DIMS):
        return ModelSpec(
            n_blocks=blocks, filters=filters, dropout_placement=placement,
            dropout_rate=0.4, n_fc_layers=fc, input_dims=dims,
        )

    return [
        ("3blk-5f-1fc-dropEach-sub", spec(3, 5, placement="after_each_block")),
        ("3blk-5f-1fc-sub", spec(3, 5)),
        ("4blk-5f-1fc-sub", spec(4, 5)),
        ("5blk-5f-1fc-sub", spec(5, 5)),
        ("5blk-10f-1fc-sub", spec(5, 10)),
        ("5blk-20f-1fc-sub", spec(5, 20)),
        ("5blk-30f-1fc-sub", spec(5, 30)),
        ("5blk-60f-1fc-sub", spec(5, 60)),
        ("5blk-5f-2fc-sub", spec(5, 5, fc=2)),
        ("5blk-5f-3fc-sub", spec(5, 5, fc=3)),
        ("3blk-5f-1fc-whole", spec(3, 5, dims=WHOLE_BRAIN_DIMS)),
        ("5blk-20f-1fc-whole", spec(5, 20, dims=WHOLE_BRAIN_DIMS)),
    ]


# totals reported for the reference implementations of these variants; printed
# for comparison only, never asserted (pooling-edge conventions can differ)
REFERENCE_TOTALS = {
    "3blk-5f-1fc-sub": 6402,
    "3blk-5f-1fc-whole": 17292,
    "5blk-10f-1fc-sub": 11402,
    "5blk-20f-1fc-sub": 44402,
    "5blk-20f-1fc-whole": 44722,
}


def parameter_report() -> str:
    """Human-readable table of computed totals next to reference totals."""
    lines = [f"{'variant':28s} {'trainable':>10s} {'total':>10s} {'reference':>10s}"]
    for label, spec in study_grid():
        c = count_parameters(spec)
        ref = REFERENCE_TOTALS.get(label)
        lines.append(
            f"{label:28s} {c['trainable']:10d} {c['total']:10d} "
            f"{ref if ref is not None else '-':>10}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# storage


def save_model(model: TrainedModel, path: str | Path) -> None:
    table = []
    blobs = []
    offset = 0
    expected = expected_tensors(model.spec)
    for name, kind, shape in expected:
        arr = (model.params if kind == "param" else model.running)[name]
        if tuple(arr.shape) != shape:
            raise ModelIntegrityError(f"tensor {name} has shape {arr.shape}, spec demands {shape}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "kind": kind, "shape": list(shape), "dtype": "<f4", "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "spec": model.spec.to_dict(),
        "tensors": table,
        "train_meta": model.train_meta,
    }
    hraw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(hraw)))
        fh.write(hraw)
        for b in blobs:
            fh.write(b)


def load_model(path: str | Path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"model file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:8] != MODEL_MAGIC:
        raise ModelIntegrityError(f"{path}: not a model file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ModelIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelIntegrityError(f"{path}: unreadable header ({e})") from e
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValidationError) as e:
        raise ModelIntegrityError(f"{path}: bad spec in header ({e})") from e

    expected = expected_tensors(spec)
    table = header.get("tensors")
    if not isinstance(table, list) or len(table) != len(expected):
        raise ModelIntegrityError(f"{path}: tensor table does not match spec")
    payload = raw[12 + hlen :]
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    pos = 0
    for entry, (name, kind, shape) in zip(table, expected):
        if (
            entry.get("name") != name
            or entry.get("kind") != kind
            or tuple(entry.get("shape", ())) != shape
            or entry.get("dtype") != "<f4"
            or entry.get("offset") != pos
        ):
            raise ModelIntegrityError(f"{path}: tensor table entry for {name} is inconsistent with the declared architecture")
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(payload):
            raise ModelIntegrityError(f"{path}: payload truncated at tensor {name}")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        (params if kind == "param" else running)[name] = arr
        pos += nbytes
    if pos != len(payload):
        raise ModelIntegrityError(f"{path}: {len(payload) - pos} trailing payload bytes")
    return TrainedModel(spec=spec, params=params, running=running, train_meta=header.get("train_meta", {}))
