"""Read-only HTTP API over cohort artifacts.

Serves subject listings, 2D slices of gray/residual/relevance volumes,
and per-axis relevance histograms as JSON. The server never mutates the
artifact tree, so repeated identical requests return byte-identical
bodies. Slice payloads are row-major with the first remaining anatomical
axis fastest, matching the x-fastest layout of the volume container.

Routes:
    GET /subjects
    GET /models
    GET /subjects/{id}/slice/{axis}/{index}?kind=gray|residual|relevance
        [&model={id}][&min_cluster={k}]
    GET /subjects/{id}/histogram?model={id}[&axis={name}]

Errors are JSON objects {"code": int, "message": str} with a matching
HTTP status: 400 for malformed axis/kind/parameters, 404 for unknown
subjects, models, or out-of-range slice indices.
"""

from __future__ import annotations

import json
import mimetypes
import re
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .manifest import load_manifest
from .relevance import AXIS_NAMES, slice_histogram
from .volume import read_volume

_SLICE_RE = re.compile(r"^/subjects/([^/]+)/slice/([^/]+)/([^/]+)$")
_HIST_RE = re.compile(r"^/subjects/([^/]+)/histogram$")

_KINDS = ("gray", "residual", "relevance")


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@lru_cache(maxsize=64)
def _cached_volume(path_str: str) -> np.ndarray:
    return read_volume(path_str).values


class ArtifactTree:
    """Resolves subjects, models, and volume files for the request handlers."""

    def __init__(self, manifest_path, maps_dir=None, residuals_dir=None):
        self.manifest = load_manifest(manifest_path)
        self.maps_dir = Path(maps_dir) if maps_dir else None
        self.residuals_dir = Path(residuals_dir) if residuals_dir else None
        self._subjects = {s.id: s for s in self.manifest.subjects}

    def subject(self, sid: str):
        if sid not in self._subjects:
            raise ApiError(404, f"unknown subject: {sid}")
        return self._subjects[sid]

    def model_ids(self) -> list[str]:
        if self.maps_dir is None or not self.maps_dir.exists():
            return []
        return sorted(d.name for d in self.maps_dir.iterdir() if d.is_dir())

    def model_dir(self, model_id: str) -> Path:
        if self.maps_dir is None:
            raise ApiError(404, "no relevance maps are being served")
        d = self.maps_dir / model_id
        if model_id not in self.model_ids() or not d.is_dir():
            raise ApiError(404, f"unknown model: {model_id}")
        return d

    def model_subjects(self, model_id: str) -> list[str]:
        names = []
        for p in sorted(self.model_dir(model_id).glob("*.voxw")):
            if ".min" not in p.name:
                names.append(p.stem)
        return names

    def volume_path(self, sid: str, kind: str, model_id: str | None, min_cluster: int | None) -> Path:
        rec = self.subject(sid)
        if kind == "gray":
            return self.manifest.root / rec.volume_path
        if kind == "residual":
            if self.residuals_dir is None:
                raise ApiError(404, "no residual volumes are being served")
            path = self.residuals_dir / f"{sid}.voxw"
            if not path.exists():
                raise ApiError(404, f"no residual volume for subject {sid}")
            return path
        if kind == "relevance":
            if model_id is None:
                raise ApiError(400, "kind=relevance requires a model parameter")
            base = self.model_dir(model_id)
            name = f"{sid}.voxw" if min_cluster is None else f"{sid}.min{min_cluster}.voxw"
            path = base / name
            if not path.exists():
                if min_cluster is not None:
                    raise ApiError(
                        404,
                        f"no map for subject {sid} with min_cluster={min_cluster}; "
                        "cluster variants are precomputed at explain time",
                    )
                raise ApiError(404, f"no relevance map for subject {sid} in model {model_id}")
            return path
        raise ApiError(400, f"kind must be one of {list(_KINDS)}")

    def load(self, path: Path) -> np.ndarray:
        return _cached_volume(str(path))


def _axis_index(axis: str) -> int:
    if axis not in AXIS_NAMES:
        raise ApiError(400, f"axis must be one of {sorted(AXIS_NAMES)}")
    return AXIS_NAMES[axis]


def _slice_payload(values: np.ndarray, axis: int, index: int) -> dict:
    if not 0 <= index < values.shape[axis]:
        raise ApiError(404, f"slice index {index} out of range for axis extent {values.shape[axis]}")
    plane = values.take(index, axis=axis)
    # row-major with the first remaining axis fastest, like the file layout
    return {
        "dims": [int(plane.shape[0]), int(plane.shape[1])],
        "values": [float(v) for v in plane.ravel(order="F")],
    }


def _single_param(params: dict, name: str) -> str | None:
    vals = params.get(name)
    if not vals:
        return None
    if len(vals) > 1:
        raise ApiError(400, f"parameter {name} given more than once")
    return vals[0]


class _Handler(BaseHTTPRequestHandler):
    tree: ArtifactTree
    static_dir: Path | None = None

    # silence per-request stderr logging
    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, doc: dict) -> None:
        self._send(status, (json.dumps(doc, sort_keys=True) + "\n").encode(), "application/json")

    def do_GET(self):
        try:
            url = urlparse(self.path)
            params = parse_qs(url.query)
            self._route(url.path, params)
        except ApiError as e:
            self._json(e.status, {"code": e.status, "message": e.message})
        except BrokenPipeError:
            pass

    def _route(self, path: str, params: dict) -> None:
        tree = self.tree
        if path == "/subjects":
            doc = {
                "dims": list(tree.manifest.dims),
                "masks": sorted(tree.manifest.masks),
                "subjects": [
                    {"id": s.id, "label": s.label, "age": s.age, "gender": s.gender}
                    for s in tree.manifest.subjects
                ],
            }
            self._json(200, doc)
            return
        if path == "/models":
            doc = {
                "models": [
                    {"id": mid, "subjects": tree.model_subjects(mid)}
                    for mid in tree.model_ids()
                ]
            }
            self._json(200, doc)
            return
        m = _SLICE_RE.match(path)
        if m:
            self._slice(m.group(1), m.group(2), m.group(3), params)
            return
        m = _HIST_RE.match(path)
        if m:
            self._histogram(m.group(1), params)
            return
        if self.static_dir is not None:
            self._static(path)
            return
        raise ApiError(404, f"no such route: {path}")

    def _slice(self, sid: str, axis_name: str, index_str: str, params: dict) -> None:
        tree = self.tree
        axis = _axis_index(axis_name)
        try:
            index = int(index_str)
        except ValueError:
            raise ApiError(400, f"slice index must be an integer, got {index_str!r}")
        kind = _single_param(params, "kind") or "gray"
        if kind not in _KINDS:
            raise ApiError(400, f"kind must be one of {list(_KINDS)}")
        model_id = _single_param(params, "model")
        raw_min = _single_param(params, "min_cluster")
        min_cluster = None
        if raw_min is not None:
            try:
                min_cluster = int(raw_min)
            except ValueError:
                raise ApiError(400, f"min_cluster must be an integer, got {raw_min!r}")
            if min_cluster < 1:
                raise ApiError(400, "min_cluster must be >= 1")
            if kind != "relevance":
                raise ApiError(400, "min_cluster only applies to kind=relevance")
        values = tree.load(tree.volume_path(sid, kind, model_id, min_cluster))
        doc = _slice_payload(values, axis, index)
        doc.update({
            "subject": sid,
            "axis": axis_name,
            "index": index,
            "kind": kind,
            "model": model_id,
            "min": float(values.min()),
            "max": float(values.max()),
        })
        if min_cluster is not None:
            doc["min_cluster"] = min_cluster
        self._json(200, doc)

    def _histogram(self, sid: str, params: dict) -> None:
        tree = self.tree
        model_id = _single_param(params, "model")
        if model_id is None:
            raise ApiError(400, "histogram requires a model parameter")
        axis_name = _single_param(params, "axis") or "coronal"
        axis = _axis_index(axis_name)
        values = tree.load(tree.volume_path(sid, "relevance", model_id, None))
        hist = slice_histogram(values, axis)
        doc = {
            "subject": sid,
            "model": model_id,
            "axis": axis_name,
            "values": [float(v) for v in hist],
            "best_slice": int(np.argmax(hist)),
            "min": float(values.min()),
            "max": float(values.max()),
        }
        self._json(200, doc)

    def _static(self, path: str) -> None:
        rel = path.lstrip("/") or "index.html"
        base = self.static_dir.resolve()
        target = (base / rel).resolve()
        if base not in target.parents and target != base:
            raise ApiError(404, "not found")
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            raise ApiError(404, f"no such file: {path}")
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        self._send(200, target.read_bytes(), ctype)


def make_server(
    manifest_path,
    maps_dir=None,
    residuals_dir=None,
    host: str = "127.0.0.1",
    port: int = 0,
    static_dir=None,
) -> ThreadingHTTPServer:
    """Build a ready-to-run server; port 0 binds an ephemeral port."""
    tree = ArtifactTree(manifest_path, maps_dir=maps_dir, residuals_dir=residuals_dir)
    handler = type("Handler", (_Handler,), {
        "tree": tree,
        "static_dir": Path(static_dir) if static_dir else None,
    })
    return ThreadingHTTPServer((host, port), handler)
