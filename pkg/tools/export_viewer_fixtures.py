"""Export shared fixtures for the browser viewer's parity tests.

The viewer reimplements three pieces of engine math in TypeScript: the
top-percentile keep rule, the best-slice pick from a histogram, and 2D
8-connected cluster filtering. This script computes reference answers with
the engine itself (and scipy for the 2D clusters) on a small deterministic
cohort and writes them as JSON under frontend/tests/fixtures/, where the
vitest suite replays them. Regenerate after changing any of those rules:

    python3 tools/export_viewer_fixtures.py
"""

import argparse
import json
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage

from voxrel.model import ModelSpec, build_model
from voxrel.relevance import (
    AXIS_NAMES,
    LrpConfig,
    canonicalize,
    lrp_relevance,
    read_relevance_map,
    slice_histogram,
    threshold_top_percentile,
    top_percentile_count,
    write_relevance_map,
)
from voxrel.synthetic import SynthConfig, generate_synthetic_cohort

PERCENTILES = [1.0, 5.0, 10.0, 25.0, 30.0, 50.0, 100.0]
AXES = ["sagittal", "coronal", "axial"]


def served_plane(values: np.ndarray, axis: int, index: int) -> list[float]:
    plane = values.take(index, axis=axis)
    return [float(v) for v in plane.ravel(order="F")]


def build_maps(workdir: Path) -> dict[str, np.ndarray]:
    """Relevance maps from a seeded untrained model, via the on-disk format
    so fixture values match what the slice server would load."""
    cohort_dir = workdir / "cohort"
    man = generate_synthetic_cohort(SynthConfig(n_subjects=6, dims=(16, 16, 16), seed=11), cohort_dir)
    spec = ModelSpec(n_blocks=2, filters=4, n_fc_layers=1, input_dims=(1, 16, 16, 16))
    model = canonicalize(build_model(spec, seed=11))
    maps: dict[str, np.ndarray] = {}
    for i, subject in enumerate(man.subjects):
        cfg = LrpConfig() if i % 2 == 0 else LrpConfig(alpha=2.0, beta=1.0)
        rmap = lrp_relevance(model, man.load_volume(subject.id), 1, cfg, subject_id=subject.id)
        path = workdir / f"{subject.id}.voxw"
        write_relevance_map(rmap, path)
        maps[subject.id] = read_relevance_map(path).values
    return maps


def slice_fixtures(maps: dict[str, np.ndarray]) -> list[dict]:
    out = []
    subjects = sorted(maps)
    rng = np.random.default_rng(11)
    for i in range(10):
        sid = subjects[i % len(subjects)]
        values = maps[sid]
        axis = AXIS_NAMES[AXES[i % 3]]
        index = int(rng.integers(0, values.shape[axis]))
        plane = values.take(index, axis=axis)
        served = served_plane(values, axis, index)
        cuts = {}
        for p in PERCENTILES:
            kept = threshold_top_percentile(plane, p)
            nonzero = np.flatnonzero(kept.ravel(order="F"))
            cuts[str(p)] = {
                "k": top_percentile_count(plane.size, p),
                "nonzero": [int(j) for j in nonzero],
            }
        out.append({
            "subject": sid,
            "axis": AXES[axis],
            "index": index,
            "dims": [int(plane.shape[0]), int(plane.shape[1])],
            "values": served,
            "percentiles": cuts,
        })
    return out


def histogram_fixtures(maps: dict[str, np.ndarray]) -> list[dict]:
    out = []
    for i, sid in enumerate(sorted(maps)):
        for axis in (AXES if i < 2 else ["coronal"]):
            hist = slice_histogram(maps[sid], axis)
            out.append({
                "subject": sid,
                "axis": axis,
                "values": [float(v) for v in hist],
                "best_slice": int(np.argmax(hist)),
            })
    return out[:10]


def cluster_fixtures() -> list[dict]:
    """2D 8-connectivity filtering oracles from scipy on random masks."""
    rng = np.random.default_rng(11)
    eight = np.ones((3, 3), dtype=bool)
    out = []
    for w, h, density, min_size in [
        (8, 6, 0.35, 2), (10, 10, 0.45, 3), (12, 7, 0.5, 5),
        (16, 16, 0.4, 4), (5, 5, 0.6, 3), (9, 11, 0.3, 2),
    ]:
        mask = (rng.random((w, h)) < density)
        labels, n = ndimage.label(mask, structure=eight)
        survivors = np.zeros_like(mask)
        if n:
            counts = np.bincount(labels.ravel())
            keep = counts >= min_size
            keep[0] = False
            survivors = keep[labels]
        out.append({
            "dims": [w, h],
            "min_size": min_size,
            "mask": [int(v) for v in mask.ravel(order="F")],
            "survivors": [int(v) for v in survivors.ravel(order="F")],
        })
    return out


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_out = Path(__file__).resolve().parent.parent / "frontend" / "tests" / "fixtures"
    parser.add_argument("--out", type=Path, default=default_out, help="fixture directory")
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        maps = build_maps(Path(tmp))
    docs = {
        "slices.json": slice_fixtures(maps),
        "histograms.json": histogram_fixtures(maps),
        "clusters.json": cluster_fixtures(),
    }
    for name, doc in docs.items():
        (args.out / name).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        print(f"wrote {args.out / name}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
