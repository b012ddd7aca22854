"""Command-line pipeline driver.

One JSON configuration file drives every stage; the file is keyed by
section (paths, synth, model, train, split, cv, lrp, explain, metrics,
serve) and unknown keys anywhere are rejected. Each mutating command
writes the fully resolved configuration next to its outputs so a run can
be reproduced from the artifacts alone. Errors print a single JSON line
to stderr and map to stable exit codes (see --help).

Heavy imports happen inside the command functions so `--help` and config
validation stay fast.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, MissingInputError, ValidationError, VoxrelError, ZeroVarianceError

_EPILOG = """\
exit codes:
  0  success
  2  configuration error (bad JSON, unknown keys, missing section)
  3  missing input (file or directory not found)
  4  format error (corrupt volume/model/manifest container)
  5  validation error (values out of range, dimension mismatches)
  6  other pipeline error
"""

_SCHEMA: dict[str, set[str]] = {
    "paths": {"manifest", "out", "split", "cv", "maps", "residuals", "model", "residual_model"},
    "synth": {
        "n_subjects", "dims", "seed", "lesion_center", "lesion_radius_frac",
        "noise_frac", "severity_low", "severity_high", "ad_threshold",
    },
    "model": {
        "n_blocks", "filters", "dropout_placement", "dropout_rate",
        "n_fc_layers", "input_dims", "n_classes",
    },
    "train": {
        "epochs", "batch_size", "lr0", "decay", "beta1", "beta2", "adam_eps",
        "seed", "augmentation_level", "residualize",
    },
    "split": {"folds", "seed"},
    "cv": {"n_jobs"},
    "lrp": {"alpha", "beta", "epsilon"},
    "explain": {"subjects", "fold", "target_class", "min_cluster_sizes"},
    "metrics": {"mask"},
    "serve": {"host", "port", "static_dir"},
}


def load_config(path: str | None) -> dict:
    """Parse and schema-check the configuration file; {} when none given."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: config root must be an object")
    unknown = set(doc) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"{p}: unknown config sections {sorted(unknown)}")
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{p}: section {section!r} must be an object")
        bad = set(body) - _SCHEMA[section]
        if bad:
            raise ConfigError(f"{p}: section {section!r} has unknown keys {sorted(bad)}")
    return doc


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _require_path(cfg: dict, key: str, flag_value=None) -> Path:
    if flag_value is not None:
        return Path(flag_value)
    value = cfg.get("paths", {}).get(key)
    if value is None:
        raise ConfigError(f"paths.{key} is required (set it in the config or pass the matching flag)")
    return Path(value)


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **resolved}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from dataclasses import asdict

    from .synthetic import SynthConfig, generate_synthetic_cohort

    cfg = load_config(args.config)
    body = _section(cfg, "synth")
    if args.seed is not None:
        body["seed"] = args.seed
    for key in ("dims", "lesion_center"):
        if key in body:
            body[key] = tuple(body[key])
    try:
        scfg = SynthConfig(**body)
    except TypeError as e:
        raise ConfigError(f"synth section: {e}") from e
    out = _require_path(cfg, "out", args.out)
    man = generate_synthetic_cohort(scfg, out)
    resolved = asdict(scfg)
    resolved["dims"] = list(scfg.dims)
    resolved["lesion_center"] = list(scfg.lesion_center)
    _write_resolved(out, "synth", {"synth": resolved, "paths": {"out": str(out)}})
    _emit({"command": "synth", "subjects": len(man.subjects), "out": str(out)})
    return 0


def cmd_residualize(args) -> int:
    from .manifest import load_manifest
    from .preprocess import fit_residual_model, residualize, save_residual_model
    from .volume import write_volume

    cfg = load_config(args.config)
    manifest_path = _require_path(cfg, "manifest")
    out = _require_path(cfg, "out", args.out)
    man = load_manifest(manifest_path)
    model = fit_residual_model(man)
    out.mkdir(parents=True, exist_ok=True)
    save_residual_model(model, out / "residual.voxw")
    vol_dir = out / "volumes"
    vol_dir.mkdir(exist_ok=True)
    for s in man.subjects:
        resid = residualize(model, s, man.load_volume(s.id))
        write_volume(resid, vol_dir / f"{s.id}.voxw")
    _write_resolved(out, "residualize", {"paths": {"manifest": str(manifest_path), "out": str(out)}})
    _emit({
        "command": "residualize",
        "controls": len(model.fit_subjects),
        "subjects": len(man.subjects),
        "out": str(out),
    })
    return 0


def cmd_split(args) -> int:
    from .manifest import load_manifest
    from .preprocess import save_split, stratified_kfold

    cfg = load_config(args.config)
    body = _section(cfg, "split")
    folds = int(body.get("folds", 10))
    seed = args.seed if args.seed is not None else int(body.get("seed", 0))
    manifest_path = _require_path(cfg, "manifest")
    out = _require_path(cfg, "out", args.out)
    man = load_manifest(manifest_path)
    split = stratified_kfold(man, folds, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_split(split, out / "split.json")
    _write_resolved(out, "split", {
        "split": {"folds": folds, "seed": seed},
        "paths": {"manifest": str(manifest_path), "out": str(out)},
    })
    _emit({"command": "split", "folds": folds, "subjects": len(split.assignments), "out": str(out)})
    return 0


def _model_spec(cfg: dict, man) -> "ModelSpec":
    from .model import ModelSpec

    body = _section(cfg, "model")
    if "input_dims" in body:
        body["input_dims"] = tuple(body["input_dims"])
    else:
        body["input_dims"] = (1,) + man.dims
    try:
        spec = ModelSpec(**body)
    except TypeError as e:
        raise ConfigError(f"model section: {e}") from e
    if spec.input_dims[1:] != man.dims:
        raise ValidationError(
            f"model input dims {spec.input_dims[1:]} do not match cohort dims {man.dims}"
        )
    return spec


def _train_config(cfg: dict, seed_override: int | None) -> "TrainConfig":
    from .train import TrainConfig

    body = _section(cfg, "train")
    if seed_override is not None:
        body["seed"] = seed_override
    try:
        return TrainConfig(**body)
    except TypeError as e:
        raise ConfigError(f"train section: {e}") from e


def cmd_train(args) -> int:
    from dataclasses import asdict

    from .manifest import load_manifest
    from .model import save_model
    from .preprocess import fit_residual_model, make_augmented_training_set, residualize, save_residual_model
    from .train import binary_label, train_fold

    cfg = load_config(args.config)
    manifest_path = _require_path(cfg, "manifest")
    out = _require_path(cfg, "out", args.out)
    man = load_manifest(manifest_path)
    spec = _model_spec(cfg, man)
    config = _train_config(cfg, args.seed)

    volumes = {s.id: man.load_volume(s.id) for s in man.subjects}
    out.mkdir(parents=True, exist_ok=True)
    if config.residualize:
        rmodel = fit_residual_model(man, volumes)
        volumes = {sid: residualize(rmodel, man.subject(sid), v) for sid, v in volumes.items()}
        save_residual_model(rmodel, out / "residual.voxw")
    items = [(s.id, binary_label(s.label), volumes[s.id]) for s in man.subjects]
    samples = make_augmented_training_set(items, config.augmentation_level)
    model, log = train_fold(spec, samples, [], config)
    save_model(model, out / "model.vxm")
    (out / "train_log.json").write_text(json.dumps(log.to_dict(), sort_keys=True) + "\n")
    _write_resolved(out, "train", {
        "model": spec.to_dict(),
        "train": asdict(config),
        "paths": {"manifest": str(manifest_path), "out": str(out)},
    })
    _emit({
        "command": "train",
        "samples": len(samples),
        "final_train_loss": log.train_loss[-1] if log.train_loss else None,
        "out": str(out),
    })
    return 0


def cmd_cv(args) -> int:
    from dataclasses import asdict

    from .manifest import load_manifest
    from .preprocess import load_split
    from .train import run_cv

    cfg = load_config(args.config)
    manifest_path = _require_path(cfg, "manifest")
    split_path = _require_path(cfg, "split")
    out = _require_path(cfg, "out", args.out)
    n_jobs = int(_section(cfg, "cv").get("n_jobs", 1))
    man = load_manifest(manifest_path)
    split = load_split(split_path)
    spec = _model_spec(cfg, man)
    config = _train_config(cfg, args.seed)
    report = run_cv(
        spec, man, split, config, out,
        n_jobs=n_jobs, manifest_path=manifest_path, split_path=split_path,
    )
    _write_resolved(out, "cv", {
        "model": spec.to_dict(),
        "train": asdict(config),
        "cv": {"n_jobs": n_jobs},
        "paths": {"manifest": str(manifest_path), "split": str(split_path), "out": str(out)},
    })
    _emit({
        "command": "cv",
        "mean_accuracy": report.mean_accuracy,
        "sd_accuracy": report.sd_accuracy,
        "best_fold": report.best_fold,
        "out": str(out),
    })
    return 0


def _lrp_config(cfg: dict) -> "LrpConfig":
    from .relevance import LrpConfig

    body = _section(cfg, "lrp")
    try:
        return LrpConfig(**body)
    except TypeError as e:
        raise ConfigError(f"lrp section: {e}") from e


def _explain_model(cfg: dict):
    """Resolve the model to explain: an explicit paths.model wins, otherwise
    the best CV fold (or explain.fold); the fold's residual model rides along."""
    paths = cfg.get("paths", {})
    body = _section(cfg, "explain")
    if paths.get("model"):
        model_path = Path(paths["model"])
        residual_path = Path(paths["residual_model"]) if paths.get("residual_model") else None
        return model_path, residual_path, model_path.stem
    cv_dir = _require_path(cfg, "cv")
    report_path = cv_dir / "report.json"
    if not report_path.exists():
        raise MissingInputError(f"cv report not found: {report_path}")
    report = json.loads(report_path.read_text())
    fold = int(body.get("fold", report["best_fold"]))
    fold_dir = cv_dir / f"fold{fold}"
    model_path = fold_dir / "model.vxm"
    residual_path = fold_dir / "residual.voxw"
    return model_path, (residual_path if residual_path.exists() else None), f"fold{fold}"


def cmd_explain(args) -> int:
    from dataclasses import asdict, replace as dc_replace

    import numpy as np

    from .manifest import load_manifest
    from .model import forward, load_model
    from .nn import softmax
    from .preprocess import load_residual_model, residualize
    from .relevance import (
        binarize_positive,
        canonicalize,
        conservation_report,
        filter_clusters,
        lrp_relevance,
        write_relevance_map,
    )

    cfg = load_config(args.config)
    manifest_path = _require_path(cfg, "manifest")
    out = _require_path(cfg, "out", args.out)
    body = _section(cfg, "explain")
    target_class = int(body.get("target_class", 1))
    min_cluster_sizes = [int(k) for k in body.get("min_cluster_sizes", [5, 20])]
    lrp_cfg = _lrp_config(cfg)

    man = load_manifest(manifest_path)
    subjects = body.get("subjects") or [s.id for s in man.subjects]
    model_path, residual_path, model_id = _explain_model(cfg)
    model = canonicalize(load_model(model_path))
    rmodel = load_residual_model(residual_path) if residual_path else None

    map_dir = out / "maps" / model_id
    map_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {
        "model": str(model_path),
        "model_id": model_id,
        "residual_model": str(residual_path) if residual_path else None,
        "target_class": target_class,
        "min_cluster_sizes": min_cluster_sizes,
        "subjects": {},
    }
    first_vol = None
    for sid in subjects:
        rec = man.subject(sid)
        vol = man.load_volume(sid)
        if rmodel is not None:
            vol = residualize(rmodel, rec, vol)
        if first_vol is None:
            first_vol = vol
        rmap = lrp_relevance(model, vol, target_class, lrp_cfg, subject_id=sid, model_id=model_id)
        write_relevance_map(rmap, map_dir / f"{sid}.voxw")
        for k in min_cluster_sizes:
            kept = filter_clusters(binarize_positive(rmap), k)
            variant = dc_replace(rmap, values=rmap.values * kept.bits)
            write_relevance_map(variant, map_dir / f"{sid}.min{k}.voxw")
        logits, _ = forward(model, vol.values[None, None], "infer")
        probs = softmax(logits)[0]
        summary["subjects"][sid] = {
            "logit": rmap.logit,
            "score": float(probs[target_class]),
            "predicted": int(np.argmax(probs)),
        }
    audit = conservation_report(model, first_vol, target_class, lrp_cfg)
    summary["conservation"] = {
        "logit": audit["logit"],
        "input_sum": audit["input_sum"],
        "total_absorbed": audit["total_absorbed"],
        "flagged": audit["flagged"],
    }
    (out / "explain.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_resolved(out, "explain", {
        "explain": {
            "subjects": subjects,
            "target_class": target_class,
            "min_cluster_sizes": min_cluster_sizes,
        },
        "lrp": asdict(lrp_cfg),
        "paths": {"manifest": str(manifest_path), "model": str(model_path), "out": str(out)},
    })
    _emit({
        "command": "explain",
        "model_id": model_id,
        "subjects": len(subjects),
        "flagged_layers": len(audit["flagged"]),
        "out": str(out),
    })
    return 0


def cmd_metrics(args) -> int:
    from .manifest import load_manifest
    from .metrics import (
        auc_subsplits,
        classification_report,
        correlation_study,
        positive_mass_fraction,
        region_intensity_sum,
        region_relevance_stats,
        write_scatter_csv,
    )
    from .relevance import read_relevance_map

    cfg = load_config(args.config)
    manifest_path = _require_path(cfg, "manifest")
    cv_dir = _require_path(cfg, "cv")
    maps_root = _require_path(cfg, "maps")
    out = _require_path(cfg, "out", args.out)
    mask_name = _section(cfg, "metrics").get("mask", "hippocampus")

    man = load_manifest(manifest_path)
    mask = man.load_mask(mask_name)
    predictions_path = cv_dir / "predictions.json"
    if not predictions_path.exists():
        raise MissingInputError(f"cv predictions not found: {predictions_path}")
    predictions = json.loads(predictions_path.read_text())

    truth = [p["truth"] for p in predictions]
    predicted = [p["predicted"] for p in predictions]
    scores = [p["score"] for p in predictions]
    labels3 = [p["label"] for p in predictions]
    classification = classification_report(truth, predicted, ["nc", "impaired"])
    auc = auc_subsplits(scores, labels3)
    predicted_by_subject = {p["subject"]: p["predicted"] for p in predictions}

    analog = {s.id: region_intensity_sum(man.load_volume(s.id), mask) for s in man.subjects}

    if not maps_root.exists():
        raise MissingInputError(f"maps directory not found: {maps_root}")
    maps_by_model: dict[str, dict] = {}
    for model_dir in sorted(d for d in maps_root.iterdir() if d.is_dir()):
        maps = {}
        for path in sorted(model_dir.glob("*.voxw")):
            if ".min" in path.name:
                continue
            rmap = read_relevance_map(path)
            maps[rmap.subject_id] = rmap
        if maps:
            maps_by_model[model_dir.name] = maps
    if not maps_by_model:
        raise MissingInputError(f"no relevance maps under {maps_root}")

    correlation, rows = correlation_study(maps_by_model, analog, mask)
    lesion_volume_fraction = mask.count / mask.bits.size
    region: dict = {}
    positive_mass: dict = {}
    for model_id, maps in maps_by_model.items():
        per_subject = {}
        fractions_all = []
        fractions_ad = []
        for sid, rmap in maps.items():
            stats = region_relevance_stats(rmap, mask)
            try:
                frac = positive_mass_fraction(rmap, mask)
            except ZeroVarianceError:
                frac = None  # map has no positive relevance at all
            stats["positive_mass_fraction"] = frac
            per_subject[sid] = stats
            if frac is not None:
                fractions_all.append(frac)
                if predicted_by_subject.get(sid) == 1:
                    fractions_ad.append(frac)
        region[model_id] = per_subject
        positive_mass[model_id] = {
            "mean_all": sum(fractions_all) / len(fractions_all) if fractions_all else None,
            "mean_predicted_impaired": (
                sum(fractions_ad) / len(fractions_ad) if fractions_ad else None
            ),
            "n_predicted_impaired": len(fractions_ad),
        }

    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "classification": classification,
        "auc": auc,
        "correlation": correlation,
        "region_mask": mask_name,
        "lesion_volume_fraction": lesion_volume_fraction,
        "positive_mass": positive_mass,
        "region": region,
        "volume_analog": analog,
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_scatter_csv(rows, out / "scatter.csv")
    _write_resolved(out, "metrics", {
        "metrics": {"mask": mask_name},
        "paths": {
            "manifest": str(manifest_path), "cv": str(cv_dir),
            "maps": str(maps_root), "out": str(out),
        },
    })
    _emit({
        "command": "metrics",
        "accuracy": classification["accuracy"],
        "auc_all": auc["all"],
        "models": sorted(maps_by_model),
        "out": str(out),
    })
    return 0


def cmd_serve(args) -> int:
    from .server import make_server

    cfg = load_config(args.config)
    body = _section(cfg, "serve")
    host = args.host if args.host is not None else body.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(body.get("port", 8570))
    manifest_path = _require_path(cfg, "manifest")
    paths = cfg.get("paths", {})
    server = make_server(
        manifest_path,
        maps_dir=paths.get("maps"),
        residuals_dir=paths.get("residuals"),
        host=host,
        port=port,
        static_dir=body.get("static_dir"),
    )
    _emit({"command": "serve", "host": server.server_address[0], "port": server.server_address[1]})
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxrel",
        description="Volumetric CNN training, relevance mapping, and evaluation pipeline.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, seeded=False, serve_flags=False):
        p = sub.add_parser(name, help=help_text, epilog=_EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory (overrides paths.out)")
        if seeded:
            p.add_argument("--seed", type=int, help="seed override for this stage")
        else:
            p.set_defaults(seed=None)
        if serve_flags:
            p.add_argument("--host", help="bind address (overrides serve.host)")
            p.add_argument("--port", type=int, help="port, 0 picks one (overrides serve.port)")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic cohort", seeded=True)
    add("residualize", cmd_residualize, "fit covariate model on controls; write residual volumes")
    add("split", cmd_split, "persist a stratified k-fold split", seeded=True)
    add("train", cmd_train, "train a single model on the whole cohort", seeded=True)
    add("cv", cmd_cv, "cross-validated training with per-fold artifacts", seeded=True)
    add("explain", cmd_explain, "write relevance maps for a trained model")
    add("metrics", cmd_metrics, "evaluate predictions and relevance maps")
    add("serve", cmd_serve, "read-only HTTP API over cohort artifacts", serve_flags=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VoxrelError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
