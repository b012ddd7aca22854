"""End-to-end tests for the command-line driver."""

import json
from pathlib import Path

import numpy as np
import pytest

from voxrel.cli import load_config, main
from voxrel.model import ModelSpec, build_model, save_model


def run(argv):
    return main([str(a) for a in argv])


def write_config(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny cohort plus split, cv, explain, and metrics artifacts."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = {
        "paths": {
            "manifest": str(root / "cohort" / "manifest.json"),
            "out": str(root / "cohort"),
            "split": str(root / "splitdir" / "split.json"),
            "cv": str(root / "cvdir"),
            "maps": str(root / "expdir" / "maps"),
        },
        "synth": {"n_subjects": 32, "dims": [16, 16, 16], "seed": 5},
        "model": {"n_blocks": 2, "filters": 3, "n_fc_layers": 1, "dropout_rate": 0.1},
        "train": {"epochs": 1, "batch_size": 4, "seed": 2, "augmentation_level": 1,
                  "residualize": True},
        "split": {"folds": 2, "seed": 1},
        "cv": {"n_jobs": 1},
        "explain": {"min_cluster_sizes": [3]},
    }
    cfg_path = write_config(root / "config.json", cfg)
    assert run(["synth", "--config", cfg_path]) == 0
    assert run(["split", "--config", cfg_path, "--out", root / "splitdir"]) == 0
    assert run(["cv", "--config", cfg_path, "--out", root / "cvdir"]) == 0
    assert run(["explain", "--config", cfg_path, "--out", root / "expdir"]) == 0
    assert run(["metrics", "--config", cfg_path, "--out", root / "metdir"]) == 0
    return {"root": root, "cfg": cfg, "cfg_path": cfg_path}


class TestConfigValidation:
    def test_missing_file_is_exit_3(self, tmp_path, capsys):
        code = run(["synth", "--config", tmp_path / "nope.json", "--out", tmp_path / "o"])
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "MissingInputError"

    def test_bad_json_is_exit_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert run(["synth", "--config", p, "--out", tmp_path / "o"]) == 2

    def test_unknown_section_rejected(self, tmp_path, capsys):
        p = write_config(tmp_path / "c.json", {"synthh": {}})
        assert run(["synth", "--config", p, "--out", tmp_path / "o"]) == 2
        assert "synthh" in json.loads(capsys.readouterr().err)["message"]

    def test_unknown_key_rejected(self, tmp_path, capsys):
        p = write_config(tmp_path / "c.json", {"synth": {"n_subject": 4}})
        assert run(["synth", "--config", p, "--out", tmp_path / "o"]) == 2
        assert "n_subject" in json.loads(capsys.readouterr().err)["message"]

    def test_non_object_root_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("[1, 2]")
        assert run(["synth", "--config", p, "--out", tmp_path / "o"]) == 2

    def test_non_object_section_rejected(self, tmp_path):
        p = write_config(tmp_path / "c.json", {"synth": [1]})
        assert run(["synth", "--config", p, "--out", tmp_path / "o"]) == 2

    def test_missing_required_path_is_exit_2(self, tmp_path, capsys):
        p = write_config(tmp_path / "c.json", {"split": {"folds": 2}})
        assert run(["split", "--config", p, "--out", tmp_path / "o"]) == 2
        assert "paths.manifest" in json.loads(capsys.readouterr().err)["message"]

    def test_no_config_loads_empty(self):
        assert load_config(None) == {}

    def test_error_output_is_one_json_line(self, tmp_path, capsys):
        run(["synth", "--config", tmp_path / "nope.json", "--out", tmp_path / "o"])
        err = capsys.readouterr().err
        assert err.count("\n") == 1
        doc = json.loads(err)
        assert set(doc) == {"error", "message"}

    def test_help_documents_exit_codes(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["synth", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "exit codes" in out
        for code in ("2 ", "3 ", "4 ", "5 "):
            assert code in out


class TestSynth:
    def test_outputs_and_resolved_config(self, workspace):
        out = Path(workspace["cfg"]["paths"]["out"])
        assert (out / "manifest.json").exists()
        assert (out / "masks" / "hippocampus.voxw").exists()
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["command"] == "synth"
        assert resolved["synth"]["n_subjects"] == 32
        assert resolved["synth"]["seed"] == 5

    def test_seed_flag_overrides_config(self, tmp_path, workspace):
        cfg = write_config(tmp_path / "c.json", {"synth": {"n_subjects": 4, "dims": [8, 8, 8], "seed": 1}})
        assert run(["synth", "--config", cfg, "--out", tmp_path / "o", "--seed", 9]) == 0
        resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
        assert resolved["synth"]["seed"] == 9


class TestSplit:
    def test_split_file_written(self, workspace):
        doc = json.loads((workspace["root"] / "splitdir" / "split.json").read_text())
        assert doc["fold_count"] == 2
        assert len(doc["assignments"]) == 32

    def test_resolved_config_records_fold_count(self, workspace):
        resolved = json.loads((workspace["root"] / "splitdir" / "resolved_config.json").read_text())
        assert resolved["split"] == {"folds": 2, "seed": 1}


class TestTrain:
    def test_epochs_zero_model_equals_fresh_build(self, tmp_path, workspace):
        cfg = dict(workspace["cfg"])
        cfg["train"] = {"epochs": 0, "seed": 7}
        cfg["model"] = {"n_blocks": 1, "filters": 2, "n_fc_layers": 1, "dropout_rate": 0.0}
        cfg_path = write_config(tmp_path / "c.json", cfg)
        out = tmp_path / "t0"
        assert run(["train", "--config", cfg_path, "--out", out]) == 0

        spec = ModelSpec(n_blocks=1, filters=2, n_fc_layers=1, dropout_rate=0.0,
                         input_dims=(1, 16, 16, 16))
        fresh = tmp_path / "fresh.vxm"
        save_model(build_model(spec, 7), fresh)
        assert (out / "model.vxm").read_bytes() == fresh.read_bytes()
        log = json.loads((out / "train_log.json").read_text())
        assert log["train_loss"] == [] and log["lr"] == []

    def test_rerun_is_byte_identical(self, tmp_path, workspace):
        cfg = dict(workspace["cfg"])
        cfg["train"] = {"epochs": 1, "batch_size": 8, "seed": 3}
        cfg_path = write_config(tmp_path / "c.json", cfg)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["train", "--config", cfg_path, "--out", out]) == 0
            outs.append(out)
        for fname in ("model.vxm", "train_log.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_residualize_writes_covariate_model(self, tmp_path, workspace):
        cfg = dict(workspace["cfg"])
        cfg["train"] = {"epochs": 0, "residualize": True}
        cfg_path = write_config(tmp_path / "c.json", cfg)
        out = tmp_path / "t"
        assert run(["train", "--config", cfg_path, "--out", out]) == 0
        assert (out / "residual.voxw").exists()
        assert (out / "residual.json").exists()

    def test_input_dims_mismatch_rejected(self, tmp_path, workspace, capsys):
        cfg = dict(workspace["cfg"])
        cfg["model"] = {"n_blocks": 1, "filters": 2, "n_fc_layers": 1,
                        "dropout_rate": 0.0, "input_dims": [1, 8, 8, 8]}
        cfg["train"] = {"epochs": 0}
        cfg_path = write_config(tmp_path / "c.json", cfg)
        assert run(["train", "--config", cfg_path, "--out", tmp_path / "o"]) == 5
        assert "do not match cohort dims" in json.loads(capsys.readouterr().err)["message"]


class TestCv:
    def test_artifacts(self, workspace):
        cvdir = workspace["root"] / "cvdir"
        for name in ("report.json", "curves.csv", "predictions.json", "resolved_config.json"):
            assert (cvdir / name).exists()
        for fold in (0, 1):
            assert (cvdir / f"fold{fold}" / "model.vxm").exists()
            assert (cvdir / f"fold{fold}" / "residual.voxw").exists()

    def test_report_covers_all_subjects(self, workspace):
        preds = json.loads((workspace["root"] / "cvdir" / "predictions.json").read_text())
        assert len(preds) == 32
        assert {p["fold"] for p in preds} == {0, 1}

    def test_missing_split_is_exit_3(self, tmp_path, workspace):
        cfg = dict(workspace["cfg"])
        cfg = json.loads(json.dumps(cfg))
        cfg["paths"]["split"] = str(tmp_path / "nope.json")
        cfg_path = write_config(tmp_path / "c.json", cfg)
        assert run(["cv", "--config", cfg_path, "--out", tmp_path / "o"]) == 3


class TestExplain:
    def test_maps_for_best_fold(self, workspace):
        report = json.loads((workspace["root"] / "cvdir" / "report.json").read_text())
        best = report["best_fold"]
        map_dir = workspace["root"] / "expdir" / "maps" / f"fold{best}"
        maps = sorted(map_dir.glob("*.voxw"))
        plain = [p for p in maps if ".min" not in p.name]
        variants = [p for p in maps if ".min3" in p.name]
        assert len(plain) == 32 and len(variants) == 32
        assert all(p.with_suffix(".json").exists() for p in maps)

    def test_summary_reports_conservation(self, workspace):
        doc = json.loads((workspace["root"] / "expdir" / "explain.json").read_text())
        assert doc["conservation"]["flagged"] == []
        assert len(doc["subjects"]) == 32
        first = next(iter(doc["subjects"].values()))
        assert set(first) == {"logit", "score", "predicted"}

    def test_explicit_model_path(self, tmp_path, workspace):
        cfg = json.loads(json.dumps(workspace["cfg"]))
        report = json.loads((workspace["root"] / "cvdir" / "report.json").read_text())
        fold_dir = workspace["root"] / "cvdir" / f"fold{report['best_fold']}"
        cfg["paths"]["model"] = str(fold_dir / "model.vxm")
        cfg["paths"]["residual_model"] = str(fold_dir / "residual.voxw")
        cfg["explain"] = {"subjects": ["s0001"], "min_cluster_sizes": []}
        cfg_path = write_config(tmp_path / "c.json", cfg)
        out = tmp_path / "exp"
        assert run(["explain", "--config", cfg_path, "--out", out]) == 0
        assert (out / "maps" / "model" / "s0001.voxw").exists()

    def test_explicit_model_matches_fold_map(self, tmp_path, workspace):
        report = json.loads((workspace["root"] / "cvdir" / "report.json").read_text())
        best = report["best_fold"]
        from voxrel.relevance import read_relevance_map

        ref = read_relevance_map(
            workspace["root"] / "expdir" / "maps" / f"fold{best}" / "s0001.voxw"
        )
        cfg = json.loads(json.dumps(workspace["cfg"]))
        fold_dir = workspace["root"] / "cvdir" / f"fold{best}"
        cfg["paths"]["model"] = str(fold_dir / "model.vxm")
        cfg["paths"]["residual_model"] = str(fold_dir / "residual.voxw")
        cfg["explain"] = {"subjects": ["s0001"], "min_cluster_sizes": []}
        cfg_path = write_config(tmp_path / "c.json", cfg)
        assert run(["explain", "--config", cfg_path, "--out", tmp_path / "exp"]) == 0
        got = read_relevance_map(tmp_path / "exp" / "maps" / "model" / "s0001.voxw")
        np.testing.assert_array_equal(got.values, ref.values)

    def test_missing_cv_report_is_exit_3(self, tmp_path, workspace):
        cfg = json.loads(json.dumps(workspace["cfg"]))
        cfg["paths"]["cv"] = str(tmp_path / "nocv")
        cfg_path = write_config(tmp_path / "c.json", cfg)
        assert run(["explain", "--config", cfg_path, "--out", tmp_path / "o"]) == 3


class TestMetrics:
    def test_outputs(self, workspace):
        metdir = workspace["root"] / "metdir"
        doc = json.loads((metdir / "metrics.json").read_text())
        assert {"classification", "auc", "correlation", "positive_mass",
                "region", "volume_analog", "lesion_volume_fraction"} <= set(doc)
        assert 0.0 <= doc["classification"]["accuracy"] <= 1.0
        assert doc["region_mask"] == "hippocampus"
        lines = (metdir / "scatter.csv").read_text().splitlines()
        assert lines[0] == "model,subject,aggregate_relevance,volume_analog"
        assert len(lines) == 1 + 32

    def test_correlation_entry_per_model(self, workspace):
        doc = json.loads((workspace["root"] / "metdir" / "metrics.json").read_text())
        assert set(doc["correlation"]) == set(doc["region"])
        for entry in doc["correlation"].values():
            assert "rho" in entry or "error" in entry

    def test_missing_maps_is_exit_3(self, tmp_path, workspace):
        cfg = json.loads(json.dumps(workspace["cfg"]))
        cfg["paths"]["maps"] = str(tmp_path / "nomaps")
        cfg_path = write_config(tmp_path / "c.json", cfg)
        assert run(["metrics", "--config", cfg_path, "--out", tmp_path / "o"]) == 3


class TestDeterminism:
    def test_full_chain_rerun_byte_identical(self, tmp_path):
        """synth, split, cv with the same config twice gives identical bytes."""
        def build(tag):
            root = tmp_path / tag
            cfg = {
                "paths": {
                    "manifest": str(root / "cohort" / "manifest.json"),
                    "out": str(root / "cohort"),
                    "split": str(root / "split" / "split.json"),
                },
                "synth": {"n_subjects": 24, "dims": [8, 8, 8], "seed": 4},
                "model": {"n_blocks": 1, "filters": 2, "n_fc_layers": 1, "dropout_rate": 0.0},
                "train": {"epochs": 1, "batch_size": 6, "seed": 0},
                "split": {"folds": 2, "seed": 0},
            }
            root.mkdir()
            cfg_path = write_config(root / "c.json", cfg)
            assert run(["synth", "--config", cfg_path]) == 0
            assert run(["split", "--config", cfg_path, "--out", root / "split"]) == 0
            assert run(["cv", "--config", cfg_path, "--out", root / "cv"]) == 0
            return root

        a, b = build("a"), build("b")
        for rel in ("cohort/manifest.json", "split/split.json", "cv/report.json",
                    "cv/curves.csv", "cv/fold0/model.vxm", "cv/fold1/model.vxm"):
            ab = (a / rel).read_bytes()
            bb = (b / rel).read_bytes()
            assert ab.replace(str(a).encode(), b"") == bb.replace(str(b).encode(), b"")
