"""Tests for covariate residualization, stratified folds, and augmentation."""

import json

import numpy as np
import pytest

from voxrel.errors import (
    DimMismatchError,
    MissingInputError,
    RankDeficientError,
    ValidationError,
)
from voxrel.manifest import COVARIATE_NAMES, DatasetManifest, SubjectRecord
from voxrel.preprocess import (
    AUGMENT_SHIFTS,
    FoldSplit,
    fit_residual_model,
    load_residual_model,
    load_split,
    make_augmented_training_set,
    residualize,
    save_residual_model,
    save_split,
    stratified_kfold,
)
from voxrel.volume import Volume3D, shift_volume

DIMS = (5, 4, 3)


def make_subject(i, label, age, gender, tiv, fs):
    return SubjectRecord(
        id=f"s{i:03d}",
        label=label,
        age=age,
        gender=gender,
        tiv=tiv,
        field_strength=fs,
        volume_path=f"s{i:03d}.voxw",
    )


def linear_cohort(rng, n_controls=8, extras=()):
    """Cohort whose control volumes are an exact linear function of the
    covariates. Every covariate and coefficient is a dyadic rational with a
    small numerator, so float32 storage is exact and residuals are pure
    solver noise."""
    betas = rng.integers(-8, 9, size=(5,) + DIMS).astype(np.float64) / 8.0
    betas[1] /= 16.0  # keep the age term on the same scale as the rest
    subjects = []
    volumes = {}
    ages = rng.integers(60, 91, size=n_controls)
    genders = rng.choice(["M", "F"], size=n_controls)
    tivs = rng.choice([1.25, 1.5, 1.75], size=n_controls)
    strengths = rng.choice([1.5, 3.0], size=n_controls)
    for i in range(n_controls):
        s = make_subject(i, "NC", int(ages[i]), str(genders[i]), float(tivs[i]), float(strengths[i]))
        row = np.asarray(s.covariate_row())
        values = np.tensordot(row, betas, axes=([0], [0])).astype(np.float32)
        subjects.append(s)
        volumes[s.id] = Volume3D(values)
    for s, vol in extras:
        subjects.append(s)
        volumes[s.id] = vol
    man = DatasetManifest(dims=DIMS, subjects=subjects)
    return man, volumes, betas


class TestResidualFit:
    def test_exact_linear_controls_leave_zero_residuals(self):
        rng = np.random.default_rng(0)
        man, volumes, _ = linear_cohort(rng)
        model = fit_residual_model(man, volumes)
        assert model.fit_subjects == [s.id for s in man.subjects]
        for s in man.subjects:
            resid = residualize(model, s, volumes[s.id])
            assert np.abs(resid.values).max() < 1e-9

    def test_recovers_planted_coefficients(self):
        rng = np.random.default_rng(1)
        man, volumes, betas = linear_cohort(rng, n_controls=12)
        model = fit_residual_model(man, volumes)
        np.testing.assert_allclose(model.betas, betas, rtol=1e-8, atol=1e-10)

    def test_off_model_signal_survives_residualization(self):
        rng = np.random.default_rng(2)
        delta = rng.standard_normal(DIMS).astype(np.float32)
        ad = make_subject(99, "AD", 75, "F", 1.5, 3.0)
        man, volumes, betas = linear_cohort(rng, extras=[])
        row = np.asarray(ad.covariate_row())
        base = np.tensordot(row, betas, axes=([0], [0])).astype(np.float32)
        man.subjects.append(ad)
        volumes[ad.id] = Volume3D(base + delta)
        model = fit_residual_model(man, volumes)
        assert ad.id not in model.fit_subjects
        resid = residualize(model, ad, volumes[ad.id])
        np.testing.assert_allclose(resid.values, delta, atol=1e-5)

    def test_residuals_are_orthogonal_to_design(self):
        rng = np.random.default_rng(3)
        man, volumes, _ = linear_cohort(rng, n_controls=10)
        # overwrite with noise so the fit is not exact
        for s in man.subjects:
            volumes[s.id] = Volume3D(rng.standard_normal(DIMS).astype(np.float32))
        model = fit_residual_model(man, volumes)
        design = np.array([s.covariate_row() for s in man.subjects])
        resid = np.stack([residualize(model, s, volumes[s.id]).values.reshape(-1) for s in man.subjects])
        cross = design.T @ resid.astype(np.float64)
        scale = np.linalg.norm(design, axis=0)[:, None] * np.linalg.norm(resid) + 1e-30
        assert np.abs(cross / scale).max() < 1e-6

    def test_fit_restricted_to_listed_subjects(self):
        rng = np.random.default_rng(4)
        man, volumes, _ = linear_cohort(rng, n_controls=9)
        keep = [s.id for s in man.subjects[:7]]
        model = fit_residual_model(man, volumes, subject_ids=keep)
        assert model.fit_subjects == keep

    def test_too_few_controls(self):
        rng = np.random.default_rng(5)
        man, volumes, _ = linear_cohort(rng, n_controls=8)
        with pytest.raises(ValidationError):
            fit_residual_model(man, volumes, subject_ids=[s.id for s in man.subjects[:5]])

    def test_constant_column_is_reported_as_collinear(self):
        rng = np.random.default_rng(6)
        man, volumes, _ = linear_cohort(rng, n_controls=8)
        same_fs = [
            SubjectRecord(s.id, s.label, s.age, s.gender, s.tiv, 3.0, s.volume_path)
            for s in man.subjects
        ]
        man = DatasetManifest(dims=DIMS, subjects=same_fs)
        with pytest.raises(RankDeficientError) as err:
            fit_residual_model(man, volumes)
        assert "field_strength" in str(err.value)

    def test_single_gender_cohort_is_rank_deficient(self):
        rng = np.random.default_rng(7)
        man, volumes, _ = linear_cohort(rng, n_controls=8)
        males = [
            SubjectRecord(s.id, s.label, s.age, "M", s.tiv, s.field_strength, s.volume_path)
            for s in man.subjects
        ]
        man = DatasetManifest(dims=DIMS, subjects=males)
        with pytest.raises(RankDeficientError) as err:
            fit_residual_model(man, volumes)
        assert "gender" in str(err.value)

    def test_dim_mismatch_is_rejected(self):
        rng = np.random.default_rng(8)
        man, volumes, _ = linear_cohort(rng)
        sub = man.subjects[0]
        with pytest.raises(DimMismatchError):
            residualize(
                fit_residual_model(man, volumes),
                sub,
                Volume3D(np.zeros((2, 2, 2), dtype=np.float32)),
            )


class TestResidualStorage:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        man, volumes, _ = linear_cohort(rng)
        model = fit_residual_model(man, volumes)
        path = tmp_path / "resid.voxw"
        save_residual_model(model, path)
        loaded = load_residual_model(path)
        assert loaded.dims == model.dims
        assert loaded.fit_subjects == model.fit_subjects
        # persisted as float32 planes
        np.testing.assert_allclose(loaded.betas, model.betas, rtol=1e-6, atol=1e-6)

    def test_missing_sidecar(self, tmp_path):
        rng = np.random.default_rng(11)
        man, volumes, _ = linear_cohort(rng)
        model = fit_residual_model(man, volumes)
        path = tmp_path / "resid.voxw"
        save_residual_model(model, path)
        (tmp_path / "resid.json").unlink()
        with pytest.raises(MissingInputError):
            load_residual_model(path)

    def test_wrong_plane_order(self, tmp_path):
        rng = np.random.default_rng(12)
        man, volumes, _ = linear_cohort(rng)
        save_residual_model(fit_residual_model(man, volumes), tmp_path / "resid.voxw")
        sidecar = tmp_path / "resid.json"
        sidecar.write_text(sidecar.read_text().replace("age", "dose"))
        with pytest.raises(ValidationError):
            load_residual_model(tmp_path / "resid.voxw")

    def test_sidecar_dims_must_match_payload(self, tmp_path):
        rng = np.random.default_rng(13)
        man, volumes, _ = linear_cohort(rng)
        save_residual_model(fit_residual_model(man, volumes), tmp_path / "resid.voxw")
        sidecar = tmp_path / "resid.json"
        doc = json.loads(sidecar.read_text())
        doc["dims"][2] += 1
        sidecar.write_text(json.dumps(doc))
        with pytest.raises(DimMismatchError):
            load_residual_model(tmp_path / "resid.voxw")


def label_cohort(counts: dict[str, int]) -> DatasetManifest:
    subjects = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            subjects.append(make_subject(i, label, 70, "M", 1.5, 3.0))
            i += 1
    return DatasetManifest(dims=DIMS, subjects=subjects)


class TestStratifiedKfold:
    def test_folds_partition_the_cohort(self):
        man = label_cohort({"NC": 7, "MCI": 7, "AD": 7})
        split = stratified_kfold(man, k=5, seed=0)
        all_ids = {s.id for s in man.subjects}
        assert set(split.assignments) == all_ids
        for fold in range(5):
            val = set(split.val_ids(fold))
            train = set(split.train_ids(fold))
            assert val | train == all_ids
            assert not val & train

    def test_per_class_counts_are_balanced(self):
        man = label_cohort({"NC": 7, "MCI": 6, "AD": 9})
        split = stratified_kfold(man, k=4, seed=3)
        by_label = {s.id: s.label for s in man.subjects}
        for label in ("NC", "MCI", "AD"):
            counts = [
                sum(1 for sid in split.val_ids(f) if by_label[sid] == label)
                for f in range(4)
            ]
            assert max(counts) - min(counts) <= 1

    def test_same_seed_reproduces_assignment(self):
        man = label_cohort({"NC": 10, "AD": 10})
        a = stratified_kfold(man, k=5, seed=42)
        b = stratified_kfold(man, k=5, seed=42)
        assert a.assignments == b.assignments
        c = stratified_kfold(man, k=5, seed=43)
        assert a.assignments != c.assignments

    def test_val_and_train_ids_are_sorted(self):
        man = label_cohort({"NC": 8, "AD": 8})
        split = stratified_kfold(man, k=4, seed=1)
        for f in range(4):
            assert split.val_ids(f) == sorted(split.val_ids(f))
            assert split.train_ids(f) == sorted(split.train_ids(f))

    def test_rejects_small_classes_and_bad_k(self):
        man = label_cohort({"NC": 3, "AD": 8})
        with pytest.raises(ValidationError):
            stratified_kfold(man, k=4, seed=0)
        with pytest.raises(ValidationError):
            stratified_kfold(man, k=1, seed=0)

    def test_fold_index_bounds(self):
        man = label_cohort({"NC": 4, "AD": 4})
        split = stratified_kfold(man, k=2, seed=0)
        with pytest.raises(ValidationError):
            split.val_ids(2)
        with pytest.raises(ValidationError):
            split.train_ids(-1)

    def test_save_load_round_trip(self, tmp_path):
        man = label_cohort({"NC": 6, "AD": 6})
        split = stratified_kfold(man, k=3, seed=9)
        path = tmp_path / "split.json"
        save_split(split, path)
        loaded = load_split(path)
        assert loaded == split

    def test_load_rejects_malformed_files(self, tmp_path):
        path = tmp_path / "split.json"
        with pytest.raises(MissingInputError):
            load_split(path)
        path.write_text('{"seed": 1, "fold_count": 2}')
        with pytest.raises(ValidationError):
            load_split(path)
        path.write_text('{"seed": 1, "fold_count": 2, "assignments": {}}')
        with pytest.raises(ValidationError):
            load_split(path)
        path.write_text('{"seed": 1, "fold_count": 2, "assignments": {"a": 5}}')
        with pytest.raises(ValidationError):
            load_split(path)


class TestAugmentation:
    def make_items(self, rng, n=3):
        return [
            (f"s{i}", i % 2, Volume3D(rng.standard_normal((6, 6, 6)).astype(np.float32)))
            for i in range(n)
        ]

    def test_level_one_keeps_originals_only(self):
        rng = np.random.default_rng(1)
        items = self.make_items(rng)
        out = make_augmented_training_set(items, level=1)
        assert [(s.subject_id, s.label, s.shift) for s in out] == [
            ("s0", 0, (0, 0, 0)),
            ("s1", 1, (0, 0, 0)),
            ("s2", 0, (0, 0, 0)),
        ]
        for sample, (_, _, vol) in zip(out, items):
            np.testing.assert_array_equal(sample.volume.values, vol.values)

    def test_level_seven_emits_all_shifts_per_subject(self):
        rng = np.random.default_rng(2)
        items = self.make_items(rng, n=2)
        out = make_augmented_training_set(items, level=7)
        assert len(out) == 14
        shifts = [s.shift for s in out[:7]]
        assert shifts == [(0, 0, 0)] + AUGMENT_SHIFTS
        assert all(s.subject_id == "s0" for s in out[:7])
        assert all(s.subject_id == "s1" for s in out[7:])

    def test_intermediate_level_prefix(self):
        rng = np.random.default_rng(3)
        items = self.make_items(rng, n=1)
        out = make_augmented_training_set(items, level=3)
        assert [s.shift for s in out] == [(0, 0, 0), (-2, 0, 0), (2, 0, 0)]

    def test_shifted_copies_match_shift_volume(self):
        rng = np.random.default_rng(4)
        items = self.make_items(rng, n=1)
        out = make_augmented_training_set(items, level=7)
        for sample in out[1:]:
            want = shift_volume(items[0][2], *sample.shift)
            np.testing.assert_array_equal(sample.volume.values, want.values)

    def test_subject_ids_survive_for_leak_checks(self):
        rng = np.random.default_rng(5)
        items = self.make_items(rng, n=4)
        out = make_augmented_training_set(items, level=4)
        assert {s.subject_id for s in out} == {sid for sid, _, _ in items}

    @pytest.mark.parametrize("level", [0, 8])
    def test_rejects_out_of_range_level(self, level):
        rng = np.random.default_rng(6)
        with pytest.raises(ValidationError):
            make_augmented_training_set(self.make_items(rng, n=1), level=level)
