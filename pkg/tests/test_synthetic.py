"""Synthetic cohort generator: determinism, label rule, region invariants."""

import numpy as np
import pytest

from voxrel.errors import ValidationError
from voxrel.manifest import load_manifest
from voxrel.metrics import pearson, region_intensity_sum
from voxrel.synthetic import (
    SynthConfig,
    anatomy_template,
    compose_subject_volume,
    covariate_fields,
    generate_synthetic_cohort,
    lesion_mask,
)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    cfg = SynthConfig(n_subjects=60, dims=(16, 16, 16), seed=9)
    man = generate_synthetic_cohort(cfg, out)
    return cfg, man


class TestGenerator:
    def test_deterministic_bytes(self, tmp_path):
        cfg = SynthConfig(n_subjects=5, dims=(10, 10, 10), seed=3)
        m1 = generate_synthetic_cohort(cfg, tmp_path / "a")
        m2 = generate_synthetic_cohort(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
        for s in m1.subjects:
            b1 = (tmp_path / "a" / s.volume_path).read_bytes()
            b2 = (tmp_path / "b" / s.volume_path).read_bytes()
            assert b1 == b2
        m3 = generate_synthetic_cohort(SynthConfig(n_subjects=5, dims=(10, 10, 10), seed=4), tmp_path / "c")
        assert (tmp_path / "a" / m1.subjects[0].volume_path).read_bytes() != (
            tmp_path / "c" / m3.subjects[0].volume_path
        ).read_bytes()

    def test_label_rule_matches_severity(self, cohort):
        cfg, man = cohort
        sev = man.provenance["severity"]
        for s in man.subjects:
            expected = "AD" if sev[s.id] < cfg.ad_threshold else "NC"
            assert s.label == expected

    def test_label_fraction_near_half(self, cohort):
        # P(m < 0.65) for m ~ U[0.3, 1.0] is exactly 0.5; allow sampling noise
        _, man = cohort
        frac = np.mean([s.label == "AD" for s in man.subjects])
        assert 0.25 < frac < 0.75

    def test_severity_one_leaves_region_untouched(self):
        dims = (12, 12, 12)
        cfg = SynthConfig(dims=dims)
        template = anatomy_template(dims)
        mask = lesion_mask(cfg)
        fields = covariate_fields(dims, mask.bits)
        noise = np.random.default_rng(0).normal(0, 0.01, dims)
        vol = compose_subject_volume(template, fields, mask.bits, 1.0, 70.0, 1.0, 1500.0, 3.0, noise)
        expected = template + 70.0 * fields["age"] + fields["gender"] + 1500.0 * fields["tiv"] + 3.0 * fields["field_strength"] + noise
        np.testing.assert_array_equal(vol, expected)

    def test_ad_region_deficit(self, cohort):
        cfg, man = cohort
        template = anatomy_template(cfg.dims)
        mask = man.load_mask("hippocampus")
        template_sum = float(template[mask.bits].sum())
        for s in man.subjects:
            if s.label != "AD":
                continue
            vol = man.load_volume(s.id)
            assert region_intensity_sum(vol, mask) < template_sum

    def test_severity_correlates_with_region_sum(self, cohort):
        _, man = cohort
        sev = man.provenance["severity"]
        mask = man.load_mask("hippocampus")
        sums = [region_intensity_sum(man.load_volume(s.id), mask) for s in man.subjects]
        rho = pearson([sev[s.id] for s in man.subjects], sums)
        assert rho > 0.9

    def test_covariate_fields_vanish_in_region(self, cohort):
        cfg, man = cohort
        mask = man.load_mask("hippocampus")
        fields = covariate_fields(cfg.dims, mask.bits)
        for f in fields.values():
            assert np.all(f[mask.bits] == 0.0)

    def test_mask_strictly_inside(self, cohort):
        _, man = cohort
        bits = man.load_mask("hippocampus").bits
        assert bits.any()
        assert not bits[0].any() and not bits[-1].any()
        assert not bits[:, 0].any() and not bits[:, -1].any()
        assert not bits[:, :, 0].any() and not bits[:, :, -1].any()

    def test_manifest_validates(self, cohort, tmp_path):
        _, man = cohort
        # reload from disk through the full validation path
        reloaded = load_manifest(man.root / "manifest.json")
        assert len(reloaded.subjects) == 60
        assert reloaded.masks == {"hippocampus": "masks/hippocampus.voxw"}
        for s in reloaded.subjects:
            assert s.mmse is not None and 0 <= s.mmse <= 30

    def test_too_few_subjects(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_synthetic_cohort(SynthConfig(n_subjects=3), tmp_path)

    def test_dims_too_small(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_synthetic_cohort(SynthConfig(dims=(6, 16, 16)), tmp_path)

    def test_lesion_outside_bounds(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_synthetic_cohort(SynthConfig(lesion_radius_frac=0.7), tmp_path)
