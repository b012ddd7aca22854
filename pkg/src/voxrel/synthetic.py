"""Seeded synthetic cohort generator.

Builds a cohort of smooth pseudo-anatomy volumes with a spherical target
region ("hippocampus" stand-in) whose intensity is scaled down per subject
by a severity factor m ~ U[severity_range]. Subjects with m below the
threshold are labelled AD, the rest NC, so class separation is carried
entirely by the in-region signal. Covariates (age, gender, TIV, field
strength) add exactly linear per-voxel effects outside the region, with
the coefficient fields documented in the manifest provenance; a linear
regression can therefore remove them without touching the lesion signal.

All randomness flows from one seed; equal seeds give identical cohorts,
including the bytes on disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .manifest import DatasetManifest, SubjectRecord, save_manifest
from .volume import BinaryMask, Volume3D, write_mask, write_volume


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 40
    dims: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    lesion_center: tuple[float, float, float] = (0.5, 0.42, 0.5)  # fractions of dims
    lesion_radius_frac: float = 0.16  # of min(dims)
    noise_frac: float = 0.05  # of template peak
    severity_low: float = 0.3
    severity_high: float = 1.0
    ad_threshold: float = 0.65


# peak additive effect per covariate unit; kept small against template peak 1.0
_EFFECT_AMPLITUDE = {
    "age": 0.002,  # per year
    "gender": 0.05,  # F vs M
    "tiv": 0.0001,  # per cm^3
    "field_strength": 0.02,  # per tesla
}


def _grid(dims):
    axes = [np.linspace(-1.0, 1.0, d, dtype=np.float64) for d in dims]
    return np.meshgrid(*axes, indexing="ij")


def anatomy_template(dims: tuple[int, int, int]) -> np.ndarray:
    """Fixed smooth base pattern; independent of seed and subject."""
    u, v, w = _grid(dims)
    main = np.exp(-1.5 * ((u / 0.72) ** 2 + (v / 0.78) ** 2 + (w / 0.72) ** 2))
    ridge = 0.35 * np.exp(-2.0 * (((u - 0.25) / 0.30) ** 2 + ((v + 0.20) / 0.35) ** 2 + (w / 0.45) ** 2))
    dip = -0.25 * np.exp(-2.5 * (((u + 0.30) / 0.25) ** 2 + ((v - 0.15) / 0.30) ** 2 + ((w - 0.20) / 0.30) ** 2))
    return np.maximum(main + ridge + dip, 0.0)


def covariate_fields(dims, mask_bits):
    """Smooth coefficient fields, forced to zero inside the target region."""
    u, v, w = _grid(dims)
    fields = {
        "age": _EFFECT_AMPLITUDE["age"] * 0.5 * (1.0 + w),
        "gender": _EFFECT_AMPLITUDE["gender"] * np.exp(-2.0 * ((u - 0.3) ** 2 + v**2 + w**2)),
        "tiv": _EFFECT_AMPLITUDE["tiv"] * 0.5 * (1.0 + u),
        "field_strength": _EFFECT_AMPLITUDE["field_strength"] * np.exp(-1.0 * (u**2 + (v - 0.4) ** 2 + w**2)),
    }
    for f in fields.values():
        f[mask_bits] = 0.0
    return fields


def lesion_mask(cfg: SynthConfig) -> BinaryMask:
    dims = cfg.dims
    center = np.array([f * (d - 1) for f, d in zip(cfg.lesion_center, dims)])
    radius = cfg.lesion_radius_frac * min(dims)
    lo = center - radius
    hi = center + radius
    if (lo <= 0.5).any() or (hi >= np.array(dims) - 1.5).any():
        raise ValidationError("lesion sphere is not strictly inside the volume")
    idx = np.indices(dims, dtype=np.float64)
    d2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return BinaryMask(d2 <= radius**2)


def compose_subject_volume(
    template: np.ndarray,
    fields: dict[str, np.ndarray],
    mask_bits: np.ndarray,
    severity: float,
    age: float,
    gender01: float,
    tiv: float,
    field_strength: float,
    noise: np.ndarray,
) -> np.ndarray:
    """One subject's volume: severity scales the template inside the region,
    covariates add their linear effects, noise adds on top. severity 1.0
    leaves the region untouched."""
    vol = template.copy()
    vol[mask_bits] *= severity
    vol += age * fields["age"]
    vol += gender01 * fields["gender"]
    vol += tiv * fields["tiv"]
    vol += field_strength * fields["field_strength"]
    vol += noise
    return vol


def generate_synthetic_cohort(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate volumes, region mask and manifest under out_dir."""
    if cfg.n_subjects < 4:
        raise ValidationError("need at least 4 subjects")
    if any(d < 8 for d in cfg.dims):
        raise ValidationError("each dimension must be at least 8 voxels")
    if not (cfg.severity_low < cfg.ad_threshold < cfg.severity_high):
        raise ValidationError("ad_threshold must fall inside the severity range")

    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    dims = cfg.dims
    template = anatomy_template(dims)
    mask = lesion_mask(cfg)
    fields = covariate_fields(dims, mask.bits)
    sigma = cfg.noise_frac * float(template.max())

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects
    ages = rng.uniform(60.0, 90.0, n)
    genders = rng.integers(0, 2, n)  # 0 = M, 1 = F
    tivs = rng.uniform(1300.0, 1700.0, n)
    strengths = np.where(rng.integers(0, 2, n) == 0, 1.5, 3.0)
    severities = rng.uniform(cfg.severity_low, cfg.severity_high, n)

    subjects: list[SubjectRecord] = []
    severity_by_id: dict[str, float] = {}
    for i in range(n):
        sid = f"s{i + 1:04d}"
        m = float(severities[i])
        noise = rng.normal(0.0, sigma, dims)
        vol = compose_subject_volume(
            template, fields, mask.bits, m,
            float(ages[i]), float(genders[i]), float(tivs[i]), float(strengths[i]),
            noise,
        )
        rel = f"volumes/{sid}.voxw"
        write_volume(Volume3D(vol.astype(np.float32)), out_dir / rel)
        label = "AD" if m < cfg.ad_threshold else "NC"
        mmse = int(np.clip(round(18 + 12 * m), 0, 30))
        subjects.append(
            SubjectRecord(
                id=sid,
                label=label,
                age=round(float(ages[i]), 2),
                gender="M" if genders[i] == 0 else "F",
                tiv=round(float(tivs[i]), 2),
                field_strength=float(strengths[i]),
                volume_path=rel,
                mmse=mmse,
            )
        )
        severity_by_id[sid] = m

    write_mask(mask, out_dir / "masks" / "hippocampus.voxw")

    man = DatasetManifest(
        dims=dims,
        subjects=subjects,
        masks={"hippocampus": "masks/hippocampus.voxw"},
        provenance={
            "generator": "voxrel-synth",
            "seed": cfg.seed,
            "noise_sigma": sigma,
            "ad_threshold": cfg.ad_threshold,
            "severity_range": [cfg.severity_low, cfg.severity_high],
            "severity": severity_by_id,
            "covariate_effect_peaks": dict(_EFFECT_AMPLITUDE),
            "covariate_effects_vanish_in_region": True,
            "lesion_center_frac": list(cfg.lesion_center),
            "lesion_radius_frac": cfg.lesion_radius_frac,
        },
        root=out_dir,
    )
    save_manifest(man, out_dir / "manifest.json")
    return man
