"""
Synthetic multi-contrast brain phantoms with injected scanner variation

Every subject shares one template anatomy (an ellipsoidal brain with a
ventricle, WM core, GM shell and outer CSF) warped by a small smooth
per-subject deformation, so all contrasts and subjects are co-registered by
construction. Each acquisition is then corrupted by a monotone intensity
transform I -> g * 1000 * (I / 1000)^gamma + d.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from normsynth.config import JOBS, SEED
from normsynth.models.errors import ContractError, VolumeIOError
from normsynth.models.volume import Contrast, Mask, Volume, save_mask, save_volume
from normsynth.services.tissue import Tissue
from normsynth.utils.manifest import MANIFEST_FORMAT, MANIFEST_VERSION
from normsynth.utils.seeding import stage_rng

# Setup logging
logger = logging.getLogger(__name__)

CONTRASTS = (Contrast.T1, Contrast.T2, Contrast.FLAIR)
REFERENCE_INTENSITY = 1000.0
OUTLIER_GAMMA = 0.6

# Radii in template units: ventricle, WM core, GM shell, brain edge
VENTRICLE_RADIUS = 0.2
WM_RADIUS = 0.75
GM_RADIUS = 0.92

DEFAULT_TISSUE_MEANS = {
    'T1': {'CSF': 250.0, 'GM': 600.0, 'WM': 900.0},
    'T2': {'WM': 600.0, 'GM': 850.0, 'CSF': 1500.0},
    'FLAIR': {'CSF': 150.0, 'WM': 550.0, 'GM': 700.0},
}


@dataclass(frozen=True)
class PhantomSpec:
    """
    Cohort generation parameters

    Attributes:
        n_subjects: Number of subjects
        dims: Volume shape
        tissue_means: contrast -> tissue -> clean mean intensity
        noise_sigma: Gaussian noise standard deviation, added before corruption
        gain_range: [g_lo, g_hi], gains drawn log-uniformly
        gamma_range: Exponent range
        offset_range: Additive offset range
        deformation: Amplitude of the smooth per-subject radial warp
        seed: Cohort seed
        outlier: Compress one subject's histogram so its GM sits at the cohort WM level
        outlier_index: Which subject (default: the last)
    """
    n_subjects: int = 18
    dims: Tuple[int, int, int] = (64, 64, 64)
    tissue_means: Dict[str, Dict[str, float]] = field(default_factory=lambda: {
        c: dict(t) for c, t in DEFAULT_TISSUE_MEANS.items()})
    noise_sigma: float = 20.0
    gain_range: Tuple[float, float] = (0.5, 2.0)
    gamma_range: Tuple[float, float] = (0.9, 1.1)
    offset_range: Tuple[float, float] = (0.0, 0.0)
    deformation: float = 0.05
    seed: int = SEED
    outlier: bool = False
    outlier_index: Optional[int] = None

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ContractError(f"Cohort needs at least one subject, got {self.n_subjects}")
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ContractError(f"Phantom dims must be three sizes >= 16, got {self.dims}")
        g_lo, g_hi = self.gain_range
        if not 0 < g_lo <= g_hi:
            raise ContractError(f"Gain range must be positive and ordered, got {self.gain_range}")
        y_lo, y_hi = self.gamma_range
        if not 0 < y_lo <= y_hi:
            raise ContractError(f"Gamma range must be positive and ordered, got {self.gamma_range}")
        if self.offset_range[0] > self.offset_range[1]:
            raise ContractError(f"Offset range must be ordered, got {self.offset_range}")
        if self.noise_sigma < 0 or self.deformation < 0:
            raise ContractError("Noise and deformation must be nonnegative")
        if self.outlier and self.n_subjects < 2:
            raise ContractError("Outlier mode needs at least two subjects")
        if self.outlier_index is not None and not 0 <= self.outlier_index < self.n_subjects:
            raise ContractError(f"Outlier index {self.outlier_index} outside the cohort")

        means = self.tissue_means
        try:
            t1, t2, flair = means['T1'], means['T2'], means['FLAIR']
            ordered = (t1['CSF'] < t1['GM'] < t1['WM']
                       and t2['WM'] < t2['GM'] < t2['CSF']
                       and flair['CSF'] < min(flair['GM'], flair['WM']))
        except KeyError as e:
            raise ContractError(f"Tissue means are missing {e}")
        if not ordered:
            raise ContractError("Tissue means break the per-contrast ordering "
                                "(T1: CSF<GM<WM, T2: WM<GM<CSF, FLAIR: CSF lowest)")
        if min(v for t in means.values() for v in t.values()) <= 0:
            raise ContractError("Tissue means must be positive")
        object.__setattr__(self, 'dims', tuple(int(d) for d in self.dims))

    @property
    def resolved_outlier(self) -> Optional[int]:
        if not self.outlier:
            return None
        return self.n_subjects - 1 if self.outlier_index is None else self.outlier_index


@dataclass(frozen=True)
class Corruption:
    gain: float
    gamma: float
    offset: float

    def apply(self, intensities: np.ndarray) -> np.ndarray:
        return self.gain * REFERENCE_INTENSITY * (intensities / REFERENCE_INTENSITY) ** self.gamma + self.offset


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    subject_id: str
    volumes: Dict[Contrast, Volume]
    brain: Mask
    truth: Dict[Tissue, Mask]
    corruption: Dict[Contrast, Corruption]
    outlier: bool = False


def subject_id(index: int) -> str:
    return f"sub-{index:02d}"


def _draw_corruption(spec: PhantomSpec, index: int) -> Dict[Contrast, Corruption]:
    rng = np.random.default_rng([spec.seed, index, 0])
    draws = {}
    for contrast in CONTRASTS:
        log_gain = rng.uniform(np.log(spec.gain_range[0]), np.log(spec.gain_range[1]))
        draws[contrast] = Corruption(
            gain=float(np.exp(log_gain)),
            gamma=float(rng.uniform(*spec.gamma_range)),
            offset=float(rng.uniform(*spec.offset_range))
        )
    return draws


def _cohort_corruptions(spec: PhantomSpec) -> List[Dict[Contrast, Corruption]]:
    """Corruption per subject and contrast, with the outlier's gain solved last"""
    corruptions = [_draw_corruption(spec, i) for i in range(spec.n_subjects)]
    outlier = spec.resolved_outlier
    if outlier is None:
        return corruptions

    for contrast in CONTRASTS:
        means = spec.tissue_means[contrast.value]
        wm = np.array([means['WM']])
        cohort_wm = float(np.mean([c[contrast].apply(wm)[0]
                                   for i, c in enumerate(corruptions) if i != outlier]))
        own = corruptions[outlier][contrast]
        compressed = (means['GM'] / REFERENCE_INTENSITY) ** OUTLIER_GAMMA * REFERENCE_INTENSITY
        gain = (cohort_wm - own.offset) / compressed
        if not gain > 0:
            raise ContractError(f"Offsets leave no positive gain for the {contrast.value} outlier")
        corruptions[outlier][contrast] = Corruption(gain=float(gain), gamma=OUTLIER_GAMMA, offset=own.offset)
    logger.info(f"Subject {subject_id(outlier)} is the histogram outlier")
    return corruptions


def _template_axes(spec: PhantomSpec) -> np.ndarray:
    rng = stage_rng(spec.seed, 'template')
    return np.asarray(spec.dims, dtype=np.float64) * rng.uniform(0.36, 0.44, size=3)


def _radius_field(spec: PhantomSpec, axes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) - (d - 1) / 2.0 for d in spec.dims], indexing='ij')
    radius = np.sqrt(sum((g / a) ** 2 for g, a in zip(grids, axes)))
    if spec.deformation > 0:
        warp = gaussian_filter(rng.standard_normal(spec.dims), sigma=min(spec.dims) / 8.0)
        peak = np.abs(warp).max()
        if peak > 0:
            radius = radius + spec.deformation * warp / peak
    return radius


def generate_subject(spec: PhantomSpec, index: int, corruption: Dict[Contrast, Corruption],
                     axes: np.ndarray) -> PhantomSubject:
    """One subject: warped template anatomy, noisy tissue intensities, corrupted per contrast"""
    rng = np.random.default_rng([spec.seed, index, 1])
    radius = _radius_field(spec, axes, rng)

    brain = radius < 1.0
    wm = brain & (radius >= VENTRICLE_RADIUS) & (radius < WM_RADIUS)
    gm = brain & (radius >= WM_RADIUS) & (radius < GM_RADIUS)
    csf = brain & ~wm & ~gm
    truth = {Tissue.CSF: Mask(csf), Tissue.GM: Mask(gm), Tissue.WM: Mask(wm)}

    volumes = {}
    for contrast in CONTRASTS:
        means = spec.tissue_means[contrast.value]
        clean = np.zeros(spec.dims, dtype=np.float64)
        for tissue, mask in truth.items():
            clean[mask.data] = means[tissue.value]
        if spec.noise_sigma > 0:
            clean[brain] = np.maximum(clean[brain] + rng.normal(0.0, spec.noise_sigma, size=int(brain.sum())), 1.0)
        data = np.zeros(spec.dims, dtype=np.float64)
        data[brain] = corruption[contrast].apply(clean[brain])
        volumes[contrast] = Volume(data=data, contrast=contrast)

    return PhantomSubject(subject_id=subject_id(index), volumes=volumes, brain=Mask(brain), truth=truth,
                          corruption=corruption, outlier=index == spec.resolved_outlier)


def generate_cohort(spec: PhantomSpec, jobs: int = JOBS) -> List[PhantomSubject]:
    """
    Generate the whole cohort

    Subjects are independent and seeded by (seed, index), so the result does
    not depend on the number of worker threads.

    Returns:
        Subjects in index order
    """
    corruptions = _cohort_corruptions(spec)
    axes = _template_axes(spec)

    subjects = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        future_to_index = {
            executor.submit(generate_subject, spec, i, corruptions[i], axes): i
            for i in range(spec.n_subjects)
        }
        for future in as_completed(future_to_index):
            subjects[future_to_index[future]] = future.result()

    logger.info(f"Generated {spec.n_subjects} phantom subjects at {spec.dims}")
    return [subjects[i] for i in sorted(subjects)]


def spec_to_dict(spec: PhantomSpec) -> dict:
    data = asdict(spec)
    data['dims'] = list(spec.dims)
    for key in ('gain_range', 'gamma_range', 'offset_range'):
        data[key] = list(data[key])
    return data


def write_cohort(cohort: List[PhantomSubject], out_dir, spec: Optional[PhantomSpec] = None,
                 n_train: Optional[int] = None) -> str:
    """
    Write every subject as NIfTI plus a cohort manifest

    Args:
        cohort: Output of generate_cohort
        out_dir: Destination directory (created if missing)
        spec: Generation parameters recorded in the manifest
        n_train: Training subjects, taken first in index order (default: half)

    Returns:
        Path of manifest.json
    """
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise VolumeIOError(f"Could not create {out_dir}: {e}")

    n_train = len(cohort) // 2 if n_train is None else n_train
    if not 0 <= n_train <= len(cohort):
        raise ContractError(f"Training split of {n_train} does not fit {len(cohort)} subjects")

    subjects = {}
    for subject in cohort:
        sid = subject.subject_id
        folder = os.path.join(out_dir, sid)
        os.makedirs(folder, exist_ok=True)
        reference = subject.volumes[Contrast.T1]
        entry = {}
        for contrast, volume in subject.volumes.items():
            name = f"{sid}/{sid}_{contrast.value}.nii.gz"
            save_volume(volume, os.path.join(out_dir, name))
            entry[contrast.value] = name
        entry['brain'] = f"{sid}/{sid}_brain.nii.gz"
        save_mask(subject.brain, os.path.join(out_dir, entry['brain']), like=reference)
        entry['truth'] = {}
        for tissue, mask in subject.truth.items():
            name = f"{sid}/{sid}_{tissue.value}.nii.gz"
            save_mask(mask, os.path.join(out_dir, name), like=reference)
            entry['truth'][tissue.value] = name
        entry['corruption'] = {c.value: asdict(v) for c, v in subject.corruption.items()}
        entry['outlier'] = subject.outlier
        subjects[sid] = entry

    ids = [s.subject_id for s in cohort]
    manifest = {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'spec': spec_to_dict(spec) if spec is not None else None,
        'subjects': subjects,
        'split': {'train': ids[:n_train], 'test': ids[n_train:]},
    }
    path = os.path.join(out_dir, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Wrote {len(cohort)} subjects and manifest to {out_dir}")
    return path
