"""
Batch pipeline: phantom -> fit -> apply -> synth -> evaluate -> report

Every stage reads the cohort manifest and writes under the output directory:

    out/models/<method>_<contrast>.json          normalizer models
    out/normalized/<method>/<sid>_<contrast>.nii.gz
    out/audit/<method>.json                      fitted per-image statistics
    out/synth/models/<method>_<src>-<tgt>_<synth>.{json,npz}
    out/synth/<method>/<src>-<tgt>/<synth>/<sid>.nii.gz
    out/reports/                                 quality CSV/JSON and derived tables

Per-image work runs on a thread pool and is reduced in sorted key order so
outputs never depend on completion order or worker count.
"""
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pytz

from normsynth.config import (
    BOOTSTRAP_RESAMPLES,
    DEFAULT_CONTRAST_PAIRS,
    JOBS,
    MI_BINS,
    MSSIM_WINDOW,
    OUT_DIR,
    PATCH_SAMPLES,
    RF_MIN_LEAF,
    RF_TREES,
    SEED,
)
from normsynth.models.errors import ContractError, NormSynthError, VolumeNotFoundError
from normsynth.models.normalizer_model import (
    NormalizationMethod,
    NormalizerModel,
    NormalizerSpec,
    WmSource,
    load_model,
    save_model,
)
from normsynth.models.regression_model import PatchSpec, save_regression_model
from normsynth.models.volume import Contrast, Mask, Volume, apply_mask, load_mask, load_volume, save_volume
from normsynth.services import normalize
from normsynth.services.density import find_modes, kde_estimate, select_tissue_mode
from normsynth.services.metrics import METRICS, QualityReport, compute_metrics, slice_consistency
from normsynth.services.phantom import PhantomSpec, generate_cohort, write_cohort
from normsynth.services.ravel import csf_mask_from_t1
from normsynth.services.synth import poly_fit, predict_volume, rf_fit, sample_training_set
from normsynth.services.tissue import Tissue, class_mask, gmm_fit
from normsynth.utils.console import clean_log
from normsynth.utils.manifest import Manifest, load_manifest
from normsynth.utils.seeding import derive_seed

# Setup logging
logger = logging.getLogger(__name__)

RAW = 'raw'
ALL_METHODS = (RAW, 'zscore', 'fcm', 'gmm', 'kde', 'hm', 'whitestripe', 'ravel')
SYNTH_KINDS = ('poly', 'rf')
SCREEN_TOLERANCE = 0.05


def method_key(name) -> str:
    """Directory/file key of a method name: 'raw' or the lower-case method"""
    if str(name).lower() == RAW:
        return RAW
    return NormalizationMethod.parse(name).value.lower()


def parse_contrast_pair(text) -> Tuple[str, str]:
    if isinstance(text, (list, tuple)):
        source, target = text
    else:
        for sep in ('->', ':', '-'):
            if sep in text:
                source, target = text.split(sep, 1)
                break
        else:
            raise ContractError(f"Contrast pair must look like T1:FLAIR, got '{text}'")
    source, target = Contrast.parse(source.strip()).value, Contrast.parse(target.strip()).value
    if source == target:
        raise ContractError(f"Contrast pair needs two different contrasts, got {source}")
    return source, target


@dataclass(frozen=True)
class PipelineConfig:
    """
    Settings shared by all pipeline commands

    Attributes:
        manifest: Cohort manifest path
        out: Output directory
        methods: Normalization method keys, 'raw' always included
        contrast_pairs: (source, target) contrast names
        synth: Regressors to train ('poly', 'rf')
        wm_from: FCM/GMM/KDE WM source override ('t1' or 'self')
    """
    manifest: str
    out: str = OUT_DIR
    methods: Tuple[str, ...] = ALL_METHODS
    contrast_pairs: Tuple[Tuple[str, str], ...] = DEFAULT_CONTRAST_PAIRS
    synth: Tuple[str, ...] = SYNTH_KINDS
    seed: int = SEED
    jobs: int = JOBS
    wm_from: Optional[str] = None
    samples: int = PATCH_SAMPLES
    trees: int = RF_TREES
    min_leaf: int = RF_MIN_LEAF
    center: bool = True
    per_feature_poly: bool = False
    mssim_2d: bool = False
    mssim_window: int = MSSIM_WINDOW
    bins: int = MI_BINS
    bootstrap: int = BOOTSTRAP_RESAMPLES

    def __post_init__(self):
        keys = [method_key(m) for m in self.methods]
        if RAW not in keys:
            keys.insert(0, RAW)
        object.__setattr__(self, 'methods', tuple(dict.fromkeys(keys)))
        object.__setattr__(self, 'contrast_pairs', tuple(parse_contrast_pair(p) for p in self.contrast_pairs))
        synth = tuple(dict.fromkeys(str(s).lower() for s in self.synth))
        if not set(synth) <= set(SYNTH_KINDS):
            raise ContractError(f"Unknown synthesis model(s) {sorted(set(synth) - set(SYNTH_KINDS))}")
        object.__setattr__(self, 'synth', synth)
        if self.wm_from is not None:
            object.__setattr__(self, 'wm_from', WmSource(str(self.wm_from).lower()).value)
        if self.jobs < 1 or self.samples < 1:
            raise ContractError("jobs and samples must be positive")

    @property
    def contrasts(self) -> List[str]:
        return list(dict.fromkeys(c for pair in self.contrast_pairs for c in pair))

    @property
    def normalizers(self) -> List[str]:
        return [m for m in self.methods if m != RAW]

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def model_path(self, key: str, contrast: str, split: str = 'train') -> str:
        suffix = '' if split == 'train' else f'_{split}'
        return self.path('models', f'{key}_{contrast}{suffix}.json')

    def normalized_path(self, key: str, sid: str, contrast: str) -> str:
        return self.path('normalized', key, f'{sid}_{contrast}.nii.gz')

    def regression_path(self, key: str, pair: Tuple[str, str], kind: str) -> str:
        extension = 'json' if kind == 'poly' else 'npz'
        return self.path('synth', 'models', f'{key}_{pair[0]}-{pair[1]}_{kind}.{extension}')

    def prediction_path(self, key: str, pair: Tuple[str, str], kind: str, sid: str) -> str:
        return self.path('synth', key, f'{pair[0]}-{pair[1]}', kind, f'{sid}.nii.gz')

    def report_path(self, name: str) -> str:
        return self.path('reports', name)


def _ensure_dir(path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def run_parallel(tasks: Dict, worker: Callable, jobs: int, stage: str) -> Dict:
    """
    Run worker(*args) for every key -> args item on a thread pool

    Returns:
        key -> result, ordered by sorted key
    """
    results = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        future_to_key = {executor.submit(worker, *args): key for key, args in tasks.items()}
        for future in as_completed(future_to_key):
            results[future_to_key[future]] = future.result()
            clean_log.progress(stage, len(results), len(tasks))
    return {key: results[key] for key in sorted(results)}


def _load_subject(manifest: Manifest, sid: str, contrast: str) -> Tuple[Volume, Mask]:
    volume = load_volume(manifest.volume_path(sid, contrast), contrast=contrast)
    return volume, load_mask(manifest.brain_path(sid))


def _spec_for(config: PipelineConfig, key: str, contrast: str) -> NormalizerSpec:
    return NormalizerSpec(method=key, contrast=contrast, center=config.center, wm_from=config.wm_from)


def _ravel_sample(manifest: Manifest, sids: Sequence[str], contrast: str) -> List[normalize.SampleImage]:
    sample = []
    for sid in sids:
        volume, brain = _load_subject(manifest, sid, contrast)
        t1 = load_volume(manifest.volume_path(sid, Contrast.T1.value), contrast=Contrast.T1)
        sample.append(normalize.SampleImage(volume=volume, brain=brain, image_id=sid,
                                            csf=csf_mask_from_t1(t1, brain)))
    return sample


def cmd_fit(config: PipelineConfig) -> Dict[str, str]:
    """
    Fit one normalizer per method and contrast on the training split only

    Returns:
        '<method>_<contrast>' -> model file path
    """
    manifest = load_manifest(config.manifest)
    clean_log.stage(f"Fitting {len(config.normalizers)} normalizers on {len(manifest.train)} training subjects")
    written = {}
    for key in config.normalizers:
        for contrast in config.contrasts:
            spec = _spec_for(config, key, contrast)
            if spec.method.image_wise:
                model = NormalizerModel(spec=spec)
            elif spec.method == NormalizationMethod.RAVEL:
                model = normalize.fit(spec, _ravel_sample(manifest, manifest.train, contrast))
            else:
                sample = [_load_subject(manifest, sid, contrast) for sid in manifest.train]
                model = normalize.fit(spec, sample)
            path = _ensure_dir(config.model_path(key, contrast))
            save_model(model, path)
            written[f'{key}_{contrast}'] = path
    clean_log.success(f"Wrote {len(written)} normalizer models")
    return written


def _t1_wm_mask(method: NormalizationMethod, t1: Volume, brain: Mask) -> Mask:
    if method == NormalizationMethod.GMM:
        return class_mask(gmm_fit(t1, brain), Contrast.T1, Tissue.WM, volume=t1, brain=brain)
    return normalize.fcm_wm_mask(t1, brain, Contrast.T1)


def _apply_one(config: PipelineConfig, manifest: Manifest, model: NormalizerModel, key: str,
               sid: str, contrast: str) -> Dict[str, float]:
    source_path = manifest.volume_path(sid, contrast)
    out_path = _ensure_dir(config.normalized_path(key, sid, contrast))
    if key == RAW:
        if not os.path.isfile(source_path):
            raise VolumeNotFoundError(f"Volume file not found: {source_path}")
        shutil.copyfile(source_path, out_path)
        return {}

    volume, brain = _load_subject(manifest, sid, contrast)
    wm_mask = None
    spec = model.spec
    needs_t1 = (spec.method in (NormalizationMethod.FCM, NormalizationMethod.GMM, NormalizationMethod.KDE)
                and spec.wm_from == WmSource.T1 and volume.contrast != Contrast.T1)
    if needs_t1:
        t1 = load_volume(manifest.volume_path(sid, Contrast.T1.value), contrast=Contrast.T1)
        wm_mask = _t1_wm_mask(spec.method, t1, brain)

    result = normalize.apply(model, volume, brain, wm_mask=wm_mask, image_id=sid)
    save_volume(apply_mask(result.volume, brain), out_path)
    return result.stats


def screen_histograms(manifest: Manifest, contrast: str, sids: Sequence[str]) -> Dict[str, dict]:
    """
    Flag images whose non-WM density mode sits near the cohort's average WM peak

    The WM mode of each raw image follows the contrast rule; an image is
    flagged when another of its modes lies within 5% of the cohort average.
    """
    modes = {}
    for sid in sids:
        volume, brain = _load_subject(manifest, sid, contrast)
        modes[sid] = find_modes(kde_estimate(volume.data[brain.data]))
    wm_peaks = {}
    for sid, found in modes.items():
        try:
            wm_peaks[sid] = select_tissue_mode(found, contrast)
        except NormSynthError as e:
            logger.warning(f"Histogram screen: {sid} {contrast}: {e}")
    if not wm_peaks:
        return {}
    average = float(np.mean(list(wm_peaks.values())))

    screen = {}
    for sid in sorted(wm_peaks):
        others = [m.intensity for m in modes[sid] if m.intensity != wm_peaks[sid]]
        nearest = min(others, key=lambda x: abs(x - average)) if others else None
        flagged = nearest is not None and abs(nearest - average) <= SCREEN_TOLERANCE * abs(average)
        screen[sid] = {'wm_peak': wm_peaks[sid], 'nearest_other_mode': nearest, 'flagged': bool(flagged)}
        if flagged:
            clean_log.warning(f"{sid} {contrast}: a non-WM histogram mode sits at the cohort WM peak")
    return {'cohort_wm_peak': average, 'subjects': screen}


def cmd_apply(config: PipelineConfig) -> Dict[str, str]:
    """
    Apply every normalizer to train and test images and write the audit JSON

    RAVEL is sample-bound, so its test-split model is fit here on the test
    images alone.

    Returns:
        method key -> audit file path
    """
    manifest = load_manifest(config.manifest)
    sids = manifest.subject_ids
    clean_log.stage(f"Applying {len(config.methods)} methods to {len(sids)} subjects")

    models = {}
    for key in config.normalizers:
        for contrast in config.contrasts:
            path = config.model_path(key, contrast)
            if not os.path.isfile(path):
                raise VolumeNotFoundError(f"Normalizer model not found: {path} (run fit first)")
            models[(key, contrast, 'train')] = load_model(path)
            if key == 'ravel' and manifest.test:
                spec = _spec_for(config, key, contrast)
                test_model = normalize.fit(spec, _ravel_sample(manifest, manifest.test, contrast))
                save_model(test_model, _ensure_dir(config.model_path(key, contrast, 'test')))
                models[(key, contrast, 'test')] = test_model

    tasks = {}
    for key in config.methods:
        for sid in sids:
            for contrast in config.contrasts:
                split = manifest.split_of(sid) if key == 'ravel' else 'train'
                model = models.get((key, contrast, split))
                tasks[(key, sid, contrast)] = (config, manifest, model, key, sid, contrast)
    results = run_parallel(tasks, _apply_one, config.jobs, 'apply')

    audit_paths = {}
    stamp = datetime.now(pytz.UTC).isoformat()
    for key in config.methods:
        audit = {'method': key, 'created': stamp, 'images': {}}
        for (k, sid, contrast), stats in results.items():
            if k == key:
                audit['images'].setdefault(sid, {})[contrast] = {
                    'split': manifest.split_of(sid), **{name: float(v) for name, v in stats.items()}}
        if key == RAW:
            audit['histogram_screen'] = {c: screen_histograms(manifest, c, sids) for c in config.contrasts}
        path = _ensure_dir(config.path('audit', f'{key}.json'))
        with open(path, 'w') as f:
            json.dump(audit, f, indent=2)
        audit_paths[key] = path
    clean_log.success(f"Normalized {len(results)} images")
    return audit_paths


def _load_normalized(config: PipelineConfig, key: str, sid: str, contrast: str) -> Volume:
    path = config.normalized_path(key, sid, contrast)
    if not os.path.isfile(path):
        raise VolumeNotFoundError(f"Normalized volume not found: {path} (run apply first)")
    return load_volume(path, contrast=contrast)


def _patch_spec(kind: str) -> PatchSpec:
    return PatchSpec.six_neighbors() if kind == 'poly' else PatchSpec.primary_directions()


def _predict_one(config: PipelineConfig, manifest: Manifest, model, key: str, pair: Tuple[str, str],
                 kind: str, sid: str) -> str:
    source = _load_normalized(config, key, sid, pair[0])
    prediction = predict_volume(model, source, load_mask(manifest.brain_path(sid)), contrast=pair[1])
    path = _ensure_dir(config.prediction_path(key, pair, kind, sid))
    save_volume(prediction, path)
    return path


def cmd_synth(config: PipelineConfig) -> Dict[str, str]:
    """
    Train each regressor on the normalized training images and predict the test images

    The same voxels are sampled for every method (streams keyed by subject id).

    Returns:
        '<method>_<src>-<tgt>_<synth>' -> regression model path
    """
    manifest = load_manifest(config.manifest)
    written = {}
    for key in config.methods:
        for pair in config.contrast_pairs:
            items = []
            for sid in manifest.train:
                source = _load_normalized(config, key, sid, pair[0])
                target = _load_normalized(config, key, sid, pair[1])
                items.append((sid, source, target, load_mask(manifest.brain_path(sid))))

            for kind in config.synth:
                spec = _patch_spec(kind)
                ts = sample_training_set(items, spec, n=config.samples, seed=config.seed)
                if kind == 'poly':
                    model = poly_fit(ts, per_feature=config.per_feature_poly, normalization=key, patch_spec=spec)
                else:
                    model = rf_fit(ts, trees=config.trees, min_leaf=config.min_leaf,
                                   seed=derive_seed(config.seed, 'forest', f'{key}/{pair[0]}-{pair[1]}'),
                                   jobs=config.jobs, normalization=key, patch_spec=spec)
                path = _ensure_dir(config.regression_path(key, pair, kind))
                save_regression_model(model, path)
                written[f'{key}_{pair[0]}-{pair[1]}_{kind}'] = path

                tasks = {sid: (config, manifest, model, key, pair, kind, sid) for sid in manifest.test}
                run_parallel(tasks, _predict_one, config.jobs, f'predict {key} {pair[0]}->{pair[1]} {kind}')
                clean_log.success(f"{key} {pair[0]}->{pair[1]} {kind}: R^2={model.train_r2:.3f}, "
                                  f"{len(tasks)} test predictions")
    return written


def _evaluate_one(config: PipelineConfig, manifest: Manifest, key: str, pair: Tuple[str, str],
                  kind: str, sid: str) -> Tuple[Dict[str, float], float]:
    path = config.prediction_path(key, pair, kind, sid)
    if not os.path.isfile(path):
        raise VolumeNotFoundError(f"Prediction not found: {path} (run synth first)")
    prediction = load_volume(path)
    truth = _load_normalized(config, key, sid, pair[1])
    brain = load_mask(manifest.brain_path(sid))
    values = compute_metrics(prediction, truth, brain, bins=config.bins, two_d=config.mssim_2d,
                             window=config.mssim_window)
    return values, slice_consistency(prediction, brain)


def write_report_tables(report: QualityReport, config: PipelineConfig) -> Dict[str, str]:
    """Summary, baseline comparisons, method tests and plot data as CSV"""
    tables = {
        'summary.csv': report.summary(config.bootstrap, config.seed),
        'versus_raw.csv': report.compare_to_baseline(RAW),
        'method_tests.csv': report.method_tests(),
        'plot_data.csv': report.plot_data(config.bootstrap, config.seed),
    }
    paths = {}
    for name, table in tables.items():
        path = _ensure_dir(config.report_path(name))
        table.to_csv(path, index=False, float_format='%.12g')
        paths[name] = path
    return paths


def cmd_evaluate(config: PipelineConfig) -> QualityReport:
    """
    NCC, MSSIM and MI of every test prediction against the target contrast
    normalized by the same method, inside the brain mask
    """
    manifest = load_manifest(config.manifest)
    if not manifest.test:
        raise ContractError("The manifest has no test subjects to evaluate")
    tasks = {}
    for key in config.methods:
        for pair in config.contrast_pairs:
            pair_name = f'{pair[0]}->{pair[1]}'
            for kind in config.synth:
                for sid in manifest.test:
                    tasks[(pair_name, kind, key, sid)] = (config, manifest, key, pair, kind, sid)
    results = run_parallel(tasks, _evaluate_one, config.jobs, 'evaluate')

    records, drift = [], []
    for (pair_name, kind, key, sid), (values, consistency) in results.items():
        for metric in METRICS:
            records.append({'pair': pair_name, 'synth': kind, 'method': key, 'image_id': sid,
                            'metric': metric, 'value': values[metric]})
        drift.append({'pair': pair_name, 'synth': kind, 'method': key, 'image_id': sid,
                      'slice_consistency': consistency})
    report = QualityReport.from_records(records)

    report.to_csv(_ensure_dir(config.report_path('quality.csv')))
    report.to_json(config.report_path('quality.json'), config.bootstrap, config.seed)
    with open(_ensure_dir(config.report_path('slice_consistency.json')), 'w') as f:
        json.dump(drift, f, indent=2)
    write_report_tables(report, config)
    clean_log.success(f"Evaluated {len(results)} predictions ({len(report)} metric rows)")
    return report


def cmd_report(config: PipelineConfig) -> QualityReport:
    """Re-read quality.csv, rewrite the derived tables and print the per-method means"""
    report = QualityReport.read_csv(config.report_path('quality.csv'))
    write_report_tables(report, config)
    summary = report.summary(config.bootstrap, config.seed)
    for row in summary.itertuples(index=False):
        clean_log.info(f"{row.pair:<12} {row.synth:<5} {row.method:<12} {row.metric:<6} "
                       f"{row.mean:.4f} [{row.ci_low:.4f}, {row.ci_high:.4f}]")
    versus = report.compare_to_baseline(RAW)
    for row in versus.itertuples(index=False):
        if row.p_value < 0.05:
            clean_log.success(f"{row.pair} {row.synth} {row.method} {row.metric}: "
                              f"differs from raw (p={row.p_value:.4g}, diff={row.mean_difference:+.4f})")
    return report


def cmd_phantom(out: str, n_subjects: int = 18, dims=(64, 64, 64), seed: int = SEED, outlier: bool = False,
                jobs: int = JOBS, n_train: Optional[int] = None, **overrides) -> str:
    """Generate a phantom cohort and write it with its manifest; returns the manifest path"""
    spec = PhantomSpec(n_subjects=n_subjects, dims=tuple(dims), seed=seed, outlier=outlier, **overrides)
    clean_log.stage(f"Generating {n_subjects} phantom subjects at {spec.dims}")
    cohort = generate_cohort(spec, jobs=jobs)
    path = write_cohort(cohort, out, spec=spec, n_train=n_train)
    clean_log.success(f"Cohort manifest: {path}")
    return path


def cmd_all(config: PipelineConfig) -> QualityReport:
    cmd_fit(config)
    cmd_apply(config)
    cmd_synth(config)
    cmd_evaluate(config)
    return cmd_report(config)
