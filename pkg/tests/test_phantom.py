"""
Tests for the phantom cohort generator, the manifest reader and seeding
"""
import json
import os

import numpy as np
import pytest

from normsynth.models.errors import ContractError, SchemaError, VolumeIOError
from normsynth.models.volume import Contrast, load_mask, load_volume
from normsynth.services.phantom import (
    DEFAULT_TISSUE_MEANS,
    Corruption,
    PhantomSpec,
    generate_cohort,
    write_cohort,
)
from normsynth.services.tissue import Tissue
from normsynth.utils.manifest import load_manifest
from normsynth.utils.seeding import derive_seed, stage_rng


def test_clean_cohort_matches_tissue_means():
    spec = PhantomSpec(n_subjects=2, dims=(24, 24, 24), noise_sigma=0.0,
                       gain_range=(1.0, 1.0), gamma_range=(1.0, 1.0), seed=5)
    for subject in generate_cohort(spec):
        for contrast in (Contrast.T1, Contrast.T2, Contrast.FLAIR):
            volume = subject.volumes[contrast]
            for tissue in Tissue:
                inside = subject.truth[tissue].data
                expected = DEFAULT_TISSUE_MEANS[contrast.value][tissue.value]
                np.testing.assert_allclose(volume.data[inside], expected, rtol=1e-12)
            assert np.all(volume.data[~subject.brain.data] == 0.0)


def test_truth_partitions_brain(small_cohort):
    for subject in small_cohort:
        labels = sum(subject.truth[t].data.astype(int) for t in Tissue)
        np.testing.assert_array_equal(labels, subject.brain.data.astype(int))
        assert subject.truth[Tissue.CSF].count > 0
        wm = subject.truth[Tissue.WM].count
        assert wm > subject.truth[Tissue.GM].count
        assert wm > subject.truth[Tissue.CSF].count


def test_cohort_is_deterministic(small_spec, small_cohort):
    again = generate_cohort(small_spec, jobs=3)
    for first, second in zip(small_cohort, again):
        assert first.subject_id == second.subject_id
        for contrast in first.volumes:
            np.testing.assert_array_equal(first.volumes[contrast].data, second.volumes[contrast].data)


def test_subjects_are_co_registered_but_distinct(small_cohort):
    first, second = small_cohort[0], small_cohort[1]
    assert first.volumes[Contrast.T1].dims == second.volumes[Contrast.T1].dims
    assert not np.array_equal(first.brain.data, second.brain.data)
    overlap = np.count_nonzero(first.brain.data & second.brain.data)
    assert overlap > 0.8 * first.brain.count


def test_gains_spread_wm_means():
    spec = PhantomSpec(n_subjects=18, dims=(24, 24, 24), seed=0)
    wm_means = [s.volumes[Contrast.T1].data[s.truth[Tissue.WM].data].mean() for s in generate_cohort(spec)]
    assert max(wm_means) / min(wm_means) >= 1.5


def test_outlier_gm_sits_at_cohort_wm():
    spec = PhantomSpec(n_subjects=6, dims=(24, 24, 24), noise_sigma=0.0, outlier=True, seed=2)
    cohort = generate_cohort(spec)
    outlier = cohort[-1]
    assert outlier.outlier and not any(s.outlier for s in cohort[:-1])

    for contrast in (Contrast.T1, Contrast.T2, Contrast.FLAIR):
        cohort_wm = np.mean([s.volumes[contrast].data[s.truth[Tissue.WM].data].mean() for s in cohort[:-1]])
        outlier_gm = outlier.volumes[contrast].data[outlier.truth[Tissue.GM].data].mean()
        assert outlier_gm == pytest.approx(cohort_wm, rel=1e-9)
        assert outlier.corruption[contrast].gamma == 0.6


def test_corruption_transform():
    corruption = Corruption(gain=2.0, gamma=1.0, offset=5.0)
    np.testing.assert_allclose(corruption.apply(np.array([100.0, 1000.0])), [205.0, 2005.0])
    compressed = Corruption(gain=1.0, gamma=0.5, offset=0.0)
    assert compressed.apply(np.array([250.0]))[0] == pytest.approx(500.0)


@pytest.mark.parametrize('kwargs', [
    {'n_subjects': 0},
    {'dims': (8, 8, 8)},
    {'gain_range': (2.0, 1.0)},
    {'noise_sigma': -1.0},
    {'outlier': True, 'n_subjects': 1},
    {'tissue_means': {'T1': {'CSF': 900.0, 'GM': 600.0, 'WM': 250.0},
                      'T2': DEFAULT_TISSUE_MEANS['T2'], 'FLAIR': DEFAULT_TISSUE_MEANS['FLAIR']}},
])
def test_invalid_spec(kwargs):
    with pytest.raises(ContractError):
        PhantomSpec(**kwargs)


def test_written_cohort_loads(small_cohort, cohort_manifest):
    manifest = load_manifest(cohort_manifest)
    assert manifest.train == ('sub-00', 'sub-01', 'sub-02')
    assert manifest.test == ('sub-03', 'sub-04', 'sub-05')
    assert manifest.split_of('sub-04') == 'test'

    t1 = load_volume(manifest.volume_path('sub-00', 'T1'))
    assert t1.contrast == Contrast.T1
    np.testing.assert_array_equal(t1.data, small_cohort[0].volumes[Contrast.T1].data)
    np.testing.assert_array_equal(load_mask(manifest.brain_path('sub-00')).data, small_cohort[0].brain.data)
    assert os.path.isfile(manifest.truth_path('sub-00', 'WM'))
    assert manifest.truth_path('sub-00', 'lesion') is None

    with open(cohort_manifest) as f:
        payload = json.load(f)
    assert payload['spec']['n_subjects'] == 6
    assert set(payload['subjects']['sub-01']['corruption']) == {'T1', 'T2', 'FLAIR'}


def test_write_cohort_custom_split(tmp_path, small_cohort):
    path = write_cohort(small_cohort[:4], tmp_path / 'cohort', n_train=1)
    manifest = load_manifest(path)
    assert manifest.train == ('sub-00',)
    assert len(manifest.test) == 3
    with pytest.raises(ContractError):
        write_cohort(small_cohort[:2], tmp_path / 'bad', n_train=3)


def _write_manifest(tmp_path, **changes):
    payload = {
        'format': 'normsynth-cohort',
        'version': 1,
        'subjects': {'a': {'T1': 'a.nii.gz', 'brain': 'a_brain.nii.gz'},
                     'b': {'T1': 'b.nii.gz', 'brain': 'b_brain.nii.gz'}},
        'split': {'train': ['a'], 'test': ['b']},
    }
    payload.update(changes)
    path = tmp_path / 'manifest.json'
    path.write_text(json.dumps(payload))
    return path


def test_manifest_validation(tmp_path):
    manifest = load_manifest(_write_manifest(tmp_path))
    assert manifest.volume_path('a', 'T1') == os.path.join(str(tmp_path), 'a.nii.gz')
    with pytest.raises(ContractError):
        manifest.volume_path('a', 'FLAIR')
    with pytest.raises(ContractError):
        manifest.entry('zzz')

    with pytest.raises(ContractError):
        load_manifest(_write_manifest(tmp_path, split={'train': ['a'], 'test': ['a']}))
    with pytest.raises(ContractError):
        load_manifest(_write_manifest(tmp_path, split={'train': [], 'test': ['a']}))
    with pytest.raises(ContractError):
        load_manifest(_write_manifest(tmp_path, split={'train': ['c'], 'test': []}))
    with pytest.raises(SchemaError):
        load_manifest(_write_manifest(tmp_path, version=7))
    with pytest.raises(SchemaError):
        load_manifest(_write_manifest(tmp_path, subjects={'a': {'T1': 'a.nii.gz'}}))
    with pytest.raises(VolumeIOError):
        load_manifest(tmp_path / 'missing.json')


def test_derive_seed_is_stable_and_keyed():
    assert derive_seed(0, 'sample', 'sub-01') == derive_seed(0, 'sample', 'sub-01')
    assert derive_seed(0, 'sample', 'sub-01') != derive_seed(0, 'sample', 'sub-02')
    assert derive_seed(0, 'sample', 'sub-01') != derive_seed(0, 'forest', 'sub-01')
    assert derive_seed(1, 'sample', 'sub-01') != derive_seed(0, 'sample', 'sub-01')
    assert 0 <= derive_seed(123, 'bootstrap') < 2 ** 32

    np.testing.assert_array_equal(stage_rng(3, 'x').random(5), stage_rng(3, 'x').random(5))
