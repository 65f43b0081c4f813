"""
End-to-end tests of the batch command line on a small phantom cohort
"""
import filecmp
import json
import os

import numpy as np
import pandas as pd
import pytest

import run
from normsynth.models.normalizer_model import load_model
from normsynth.models.volume import Mask, Volume, load_mask, load_volume, save_mask, save_volume
from normsynth.services.pipeline import PipelineConfig, cmd_fit, parse_contrast_pair
from normsynth.utils.manifest import load_manifest

METHODS = 'zscore,fcm,hm,ravel'


@pytest.fixture(scope='module')
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp('phantom')
    code = run.main(['phantom', '--out', str(out), '--subjects', '6', '--dims', '32', '32', '32', '--seed', '3'])
    assert code == 0
    return str(out / 'manifest.json')


def _pipeline_args(manifest, out):
    return ['--manifest', manifest, '--out', str(out), '--method', METHODS,
            '--contrast-pair', 'T1:FLAIR', '--synth', 'poly,rf', '--samples', '2000',
            '--trees', '5', '--bins', '16', '--bootstrap', '100', '--jobs', '2', '--seed', '11']


@pytest.fixture(scope='module')
def pipeline_run(cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp('results')
    assert run.main(['all'] + _pipeline_args(cohort, out)) == 0
    return cohort, out


def test_phantom_command_writes_manifest(cohort):
    manifest = load_manifest(cohort)
    assert len(manifest.subject_ids) == 6
    assert os.path.isfile(manifest.volume_path('sub-05', 'FLAIR'))


def test_all_writes_every_stage(pipeline_run):
    _, out = pipeline_run
    for key in ('zscore', 'fcm', 'hm', 'ravel'):
        assert (out / 'models' / f'{key}_T1.json').is_file()
        assert (out / 'audit' / f'{key}.json').is_file()
    assert (out / 'models' / 'ravel_FLAIR_test.json').is_file()
    assert (out / 'synth' / 'models' / 'fcm_T1-FLAIR_poly.json').is_file()
    assert (out / 'synth' / 'models' / 'raw_T1-FLAIR_rf.npz').is_file()
    assert (out / 'synth' / 'hm' / 'T1-FLAIR' / 'rf' / 'sub-04.nii.gz').is_file()
    for name in ('quality.csv', 'quality.json', 'summary.csv', 'versus_raw.csv',
                 'method_tests.csv', 'plot_data.csv', 'slice_consistency.json'):
        assert (out / 'reports' / name).is_file()


def test_report_has_one_row_per_combination(pipeline_run):
    _, out = pipeline_run
    frame = pd.read_csv(out / 'reports' / 'quality.csv', dtype={'image_id': str})
    assert len(frame) == 5 * 3 * 3 * 2
    assert set(frame['method']) == {'raw', 'zscore', 'fcm', 'hm', 'ravel'}
    assert set(frame['image_id']) == {'sub-03', 'sub-04', 'sub-05'}
    assert set(frame['pair']) == {'T1->FLAIR'}
    ncc = frame[frame['metric'] == 'NCC']['value']
    assert ncc.between(-1.0, 1.0).all()
    assert (frame[frame['metric'] == 'MI']['value'] >= 0).all()


def test_raw_method_copies_inputs(pipeline_run):
    manifest_path, out = pipeline_run
    manifest = load_manifest(manifest_path)
    for sid in ('sub-00', 'sub-04'):
        copied = out / 'normalized' / 'raw' / f'{sid}_FLAIR.nii.gz'
        assert filecmp.cmp(manifest.volume_path(sid, 'FLAIR'), copied, shallow=False)


def test_normalized_outputs(pipeline_run):
    manifest_path, out = pipeline_run
    manifest = load_manifest(manifest_path)
    sid = 'sub-04'
    brain = load_mask(manifest.brain_path(sid)).data
    wm = load_mask(manifest.truth_path(sid, 'WM')).data

    zscore = load_volume(out / 'normalized' / 'zscore' / f'{sid}_T1.nii.gz').data
    assert zscore[brain].mean() == pytest.approx(0.0, abs=1e-9)
    assert zscore[brain].std() == pytest.approx(1.0, abs=1e-9)
    assert np.all(zscore[~brain] == 0.0)

    for contrast in ('T1', 'FLAIR'):
        fcm = load_volume(out / 'normalized' / 'fcm' / f'{sid}_{contrast}.nii.gz').data
        assert fcm[wm].mean() == pytest.approx(1000.0, rel=0.02)


def test_fitted_models_use_training_split(pipeline_run):
    _, out = pipeline_run
    train_model = load_model(out / 'models' / 'ravel_T1.json')
    test_model = load_model(out / 'models' / 'ravel_T1_test.json')
    assert train_model.state.image_ids == ('sub-00', 'sub-01', 'sub-02')
    assert test_model.state.image_ids == ('sub-03', 'sub-04', 'sub-05')
    assert len(load_model(out / 'models' / 'hm_FLAIR.json').state.standard_values) == 11


def test_audit_records_statistics(pipeline_run):
    _, out = pipeline_run
    raw = json.loads((out / 'audit' / 'raw.json').read_text())
    assert set(raw['histogram_screen']) == {'T1', 'FLAIR'}
    fcm = json.loads((out / 'audit' / 'fcm.json').read_text())
    assert fcm['images']['sub-00']['T1']['split'] == 'train'
    assert fcm['images']['sub-04']['FLAIR']['wm_mean'] > 0


def test_synth_is_reproducible(pipeline_run):
    manifest_path, out = pipeline_run
    prediction = out / 'synth' / 'fcm' / 'T1-FLAIR' / 'rf' / 'sub-03.nii.gz'
    before = load_volume(prediction).data.copy()
    assert run.main(['synth'] + _pipeline_args(manifest_path, out)) == 0
    np.testing.assert_array_equal(load_volume(prediction).data, before)


def test_report_command(pipeline_run):
    manifest_path, out = pipeline_run
    os.remove(out / 'reports' / 'summary.csv')
    assert run.main(['report'] + _pipeline_args(manifest_path, out)) == 0
    summary = pd.read_csv(out / 'reports' / 'summary.csv')
    assert len(summary) == 5 * 3 * 2


def test_missing_manifest_flag_exits_2(capsys, tmp_path):
    assert run.main(['fit', '--out', str(tmp_path)]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload['success'] is False
    assert payload['exit_code'] == 2
    assert 'manifest' in payload['error']


def test_missing_manifest_file_exits_4(tmp_path):
    assert run.main(['fit', '--manifest', str(tmp_path / 'nope.json'), '--out', str(tmp_path)]) == 4


def test_apply_before_fit_exits_4(cohort, tmp_path):
    code = run.main(['apply', '--manifest', cohort, '--out', str(tmp_path), '--method', 'hm',
                     '--contrast-pair', 'T1:FLAIR'])
    assert code == 4


def test_unknown_method_exits_2(cohort, tmp_path):
    assert run.main(['fit', '--manifest', cohort, '--out', str(tmp_path), '--method', 'median']) == 2


def test_ravel_on_misaligned_cohort_exits_2(cohort, tmp_path, rng):
    payload = json.loads(open(cohort).read())
    root = os.path.dirname(cohort)
    for sid, entry in payload['subjects'].items():
        for key in ('T1', 'T2', 'FLAIR', 'brain'):
            entry[key] = os.path.join(root, entry[key])
    small = Volume(rng.uniform(100.0, 1000.0, size=(20, 20, 20)), contrast='T1')
    save_volume(small, tmp_path / 'small_T1.nii.gz')
    save_mask(Mask.full(small.dims), tmp_path / 'small_brain.nii.gz')
    payload['subjects']['sub-00']['T1'] = str(tmp_path / 'small_T1.nii.gz')
    payload['subjects']['sub-00']['brain'] = str(tmp_path / 'small_brain.nii.gz')
    manifest = tmp_path / 'manifest.json'
    manifest.write_text(json.dumps(payload))

    code = run.main(['fit', '--manifest', str(manifest), '--out', str(tmp_path / 'out'), '--method', 'ravel',
                     '--contrast-pair', 'T1:FLAIR'])
    assert code == 2


def test_config_file_with_flag_override(tmp_path):
    config = tmp_path / 'normsynth.json'
    config.write_text(json.dumps({'manifest': 'cohort/manifest.json', 'samples': 500, 'seed': 4,
                                  'contrast-pair': ['T1:T2'], 'unknown-key': 1}))
    args = run.build_parser().parse_args(['fit', '--config', str(config), '--seed', '9'])
    settings = run.resolve_settings(args)
    assert settings['samples'] == 500
    assert settings['seed'] == 9
    assert 'unknown_key' not in settings

    pipeline_config = run.build_pipeline_config(settings)
    assert pipeline_config.contrast_pairs == (('T1', 'T2'),)
    assert pipeline_config.methods[0] == 'raw'


def test_pipeline_config_validation():
    config = PipelineConfig(manifest='m.json', methods=('FCM', 'white-stripe'), synth=('RF',))
    assert config.methods == ('raw', 'fcm', 'whitestripe')
    assert config.synth == ('rf',)
    assert parse_contrast_pair('T1->FLAIR') == ('T1', 'FLAIR')
    with pytest.raises(ValueError):
        PipelineConfig(manifest='m.json', synth=('svm',))
    with pytest.raises(ValueError):
        parse_contrast_pair('T1:T1')


def test_fit_ignores_test_images(cohort_manifest, tmp_path):
    payload = json.loads(open(cohort_manifest).read())
    root = os.path.dirname(cohort_manifest)
    for entry in payload['subjects'].values():
        for key in ('T1', 'T2', 'FLAIR', 'brain'):
            entry[key] = os.path.join(root, entry[key])
    for sid in payload['split']['test']:
        for contrast in ('T1', 'FLAIR'):
            original = load_volume(payload['subjects'][sid][contrast])
            altered = tmp_path / f'{sid}_{contrast}.nii.gz'
            save_volume(original.with_data(3.0 * original.data + 50.0), altered)
            payload['subjects'][sid][contrast] = str(altered)
    altered_manifest = tmp_path / 'manifest.json'
    altered_manifest.write_text(json.dumps(payload))

    methods = ('zscore', 'fcm', 'hm', 'ravel')
    pair = (('T1', 'FLAIR'),)
    clean = PipelineConfig(manifest=cohort_manifest, out=str(tmp_path / 'clean'), methods=methods,
                           contrast_pairs=pair, jobs=1)
    dirty = PipelineConfig(manifest=str(altered_manifest), out=str(tmp_path / 'dirty'), methods=methods,
                           contrast_pairs=pair, jobs=1)
    written = cmd_fit(clean)
    assert cmd_fit(dirty).keys() == written.keys()

    for name in written:
        key, contrast = name.split('_')
        first = load_model(clean.model_path(key, contrast))
        second = load_model(dirty.model_path(key, contrast))
        assert first.spec == second.spec
        if key == 'hm':
            assert first.state.standard_values == second.state.standard_values
        if key == 'ravel':
            assert first.state.image_ids == ('sub-00', 'sub-01', 'sub-02')
            np.testing.assert_array_equal(first.state.basis, second.state.basis)
            np.testing.assert_array_equal(first.state.coefficients[0].data, second.state.coefficients[0].data)
