"""
Tests for the intensity normalizers and the model file format
"""
import json

import numpy as np
import pytest

from normsynth.models.errors import ContractError, NumericalError, SchemaError, VolumeIOError
from normsynth.models.normalizer_model import (
    NormalizationMethod,
    NormalizerModel,
    NormalizerSpec,
    StandardHistogram,
    WmSource,
    load_model,
    save_model,
)
from normsynth.models.volume import Contrast, Mask, Volume, masked_stats
from normsynth.services.density import landmark_percentiles
from normsynth.services.normalize import (
    apply,
    fcm_normalize,
    fcm_wm_mask,
    fit,
    gmm_normalize,
    hm_apply,
    hm_fit,
    kde_normalize,
    piecewise_linear_map,
    whitestripe_normalize,
    zscore_normalize,
)
from normsynth.services.tissue import Tissue


def _t1(subject):
    return subject.volumes[Contrast.T1], subject.brain


def test_zscore_has_zero_mean_unit_std(gaussian_volume):
    volume, brain = gaussian_volume
    out = zscore_normalize(volume, brain)
    stats = masked_stats(out, brain)
    assert stats.mean == pytest.approx(0.0, abs=1e-9)
    assert stats.std == pytest.approx(1.0, abs=1e-9)


def test_zscore_constant_image_fails():
    volume = Volume(np.full((4, 4, 4), 3.0))
    with pytest.raises(NumericalError, match="variance"):
        zscore_normalize(volume, Mask.full(volume.dims))


def test_fcm_puts_wm_mean_at_scale(small_cohort):
    volume, brain = _t1(small_cohort[0])
    result = fcm_normalize(volume, brain)
    wm = fcm_wm_mask(volume, brain)
    assert result.volume.data[wm.data].mean() == pytest.approx(1000.0, rel=1e-9)
    assert result.stats['wm_mean'] == pytest.approx(volume.data[wm.data].mean())


def test_fcm_wm_mask_matches_truth(small_cohort):
    subject = small_cohort[0]
    volume, brain = _t1(subject)
    wm = fcm_wm_mask(volume, brain)
    truth = subject.truth[Tissue.WM].data
    assert np.mean(wm.data[brain.data] == truth[brain.data]) > 0.97


@pytest.mark.parametrize('gain', [0.5, 2.0, 10.0])
def test_fcm_is_gain_invariant(small_cohort, gain):
    volume, brain = _t1(small_cohort[1])
    base = fcm_normalize(volume, brain).volume.data
    scaled = fcm_normalize(volume.with_data(volume.data * gain), brain).volume.data
    np.testing.assert_allclose(scaled, base, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize('normalize', [gmm_normalize, kde_normalize], ids=['gmm', 'kde'])
@pytest.mark.parametrize('gain', [0.5, 2.0, 10.0])
def test_wm_scaling_is_gain_invariant(small_cohort, normalize, gain):
    volume, brain = _t1(small_cohort[1])
    base = normalize(volume, brain).volume.data
    scaled = normalize(volume.with_data(volume.data * gain), brain).volume.data
    np.testing.assert_allclose(scaled, base, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize('gain', [0.5, 2.0, 10.0])
def test_hm_is_gain_invariant(small_cohort, gain):
    standard = hm_fit([_t1(s) for s in small_cohort[:3]])
    volume, brain = _t1(small_cohort[4])
    base = hm_apply(volume, brain, standard).data
    scaled = hm_apply(volume.with_data(volume.data * gain), brain, standard).data
    np.testing.assert_allclose(scaled, base, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize('scale, shift', [(0.5, 0.0), (3.0, 7.0), (10.0, -250.0)])
def test_zscore_removes_shift_and_scale(gaussian_volume, scale, shift):
    volume, brain = gaussian_volume
    base = zscore_normalize(volume, brain).data
    moved = zscore_normalize(volume.with_data(scale * volume.data + shift), brain).data
    np.testing.assert_allclose(moved, base, rtol=0, atol=1e-9)


def test_gmm_and_kde_land_near_scale(small_cohort):
    subject = small_cohort[2]
    volume, brain = _t1(subject)
    truth_wm = subject.truth[Tissue.WM].data
    for normalize in (gmm_normalize, kde_normalize):
        out = normalize(volume, brain).volume
        assert out.data[truth_wm].mean() == pytest.approx(1000.0, rel=0.05)


def test_external_wm_mask_is_used(small_cohort):
    subject = small_cohort[0]
    flair = subject.volumes[Contrast.FLAIR]
    wm = subject.truth[Tissue.WM]
    out = fcm_normalize(flair, subject.brain, wm_mask=wm).volume
    assert out.data[wm.data].mean() == pytest.approx(1000.0, rel=1e-9)


def test_hm_standard_spans_scale(small_cohort):
    sample = [_t1(s) for s in small_cohort[:3]]
    standard = hm_fit(sample)
    assert len(standard.standard_values) == 11
    assert standard.standard_values[0] == pytest.approx(1.0)
    assert standard.standard_values[-1] == pytest.approx(100.0)
    assert all(b > a for a, b in zip(standard.standard_values, standard.standard_values[1:]))


def test_hm_apply_maps_landmarks_to_standard(small_cohort):
    standard = hm_fit([_t1(s) for s in small_cohort[:3]])
    volume, brain = _t1(small_cohort[4])
    knots = landmark_percentiles(volume.data[brain.data], standard.labels).as_array()
    values = np.asarray(standard.standard_values)

    np.testing.assert_allclose(piecewise_linear_map(knots.copy(), knots, values), values, atol=1e-9)

    out = hm_apply(volume, brain, standard)
    inside = volume.data[brain.data]
    mapped = out.data[brain.data]
    order = np.argsort(inside, kind='stable')
    assert np.all(np.diff(mapped[order]) >= -1e-9)


def test_piecewise_linear_map_extends_end_slopes():
    knots = np.array([0.0, 10.0, 20.0])
    values = np.array([1.0, 2.0, 4.0])
    x = np.array([-10.0, 5.0, 30.0])
    np.testing.assert_allclose(piecewise_linear_map(x, knots, values), [0.0, 1.5, 6.0])


def _ramp(values):
    return Volume(np.asarray(values, dtype=np.float64).reshape(10, 10, 10))


def test_hm_fit_two_image_average():
    first = _ramp(np.linspace(0.0, 10.0, 1000))
    second = _ramp(np.linspace(0.0, 1.0, 1000) ** 2)
    brain = Mask.full((10, 10, 10))

    standard = hm_fit([(first, brain), (second, brain)], labels=(0, 50, 100), scale_range=(0.0, 100.0))

    second_median = ((499 / 999) ** 2 + (500 / 999) ** 2) / 2
    expected = (0.0, (50.0 + 100.0 * second_median) / 2, 100.0)
    assert standard.standard_values == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_hm_fit_identical_images_match_single(small_cohort):
    image = _t1(small_cohort[0])
    single = hm_fit([image])
    doubled = hm_fit([image, image])
    np.testing.assert_allclose(doubled.standard_values, single.standard_values, rtol=1e-15, atol=0)


def _interpolate_one(x, knots, values):
    last = len(knots) - 1
    if x < knots[0]:
        return values[0] + (x - knots[0]) * (values[1] - values[0]) / (knots[1] - knots[0])
    if x > knots[last]:
        return values[last] + (x - knots[last]) * (values[last] - values[last - 1]) / (knots[last] - knots[last - 1])
    for i in range(last):
        if knots[i] <= x <= knots[i + 1]:
            t = (x - knots[i]) / (knots[i + 1] - knots[i])
            return values[i] + t * (values[i + 1] - values[i])
    raise AssertionError(f"{x} not bracketed by {knots}")


def test_hm_apply_matches_per_voxel_interpolation(rng):
    reference = Volume(rng.gamma(4.0, 50.0, size=(8, 8, 8)))
    volume = Volume(rng.lognormal(5.0, 0.4, size=(8, 8, 8)))
    inside = np.zeros((8, 8, 8), dtype=bool)
    inside[1:7, 1:7, 1:7] = True
    brain = Mask(inside)

    standard = hm_fit([(reference, Mask.full(reference.dims))])
    out = hm_apply(volume, brain, standard)

    knots = np.percentile(volume.data[inside], standard.labels)
    values = standard.standard_values
    expected = np.array([_interpolate_one(x, knots, values) for x in volume.data.ravel()]).reshape(volume.dims)
    assert np.max(np.abs(out.data - expected)) < 1e-9


def test_hm_apply_rejects_duplicate_landmarks():
    data = np.full(1000, 5.0)
    data[:5] = [1.0, 2.0, 3.0, 4.0, 4.5]
    volume = Volume(data.reshape(10, 10, 10))
    standard = StandardHistogram(labels=(1, 10, 99), standard_values=(1.0, 10.0, 100.0))
    with pytest.raises(ContractError):
        hm_apply(volume, Mask.full(volume.dims), standard)


def test_whitestripe_unit_stripe_std(gaussian_volume):
    volume, brain = gaussian_volume
    result = whitestripe_normalize(volume, brain, contrast='T1')
    stripe = result.volume.data[result.stripe_mask.data]
    assert np.std(stripe, ddof=1) == pytest.approx(1.0, abs=1e-9)
    assert abs(stripe.mean()) < 0.25
    assert result.mu == pytest.approx(1000.0, abs=40.0)
    low, high = result.stripe
    assert low < result.mu < high


def test_whitestripe_bounds_are_cdf_quantiles(gaussian_volume):
    volume, brain = gaussian_volume
    tau = 0.05
    result = whitestripe_normalize(volume, brain, contrast='T1', tau=tau)

    values = np.sort(volume.data[brain.data])
    center = np.count_nonzero(values <= result.mu) / values.size
    low, high = np.quantile(values, [center - tau, center + tau])
    assert result.stripe == pytest.approx((low, high), abs=1e-9)
    np.testing.assert_array_equal(result.stripe_mask.data,
                                  brain.data & (volume.data > low) & (volume.data < high))


@pytest.mark.parametrize('gain', [0.5, 2.0, 10.0])
def test_whitestripe_is_gain_invariant(gaussian_volume, gain):
    volume, brain = gaussian_volume
    base = whitestripe_normalize(volume, brain).volume.data
    scaled = whitestripe_normalize(volume.with_data(volume.data * gain), brain).volume.data
    np.testing.assert_allclose(scaled, base, rtol=1e-6, atol=1e-6)


def test_whitestripe_rejects_bad_tau(gaussian_volume):
    volume, brain = gaussian_volume
    with pytest.raises(ContractError):
        whitestripe_normalize(volume, brain, tau=0.5)


def test_fit_apply_image_wise(small_cohort):
    volume, brain = _t1(small_cohort[0])
    model = fit(NormalizerSpec(method='zscore'), [(volume, brain)])
    assert model.state is None
    result = apply(model, volume, brain)
    assert result.volume.dims == volume.dims
    assert result.stats['std'] > 0


def test_fit_apply_hm(small_cohort):
    model = fit(NormalizerSpec(method='HM'), [_t1(s) for s in small_cohort[:3]])
    volume, brain = _t1(small_cohort[3])
    out = apply(model, volume, brain).volume
    assert out.data[brain.data].min() < 10.0
    assert out.data[brain.data].max() > 90.0


def test_apply_checks_contrast(small_cohort):
    subject = small_cohort[0]
    model = NormalizerModel(NormalizerSpec(method='zscore', contrast='T2'))
    with pytest.raises(ContractError):
        apply(model, subject.volumes[Contrast.T1], subject.brain)


def test_fcm_from_t1_needs_wm_mask_for_other_contrasts(small_cohort):
    subject = small_cohort[0]
    model = NormalizerModel(NormalizerSpec(method='FCM', wm_from='t1'))
    with pytest.raises(ContractError):
        apply(model, subject.volumes[Contrast.T2], subject.brain)

    wm = subject.truth[Tissue.WM]
    out = apply(model, subject.volumes[Contrast.T2], subject.brain, wm_mask=wm).volume
    assert out.data[wm.data].mean() == pytest.approx(1000.0, rel=1e-9)


def test_ravel_model_needs_state():
    spec = NormalizerSpec(method='RAVEL')
    assert spec.method == NormalizationMethod.RAVEL
    with pytest.raises(ContractError):
        NormalizerModel(spec)


def test_spec_defaults():
    assert NormalizerSpec(method='fcm').wm_from == WmSource.T1
    assert NormalizerSpec(method='kde').wm_from == WmSource.SELF
    assert NormalizerSpec(method='zscore').wm_from is None
    with pytest.raises(ContractError):
        NormalizerSpec(method='whitestripe', tau=0.7)


def test_unknown_method():
    with pytest.raises(SchemaError):
        NormalizationMethod.parse('median')
    assert NormalizationMethod.parse('white-stripe') == NormalizationMethod.WHITESTRIPE


def test_model_file_round_trip(tmp_path, small_cohort):
    model = fit(NormalizerSpec(method='HM', contrast='T1'), [_t1(s) for s in small_cohort[:3]])
    path = tmp_path / 'hm.json'
    save_model(model, path)
    loaded = load_model(path)

    assert loaded.spec == model.spec
    assert loaded.state.standard_values == model.state.standard_values

    volume, brain = _t1(small_cohort[3])
    np.testing.assert_array_equal(apply(loaded, volume, brain).volume.data,
                                  apply(model, volume, brain).volume.data)


def test_model_wrong_version(tmp_path):
    path = tmp_path / 'model.json'
    save_model(NormalizerModel(NormalizerSpec(method='zscore')), path)
    payload = json.loads(path.read_text())
    payload['schema_version'] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(SchemaError):
        load_model(path)


def test_model_bad_state(tmp_path):
    path = tmp_path / 'model.json'
    path.write_text(json.dumps({'schema_version': 1, 'method': 'HM', 'params': {}, 'state': {}}))
    with pytest.raises(SchemaError):
        load_model(path)


def test_model_missing_file(tmp_path):
    with pytest.raises(VolumeIOError):
        load_model(tmp_path / 'absent.json')
