"""
Tests for patch sampling, the polynomial and forest regressors and prediction
"""
import logging

import numpy as np
import pytest

from normsynth.models.errors import ContractError, EmptyMaskError, SchemaError, VolumeIOError
from normsynth.models.regression_model import (
    Forest,
    PatchSpec,
    RegressionKind,
    RegressionModel,
    RegressionTree,
    TrainingSet,
    load_regression_model,
    save_regression_model,
)
from normsynth.models.volume import Mask, Volume
from normsynth.services.synth import (
    interior_mask,
    poly_fit,
    polynomial_powers,
    predict_volume,
    rf_fit,
    sample_patches,
    sample_training_set,
)


@pytest.fixture
def source(rng):
    return Volume(rng.uniform(0.0, 2.0, size=(16, 16, 16)))


@pytest.fixture
def seven_patch_set(source):
    brain = Mask.full(source.dims)
    return sample_patches(source, source, brain, PatchSpec.six_neighbors(), n=3000, seed=3)


def test_patch_layouts():
    six = PatchSpec.six_neighbors()
    assert six.size == 7
    assert six.offsets[0] == (0, 0, 0)
    assert six.radius == (1, 1, 1)

    primary = PatchSpec.primary_directions()
    assert primary.size == 25
    assert primary.radius == (7, 7, 7)


def test_patch_spec_validation():
    with pytest.raises(ContractError):
        PatchSpec(((0, 0, 0), (1, 0, 0), (1, 0, 0)))
    with pytest.raises(ContractError):
        PatchSpec(((1, 0, 0), (0, 1, 0)))


def test_interior_mask():
    inside = interior_mask((5, 5, 5), PatchSpec.six_neighbors())
    assert inside.sum() == 27
    assert not interior_mask((5, 5, 5), PatchSpec.primary_directions()).any()


def test_sample_uses_all_eligible_voxels(caplog):
    volume = Volume(np.arange(125.0).reshape(5, 5, 5))
    with caplog.at_level(logging.WARNING):
        ts = sample_patches(volume, volume, Mask.full(volume.dims), PatchSpec.six_neighbors(), n=100)
    assert ts.n_samples == 27
    assert ts.n_features == 7
    assert 'eligible' in caplog.text


def test_sample_features_read_the_patch(source):
    ts = sample_patches(source, source, Mask.full(source.dims), PatchSpec.six_neighbors(), n=50, seed=1)
    for row, (i, j, k) in zip(ts.features, ts.coordinates):
        assert row[0] == source.data[i, j, k]
        assert row[1] == source.data[i + 1, j, k]
        assert row[2] == source.data[i - 1, j, k]
        assert row[5] == source.data[i, j, k + 1]
    np.testing.assert_array_equal(ts.targets, ts.features[:, 0])


def test_sample_is_deterministic(source):
    brain = Mask.full(source.dims)
    spec = PatchSpec.six_neighbors()
    first = sample_patches(source, source, brain, spec, n=200, seed=11)
    again = sample_patches(source, source, brain, spec, n=200, seed=11)
    other = sample_patches(source, source, brain, spec, n=200, seed=12)
    np.testing.assert_array_equal(first.coordinates, again.coordinates)
    assert not np.array_equal(first.coordinates, other.coordinates)
    assert len({tuple(c) for c in first.coordinates}) == 200


def test_sample_empty_mask(source):
    with pytest.raises(EmptyMaskError):
        sample_patches(source, source, Mask(np.zeros(source.dims, dtype=bool)), PatchSpec.six_neighbors())


def test_training_set_concatenates_in_order(source):
    brain = Mask.full(source.dims)
    items = [('a', source, source, brain), ('b', source, source, brain)]
    ts = sample_training_set(items, PatchSpec.six_neighbors(), n=40, seed=5)
    assert ts.n_samples == 80
    assert ts.image_ids[:40] == ('a',) * 40
    assert ts.image_ids[40:] == ('b',) * 40


def test_polynomial_powers():
    assert polynomial_powers(7, 3).shape == (120, 7)
    assert polynomial_powers(7, 3, per_feature=True).shape == (22, 7)
    assert np.all(polynomial_powers(7, 3)[0] == 0)


def test_poly_recovers_linear_map(seven_patch_set):
    ts = seven_patch_set
    ts = TrainingSet(features=ts.features, targets=2.0 * ts.features[:, 0] + 1.0)
    model = poly_fit(ts)

    assert model.kind == RegressionKind.POLY3
    assert model.poly.n_terms == 120
    assert np.max(np.abs(model.predict(ts.features) - ts.targets)) < 1e-6
    assert model.train_r2 == pytest.approx(1.0)


def test_poly_recovers_quadratic(seven_patch_set):
    ts = seven_patch_set
    x = ts.features
    ts = TrainingSet(features=x, targets=x[:, 0] ** 2 - x[:, 1] * x[:, 3])
    model = poly_fit(ts)
    assert np.max(np.abs(model.predict(x) - ts.targets)) < 1e-6


def test_poly_per_feature(seven_patch_set):
    ts = seven_patch_set
    ts = TrainingSet(features=ts.features, targets=ts.features[:, 2] ** 3)
    model = poly_fit(ts, per_feature=True)
    assert model.poly.n_terms == 22
    assert np.max(np.abs(model.predict(ts.features) - ts.targets)) < 1e-6


def test_poly_on_noise_still_fits(rng):
    ts = TrainingSet(features=rng.normal(size=(1000, 7)), targets=rng.normal(size=1000))
    model = poly_fit(ts)
    assert np.isfinite(model.train_r2)
    assert np.all(np.isfinite(model.poly.coefficients))


def test_poly_needs_more_samples_than_terms(rng):
    ts = TrainingSet(features=rng.normal(size=(100, 7)), targets=rng.normal(size=100))
    with pytest.raises(ContractError):
        poly_fit(ts)


def test_forest_on_constant_targets(rng):
    ts = TrainingSet(features=rng.normal(size=(500, 25)), targets=np.full(500, 5.0))
    model = rf_fit(ts, trees=10, seed=0)
    predictions = model.predict(rng.normal(size=(100, 25)))
    np.testing.assert_allclose(predictions, 5.0, rtol=1e-12)


def test_forest_learns_step(rng):
    def step_set(n):
        x = rng.uniform(0.0, 1.0, size=(n, 25))
        return TrainingSet(features=x, targets=np.where(x[:, 0] > 0.5, 100.0, 0.0))

    train, held_out = step_set(10000), step_set(2000)
    model = rf_fit(train, seed=1, jobs=2)
    mse = np.mean((model.predict(held_out.features) - held_out.targets) ** 2)
    assert mse < 0.05 * np.var(held_out.targets)


def test_forest_respects_min_leaf(rng):
    ts = TrainingSet(features=rng.normal(size=(400, 25)), targets=rng.normal(size=400))
    model = rf_fit(ts, trees=5, min_leaf=5, seed=2)
    for tree in model.forest.trees:
        assert np.all(tree.n_samples[tree.leaves] >= 5)


def test_forest_is_deterministic(rng):
    ts = TrainingSet(features=rng.normal(size=(600, 25)), targets=rng.normal(size=600))
    first = rf_fit(ts, trees=8, seed=42, jobs=1)
    again = rf_fit(ts, trees=8, seed=42, jobs=4)
    for a, b in zip(first.forest.trees, again.forest.trees):
        np.testing.assert_array_equal(a.thresholds, b.thresholds)
        np.testing.assert_array_equal(a.values, b.values)


def test_forest_needs_samples(rng):
    ts = TrainingSet(features=rng.normal(size=(9, 25)), targets=rng.normal(size=9))
    with pytest.raises(ContractError):
        rf_fit(ts, min_leaf=5)


def test_single_leaf_forest_predicts_constant():
    leaf = RegressionTree(children_left=[-1], children_right=[-1], features=[-2], thresholds=[-2.0],
                          values=[7.0], n_samples=[10])
    model = RegressionModel(kind='FOREST', patch_spec=PatchSpec.six_neighbors(), forest=Forest(trees=(leaf,)))
    source = Volume(np.random.default_rng(0).normal(size=(8, 8, 8)))
    brain = np.zeros((8, 8, 8), dtype=bool)
    brain[2:6, 2:6, 2:6] = True

    out = predict_volume(model, source, Mask(brain))
    assert np.all(out.data[brain] == 7.0)
    assert np.all(out.data[~brain] == 0.0)


def test_tree_threshold_goes_left():
    tree = RegressionTree(children_left=[1, -1, -1], children_right=[2, -1, -1], features=[0, -2, -2],
                          thresholds=[0.5, -2.0, -2.0], values=[0.0, 1.0, 2.0], n_samples=[2, 1, 1])
    np.testing.assert_array_equal(tree.predict(np.array([[0.5], [0.25], [0.75]])), [1.0, 1.0, 2.0])


def test_predict_identity(seven_patch_set, source):
    ts = TrainingSet(features=seven_patch_set.features, targets=seven_patch_set.features[:, 0])
    model = poly_fit(ts)
    brain = np.zeros(source.dims, dtype=bool)
    brain[3:13, 3:13, 3:13] = True

    out = predict_volume(model, source, Mask(brain), contrast='FLAIR')
    np.testing.assert_allclose(out.data[brain], source.data[brain], atol=1e-6)
    assert np.all(out.data[~brain] == 0.0)
    assert out.contrast.value == 'FLAIR'


def test_predict_empty_mask(seven_patch_set, source):
    model = poly_fit(seven_patch_set)
    out = predict_volume(model, source, Mask(np.zeros(source.dims, dtype=bool)))
    assert np.all(out.data == 0.0)


def test_predict_zero_where_patch_leaves_volume(seven_patch_set, source, caplog):
    model = poly_fit(seven_patch_set)
    with caplog.at_level(logging.WARNING):
        out = predict_volume(model, source, Mask.full(source.dims))
    assert out.data[0, 5, 5] == 0.0
    assert out.data[5, 5, 15] == 0.0
    assert 'outside the volume' in caplog.text


def test_poly_model_file(tmp_path, seven_patch_set):
    model = poly_fit(seven_patch_set, normalization='fcm')
    path = tmp_path / 'poly.json'
    save_regression_model(model, path)
    loaded = load_regression_model(path)

    assert loaded.normalization == 'fcm'
    np.testing.assert_array_equal(loaded.poly.coefficients, model.poly.coefficients)
    np.testing.assert_array_equal(loaded.predict(seven_patch_set.features), model.predict(seven_patch_set.features))


def test_forest_model_file(tmp_path, rng):
    ts = TrainingSet(features=rng.normal(size=(300, 25)), targets=rng.normal(size=300))
    model = rf_fit(ts, trees=4, seed=9)
    path = tmp_path / 'rf.npz'
    save_regression_model(model, path)
    loaded = load_regression_model(path)

    assert loaded.kind == RegressionKind.FOREST
    assert len(loaded.forest.trees) == 4
    x = rng.normal(size=(50, 25))
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))


def test_regression_model_file_errors(tmp_path):
    with pytest.raises(VolumeIOError):
        load_regression_model(tmp_path / 'missing.json')
    path = tmp_path / 'bad.json'
    path.write_text('{"format": "something-else"}')
    with pytest.raises(SchemaError):
        load_regression_model(path)
