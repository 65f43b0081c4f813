"""
Patch-based cross-contrast synthesis

Voxels are sampled inside the brain mask, each described by the source
intensities at a fixed patch layout, and a regressor maps the patch to the
target-contrast intensity of its center voxel.
"""
import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.ensemble import RandomForestRegressor
from sklearn.preprocessing import PolynomialFeatures

from normsynth.config import JOBS, PATCH_SAMPLES, POLY_DEGREE, POLY_RIDGE, RF_MIN_LEAF, RF_TREES, SEED
from normsynth.models.errors import ContractError, EmptyMaskError, NumericalError
from normsynth.models.regression_model import (
    EXPANSION_CHUNK,
    Forest,
    PatchSpec,
    PolynomialTerms,
    RegressionKind,
    RegressionModel,
    RegressionTree,
    TrainingSet,
    expand_terms,
)
from normsynth.models.volume import Mask, Volume, check_dims
from normsynth.utils.seeding import derive_seed

# Setup logging
logger = logging.getLogger(__name__)

# Iterated-Tikhonov refinement steps after the ridge solve
RIDGE_REFINEMENTS = 3


def interior_mask(dims, spec: PatchSpec) -> np.ndarray:
    """Voxels whose whole patch stays inside a volume of the given dims"""
    inside = np.zeros(dims, dtype=bool)
    r = spec.radius
    if all(d > 2 * ri for d, ri in zip(dims, r)):
        inside[r[0]:dims[0] - r[0], r[1]:dims[1] - r[1], r[2]:dims[2] - r[2]] = True
    return inside


def extract_features(source: Volume, coordinates: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """n x |offsets| source intensities around each center coordinate"""
    features = np.empty((coordinates.shape[0], spec.size), dtype=np.float64)
    for j, (di, dj, dk) in enumerate(spec.offsets):
        features[:, j] = source.data[coordinates[:, 0] + di, coordinates[:, 1] + dj, coordinates[:, 2] + dk]
    return features


def sample_patches(source: Volume, target: Volume, brain: Mask, spec: PatchSpec,
                   n: int = PATCH_SAMPLES, seed: int = SEED, image_id: str = '') -> TrainingSet:
    """
    Draw n brain voxels uniformly without replacement and collect their patches

    Voxels whose patch would leave the volume are not eligible. Neighbors may
    lie outside the mask and then read the (zeroed) background.

    Args:
        source: Source-contrast image supplying the features
        target: Target-contrast image supplying the center intensity
        brain: Sampling domain
        spec: Patch layout
        n: Requested sample count; all eligible voxels are used when fewer exist
        seed: Seed of the sampling stream
    """
    check_dims(source, target)
    check_dims(source, brain)
    if n < 1:
        raise ContractError(f"Sample count must be positive, got {n}")

    eligible = brain.data & interior_mask(brain.dims, spec)
    coordinates = np.argwhere(eligible)
    available = coordinates.shape[0]
    if available == 0:
        raise EmptyMaskError(f"No brain voxels have a complete patch (radius {spec.radius})")

    if available <= n:
        if available < n:
            logger.warning(f"Only {available} eligible voxels for {n} requested samples"
                           f"{f' in {image_id}' if image_id else ''}; using all of them")
        chosen = coordinates
    else:
        rng = np.random.default_rng(seed)
        chosen = coordinates[np.sort(rng.choice(available, size=n, replace=False))]

    return TrainingSet(
        features=extract_features(source, chosen, spec),
        targets=target.data[chosen[:, 0], chosen[:, 1], chosen[:, 2]],
        seed=seed,
        image_ids=(str(image_id),) * chosen.shape[0],
        coordinates=chosen
    )


def sample_training_set(items: Sequence[Tuple[str, Volume, Volume, Mask]], spec: PatchSpec,
                        n: int = PATCH_SAMPLES, seed: int = SEED) -> TrainingSet:
    """
    Sample every (image_id, source, target, brain) item and stack the rows in input order

    Each image draws from its own stream derived from (seed, image_id).
    """
    sets = [sample_patches(source, target, brain, spec, n=n, seed=derive_seed(seed, 'sample', image_id),
                           image_id=image_id)
            for image_id, source, target, brain in items]
    return TrainingSet.concatenate(sets)


def polynomial_powers(n_features: int, degree: int = POLY_DEGREE, per_feature: bool = False) -> np.ndarray:
    """
    Exponent table of the polynomial expansion

    The full expansion holds every monomial of total degree <= degree (120
    terms for 7 features at degree 3); per_feature keeps only the constant and
    the powers of each feature on its own.
    """
    if per_feature:
        rows = [np.zeros(n_features, dtype=np.int64)]
        for j in range(n_features):
            for d in range(1, degree + 1):
                row = np.zeros(n_features, dtype=np.int64)
                row[j] = d
                rows.append(row)
        return np.vstack(rows)
    return PolynomialFeatures(degree=degree).fit(np.zeros((1, n_features))).powers_.astype(np.int64)


def r_squared(targets: np.ndarray, predictions: np.ndarray) -> float:
    total = float(np.sum((targets - targets.mean()) ** 2))
    residual = float(np.sum((targets - predictions) ** 2))
    if total == 0:
        return 1.0 if residual == 0 else float('-inf')
    return 1.0 - residual / total


def poly_fit(ts: TrainingSet, degree: int = POLY_DEGREE, per_feature: bool = False,
             ridge: float = POLY_RIDGE, normalization: str = 'raw', patch_spec: Optional[PatchSpec] = None
             ) -> RegressionModel:
    """
    Least-squares polynomial regression over the patch features

    Features are standardized, expanded, and the normal equations are
    accumulated in row chunks. The column-normalized Gram matrix gets a ridge
    of ridge * trace / p and the solution is refined a few times against the
    unregularized equations, so exact polynomial targets are recovered.

    Args:
        ts: Training set
        degree: Maximum total degree
        per_feature: Use per-feature powers instead of the full expansion
        normalization: Normalization tag recorded for audit
        patch_spec: Layout of the feature columns (7-offset default)

    Returns:
        POLY3 RegressionModel
    """
    patch_spec = patch_spec or PatchSpec.six_neighbors()
    if patch_spec.size != ts.n_features:
        raise ContractError(f"Patch has {patch_spec.size} offsets, training set {ts.n_features} features")
    powers = polynomial_powers(ts.n_features, degree, per_feature)
    p = powers.shape[0]
    if ts.n_samples <= p:
        raise ContractError(f"Polynomial fit needs more than {p} samples, got {ts.n_samples}")

    mean = ts.features.mean(axis=0)
    scale = ts.features.std(axis=0)
    scale[scale == 0] = 1.0

    gram = np.zeros((p, p), dtype=np.float64)
    moment = np.zeros(p, dtype=np.float64)
    for start in range(0, ts.n_samples, EXPANSION_CHUNK):
        stop = start + EXPANSION_CHUNK
        design = expand_terms((ts.features[start:stop] - mean) / scale, powers)
        gram += design.T @ design
        moment += design.T @ ts.targets[start:stop]

    norms = np.sqrt(np.diag(gram))
    norms[norms == 0] = 1.0
    gram_n = gram / np.outer(norms, norms)
    moment_n = moment / norms
    penalty = ridge * np.trace(gram_n) / p

    try:
        factor = cho_factor(gram_n + penalty * np.eye(p))
    except LinAlgError as e:
        raise NumericalError(f"Polynomial normal equations are singular beyond ridge repair: {e}")
    beta_n = cho_solve(factor, moment_n)
    for _ in range(RIDGE_REFINEMENTS):
        beta_n = beta_n + cho_solve(factor, moment_n - gram_n @ beta_n)
    coefficients = beta_n / norms
    if not np.all(np.isfinite(coefficients)):
        raise NumericalError("Polynomial fit produced non-finite coefficients")

    terms = PolynomialTerms(powers=powers, coefficients=coefficients, feature_mean=mean,
                            feature_scale=scale, degree=degree)
    r2 = r_squared(ts.targets, terms.predict(ts.features))
    logger.info(f"Polynomial fit: {p} terms, {ts.n_samples} samples, training R^2={r2:.4f}")
    return RegressionModel(kind=RegressionKind.POLY3, patch_spec=patch_spec, poly=terms,
                           normalization=normalization, train_r2=r2)


def _tree_from_estimator(estimator) -> RegressionTree:
    tree = estimator.tree_
    return RegressionTree(
        children_left=tree.children_left,
        children_right=tree.children_right,
        features=tree.feature,
        thresholds=tree.threshold,
        values=tree.value[:, 0, 0],
        n_samples=tree.n_node_samples
    )


def rf_fit(ts: TrainingSet, trees: int = RF_TREES, min_leaf: int = RF_MIN_LEAF, seed: int = SEED,
           jobs: int = JOBS, normalization: str = 'raw', patch_spec: Optional[PatchSpec] = None
           ) -> RegressionModel:
    """
    Random forest of variance-reducing regression trees

    Trees grow to unlimited depth on bootstrap resamples of size n, trying
    ceil(p / 3) features per split. Tree seeds follow from `seed`, so the
    forest is the same for any number of jobs.

    Args:
        ts: Training set
        trees: Number of trees
        min_leaf: Minimum training samples per leaf
        seed: Forest seed
        jobs: Worker threads used for growing trees
    """
    patch_spec = patch_spec or PatchSpec.primary_directions()
    if patch_spec.size != ts.n_features:
        raise ContractError(f"Patch has {patch_spec.size} offsets, training set {ts.n_features} features")
    if trees < 1 or min_leaf < 1:
        raise ContractError(f"Forest needs trees >= 1 and min_leaf >= 1, got {trees}/{min_leaf}")
    if ts.n_samples < 2 * min_leaf:
        raise ContractError(f"Random forest needs at least {2 * min_leaf} samples, got {ts.n_samples}")

    estimator = RandomForestRegressor(
        n_estimators=trees,
        min_samples_leaf=min_leaf,
        max_features=math.ceil(ts.n_features / 3),
        bootstrap=True,
        random_state=seed,
        n_jobs=jobs
    )
    estimator.fit(ts.features, ts.targets)

    forest = Forest(trees=tuple(_tree_from_estimator(e) for e in estimator.estimators_), min_leaf=min_leaf)
    r2 = r_squared(ts.targets, forest.predict(ts.features))
    depth = max(e.get_depth() for e in estimator.estimators_)
    logger.info(f"Random forest: {trees} trees (max depth {depth}), {ts.n_samples} samples, training R^2={r2:.4f}")
    return RegressionModel(kind=RegressionKind.FOREST, patch_spec=patch_spec, forest=forest,
                           normalization=normalization, train_r2=r2)


def predict_volume(model: RegressionModel, source: Volume, brain: Mask, contrast=None) -> Volume:
    """
    Synthesize the target contrast at every masked voxel

    Masked voxels whose patch leaves the volume are predicted as 0; the
    background is exactly 0.

    Args:
        model: Fitted regressor
        source: Source-contrast image
        brain: Prediction domain
        contrast: Contrast tag of the output (the source's when omitted)
    """
    check_dims(source, brain)
    inside = interior_mask(brain.dims, model.patch_spec)
    eligible = brain.data & inside
    skipped = int(np.count_nonzero(brain.data & ~inside))
    if skipped:
        logger.warning(f"{skipped} masked voxels have patches outside the volume; predicting 0 there")

    out = np.zeros(brain.dims, dtype=np.float64)
    coordinates = np.argwhere(eligible)
    if coordinates.shape[0]:
        out[eligible] = model.predict(extract_features(source, coordinates, model.patch_spec))
    result = source.with_data(out)
    return result.with_contrast(contrast) if contrast is not None else result
