"""
Patch layouts, training sets and the fitted synthesis regressors

A RegressionModel is either a third-order polynomial over the standardized
patch features or a forest of regression trees held as flat node arrays.
POLY3 models persist as JSON, forests as a .npz container with a JSON header.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from normsynth.config import REGRESSION_FORMAT_VERSION
from normsynth.models.errors import ContractError, SchemaError, VolumeIOError

# Setup logging
logger = logging.getLogger(__name__)

TREE_LEAF = -1
EXPANSION_CHUNK = 65536

Offset = Tuple[int, int, int]


@dataclass(frozen=True)
class PatchSpec:
    """Integer 3D offsets around the center voxel, the zero offset first"""
    offsets: Tuple[Offset, ...]

    def __post_init__(self):
        offsets = tuple(tuple(int(c) for c in o) for o in self.offsets)
        if any(len(o) != 3 for o in offsets):
            raise ContractError("Patch offsets must be 3D")
        if len(set(offsets)) != len(offsets):
            raise ContractError(f"Patch offsets must be unique: {offsets}")
        if (0, 0, 0) not in offsets:
            raise ContractError("Patch offsets must include the center voxel (0, 0, 0)")
        object.__setattr__(self, 'offsets', offsets)

    @property
    def size(self) -> int:
        return len(self.offsets)

    @property
    def radius(self) -> Tuple[int, int, int]:
        """Largest absolute offset along each axis"""
        return tuple(int(r) for r in np.abs(np.asarray(self.offsets)).max(axis=0))

    @classmethod
    def six_neighbors(cls) -> 'PatchSpec':
        """Center voxel plus its six face neighbors (7 offsets)"""
        return cls.primary_directions((1,))

    @classmethod
    def primary_directions(cls, distances: Iterable[int] = (1, 3, 5, 7)) -> 'PatchSpec':
        """Center voxel plus the voxels at each distance along the six axis directions"""
        offsets = [(0, 0, 0)]
        for d in distances:
            for axis in range(3):
                for sign in (1, -1):
                    o = [0, 0, 0]
                    o[axis] = sign * int(d)
                    offsets.append(tuple(o))
        return cls(tuple(offsets))


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """
    Patch features and target intensities for regression

    Attributes:
        features: n_samples x n_features source intensities, columns in offset order
        targets: target-contrast intensity at each center voxel
        seed: RNG seed the voxels were drawn with
        image_ids: source image of each row
        coordinates: n_samples x 3 center voxel indices
    """
    features: np.ndarray
    targets: np.ndarray
    seed: int = 0
    image_ids: Tuple[str, ...] = ()
    coordinates: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if features.ndim != 2 or features.shape[0] != targets.size:
            raise ContractError(f"Features {features.shape} do not match {targets.size} targets")
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'targets', targets)

    @property
    def n_samples(self) -> int:
        return int(self.targets.size)

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @classmethod
    def concatenate(cls, sets: Sequence['TrainingSet']) -> 'TrainingSet':
        """Stack per-image sets in the order given"""
        if not sets:
            raise ContractError("Nothing to concatenate")
        widths = {s.n_features for s in sets}
        if len(widths) != 1:
            raise ContractError(f"Training sets disagree on feature count: {sorted(widths)}")
        coordinates = None
        if all(s.coordinates is not None for s in sets):
            coordinates = np.vstack([s.coordinates for s in sets])
        return cls(
            features=np.vstack([s.features for s in sets]),
            targets=np.concatenate([s.targets for s in sets]),
            seed=sets[0].seed,
            image_ids=tuple(i for s in sets for i in s.image_ids),
            coordinates=coordinates
        )


class RegressionKind(str, Enum):
    POLY3 = 'POLY3'
    FOREST = 'FOREST'


@dataclass(frozen=True, eq=False)
class PolynomialTerms:
    """
    Polynomial regressor over standardized features

    Attributes:
        powers: n_terms x n_features exponent table, row 0 the constant term
        coefficients: one coefficient per term
        feature_mean, feature_scale: standardization applied before expansion
    """
    powers: np.ndarray
    coefficients: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    degree: int = 3

    def __post_init__(self):
        powers = np.asarray(self.powers, dtype=np.int64)
        coefficients = np.asarray(self.coefficients, dtype=np.float64).ravel()
        if powers.ndim != 2 or powers.shape[0] != coefficients.size:
            raise ContractError(f"Term table {powers.shape} does not match {coefficients.size} coefficients")
        if np.any(powers < 0) or np.any(powers.sum(axis=1) > self.degree):
            raise ContractError(f"Polynomial terms must have total degree <= {self.degree}")
        object.__setattr__(self, 'powers', powers)
        object.__setattr__(self, 'coefficients', coefficients)
        object.__setattr__(self, 'feature_mean', np.asarray(self.feature_mean, dtype=np.float64))
        object.__setattr__(self, 'feature_scale', np.asarray(self.feature_scale, dtype=np.float64))

    @property
    def n_terms(self) -> int:
        return int(self.coefficients.size)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feature_mean) / self.feature_scale

    def predict(self, features: np.ndarray) -> np.ndarray:
        out = np.empty(features.shape[0], dtype=np.float64)
        for start in range(0, features.shape[0], EXPANSION_CHUNK):
            stop = start + EXPANSION_CHUNK
            out[start:stop] = expand_terms(self.standardize(features[start:stop]), self.powers) @ self.coefficients
        return out


def expand_terms(z: np.ndarray, powers: np.ndarray) -> np.ndarray:
    """Design matrix whose column t is prod_j z[:, j] ** powers[t, j]"""
    design = np.ones((z.shape[0], powers.shape[0]), dtype=np.float64)
    for t, row in enumerate(powers):
        for j in np.flatnonzero(row):
            design[:, t] *= z[:, j] ** row[j]
    return design


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """
    One binary regression tree as flat node arrays

    Node i splits on features[i] <= thresholds[i] (left) unless
    children_left[i] == TREE_LEAF, in which case values[i] is its prediction.
    """
    children_left: np.ndarray
    children_right: np.ndarray
    features: np.ndarray
    thresholds: np.ndarray
    values: np.ndarray
    n_samples: np.ndarray

    def __post_init__(self):
        arrays = {
            'children_left': np.asarray(self.children_left, dtype=np.int64),
            'children_right': np.asarray(self.children_right, dtype=np.int64),
            'features': np.asarray(self.features, dtype=np.int64),
            'thresholds': np.asarray(self.thresholds, dtype=np.float64),
            'values': np.asarray(self.values, dtype=np.float64),
            'n_samples': np.asarray(self.n_samples, dtype=np.int64),
        }
        sizes = {a.shape for a in arrays.values()}
        if len(sizes) != 1 or arrays['values'].ndim != 1 or arrays['values'].size == 0:
            raise ContractError("Tree node arrays must be 1D with one entry per node")
        for name, array in arrays.items():
            object.__setattr__(self, name, array)

    @property
    def n_nodes(self) -> int:
        return int(self.values.size)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.children_left == TREE_LEAF)

    def predict(self, features: np.ndarray) -> np.ndarray:
        node = np.zeros(features.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.children_left[node] != TREE_LEAF)
        while active.size:
            current = node[active]
            go_left = features[active, self.features[current]] <= self.thresholds[current]
            node[active] = np.where(go_left, self.children_left[current], self.children_right[current])
            active = active[self.children_left[node[active]] != TREE_LEAF]
        return self.values[node]


@dataclass(frozen=True, eq=False)
class Forest:
    trees: Tuple[RegressionTree, ...]
    min_leaf: int = 1

    def __post_init__(self):
        trees = tuple(self.trees)
        if not trees:
            raise ContractError("A forest needs at least one tree")
        for t, tree in enumerate(trees):
            small = tree.n_samples[tree.leaves] < self.min_leaf
            if tree.n_nodes > 1 and np.any(small):
                raise ContractError(f"Tree {t} has leaves with fewer than {self.min_leaf} samples")
        object.__setattr__(self, 'trees', trees)

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Mean of the tree predictions; features are compared at float32 precision"""
        x = np.asarray(features, dtype=np.float32).astype(np.float64)
        total = np.zeros(x.shape[0], dtype=np.float64)
        for tree in self.trees:
            total += tree.predict(x)
        return total / len(self.trees)


@dataclass(frozen=True, eq=False)
class RegressionModel:
    """
    Fitted synthesis regressor

    Attributes:
        kind: POLY3 or FOREST
        patch_spec: feature layout the model was trained on
        poly: polynomial terms (POLY3)
        forest: regression trees (FOREST)
        normalization: normalization method of the training images (audit only)
        train_r2: coefficient of determination on the training set
    """
    kind: RegressionKind
    patch_spec: PatchSpec
    poly: Optional[PolynomialTerms] = None
    forest: Optional[Forest] = None
    normalization: str = 'raw'
    train_r2: float = float('nan')

    def __post_init__(self):
        kind = RegressionKind(self.kind)
        object.__setattr__(self, 'kind', kind)
        if kind == RegressionKind.POLY3 and self.poly is None:
            raise ContractError("POLY3 model needs polynomial terms")
        if kind == RegressionKind.FOREST and self.forest is None:
            raise ContractError("FOREST model needs trees")
        width = self.poly.powers.shape[1] if self.poly is not None else None
        if width is not None and width != self.patch_spec.size:
            raise ContractError(f"Polynomial has {width} features, patch has {self.patch_spec.size}")

    def predict(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.patch_spec.size:
            raise ContractError(f"Expected n x {self.patch_spec.size} features, got {features.shape}")
        if self.kind == RegressionKind.POLY3:
            return self.poly.predict(features)
        return self.forest.predict(features)


def _header(model: RegressionModel) -> dict:
    return {
        'format': 'normsynth-regression',
        'version': REGRESSION_FORMAT_VERSION,
        'kind': model.kind.value,
        'offsets': [list(o) for o in model.patch_spec.offsets],
        'normalization': model.normalization,
        'train_r2': model.train_r2,
    }


def _check_header(header: dict, path: str) -> None:
    if header.get('format') != 'normsynth-regression':
        raise SchemaError(f"{path} is not a regression model file")
    if header.get('version') != REGRESSION_FORMAT_VERSION:
        raise SchemaError(f"{path} has format version {header.get('version')}, "
                          f"expected {REGRESSION_FORMAT_VERSION}")


def save_regression_model(model: RegressionModel, path) -> None:
    """
    Persist a RegressionModel

    POLY3 goes to JSON; FOREST to a .npz holding the JSON header and the
    node arrays of all trees concatenated, with per-tree offsets.
    """
    path = os.fspath(path)
    header = _header(model)
    try:
        if model.kind == RegressionKind.POLY3:
            poly = model.poly
            header.update({
                'degree': poly.degree,
                'powers': poly.powers.tolist(),
                'coefficients': poly.coefficients.tolist(),
                'feature_mean': poly.feature_mean.tolist(),
                'feature_scale': poly.feature_scale.tolist(),
            })
            with open(path, 'w') as f:
                json.dump(header, f, indent=2)
        else:
            trees = model.forest.trees
            header.update({'n_trees': len(trees), 'min_leaf': model.forest.min_leaf})
            with open(path, 'wb') as f:
                np.savez_compressed(
                    f,
                    header=np.array(json.dumps(header)),
                    tree_offsets=np.cumsum([0] + [t.n_nodes for t in trees]),
                    children_left=np.concatenate([t.children_left for t in trees]),
                    children_right=np.concatenate([t.children_right for t in trees]),
                    features=np.concatenate([t.features for t in trees]),
                    thresholds=np.concatenate([t.thresholds for t in trees]),
                    values=np.concatenate([t.values for t in trees]),
                    n_samples=np.concatenate([t.n_samples for t in trees]),
                )
    except OSError as e:
        raise VolumeIOError(f"Could not write regression model {path}: {e}")
    logger.info(f"Saved {model.kind.value} regression model to {path}")


def load_regression_model(path) -> RegressionModel:
    """Read a model written by save_regression_model; the container is detected from the content"""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise VolumeIOError(f"Regression model not found: {path}")
    with open(path, 'rb') as f:
        is_zip = f.read(2) == b'PK'

    try:
        if not is_zip:
            with open(path, 'r') as f:
                header = json.load(f)
            _check_header(header, path)
            poly = PolynomialTerms(
                powers=header['powers'],
                coefficients=header['coefficients'],
                feature_mean=header['feature_mean'],
                feature_scale=header['feature_scale'],
                degree=int(header['degree'])
            )
            return RegressionModel(kind=header['kind'], patch_spec=PatchSpec(tuple(map(tuple, header['offsets']))),
                                   poly=poly, normalization=header['normalization'],
                                   train_r2=float(header['train_r2']))

        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive['header']))
            _check_header(header, path)
            offsets = archive['tree_offsets']
            arrays = {name: archive[name] for name in
                      ('children_left', 'children_right', 'features', 'thresholds', 'values', 'n_samples')}
        trees = tuple(
            RegressionTree(**{name: a[offsets[t]:offsets[t + 1]] for name, a in arrays.items()})
            for t in range(int(header['n_trees']))
        )
        return RegressionModel(kind=header['kind'], patch_spec=PatchSpec(tuple(map(tuple, header['offsets']))),
                               forest=Forest(trees=trees, min_leaf=int(header['min_leaf'])),
                               normalization=header['normalization'], train_r2=float(header['train_r2']))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(f"Malformed regression model {path}: {e}")
