"""
Normalizer specifications, fitted state and the model JSON format
"""
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from normsynth.config import (
    HM_LABELS,
    HM_SCALE,
    MODEL_SCHEMA_VERSION,
    RAVEL_RANK,
    SCALE_CONSTANT,
    STRIPE_TAU,
)
from normsynth.models.errors import ContractError, SchemaError, VolumeIOError
from normsynth.models.volume import Contrast, Volume, load_volume, save_volume

# Setup logging
logger = logging.getLogger(__name__)


class NormalizationMethod(str, Enum):
    ZSCORE = 'ZSCORE'
    FCM = 'FCM'
    GMM = 'GMM'
    KDE = 'KDE'
    HM = 'HM'
    WHITESTRIPE = 'WHITESTRIPE'
    RAVEL = 'RAVEL'

    @classmethod
    def parse(cls, value) -> 'NormalizationMethod':
        if isinstance(value, NormalizationMethod):
            return value
        name = str(value).upper().replace('-', '').replace('_', '')
        aliases = {'ZS': 'ZSCORE', 'WS': 'WHITESTRIPE', 'NYUL': 'HM'}
        try:
            return cls(aliases.get(name, name))
        except ValueError:
            raise SchemaError(f"Unknown normalization method '{value}'")

    @property
    def image_wise(self) -> bool:
        return self not in (NormalizationMethod.HM, NormalizationMethod.RAVEL)


class WmSource(str, Enum):
    T1 = 't1'
    SELF = 'self'


@dataclass(frozen=True)
class NormalizerSpec:
    """
    Method selection plus its parameters

    Attributes:
        scale: c, the WM value after FCM/GMM/KDE normalization
        tau: WhiteStripe half-width in CDF units
        labels: HM landmark percentiles
        scale_range: HM standard scale
        rank: RAVEL basis rank b
        contrast: contrast the model is fit for (None accepts any)
        center: RAVEL centering/intercept convention
        wm_from: FCM/GMM/KDE WM source, the subject's T1 or the image itself
    """
    method: NormalizationMethod
    scale: float = SCALE_CONSTANT
    tau: float = STRIPE_TAU
    labels: Tuple[float, ...] = HM_LABELS
    scale_range: Tuple[float, float] = HM_SCALE
    rank: int = RAVEL_RANK
    contrast: Optional[Contrast] = None
    center: bool = True
    wm_from: Optional[WmSource] = None

    def __post_init__(self):
        method = NormalizationMethod.parse(self.method)
        object.__setattr__(self, 'method', method)
        object.__setattr__(self, 'labels', tuple(float(x) for x in self.labels))
        object.__setattr__(self, 'scale_range', tuple(float(x) for x in self.scale_range))
        if self.contrast is not None:
            object.__setattr__(self, 'contrast', Contrast.parse(self.contrast))
        wm_from = self.wm_from
        if wm_from is None and method in (NormalizationMethod.FCM, NormalizationMethod.GMM, NormalizationMethod.KDE):
            # FCM segments the T1 per the reference procedure; GMM/KDE use per-contrast peak rules
            wm_from = WmSource.T1 if method == NormalizationMethod.FCM else WmSource.SELF
        if wm_from is not None:
            object.__setattr__(self, 'wm_from', WmSource(str(getattr(wm_from, 'value', wm_from)).lower()))

        if not self.scale > 0:
            raise ContractError(f"Scale constant c must be positive, got {self.scale}")
        if not 0 < self.tau < 0.5:
            raise ContractError(f"WhiteStripe tau must be in (0, 0.5), got {self.tau}")
        if self.rank < 1:
            raise ContractError(f"RAVEL rank must be >= 1, got {self.rank}")
        lo, hi = self.scale_range
        if not lo < hi:
            raise ContractError(f"HM scale range must be increasing, got {self.scale_range}")
        if len(self.labels) < 2 or list(self.labels) != sorted(set(self.labels)):
            raise ContractError(f"HM labels must be strictly increasing, got {self.labels}")

    def to_params(self) -> Dict[str, Any]:
        return {
            'scale': self.scale,
            'tau': self.tau,
            'labels': list(self.labels),
            'scale_range': list(self.scale_range),
            'rank': self.rank,
            'contrast': self.contrast.value if self.contrast else None,
            'center': self.center,
            'wm_from': self.wm_from.value if self.wm_from else None,
        }

    @classmethod
    def from_params(cls, method, params: Dict[str, Any]) -> 'NormalizerSpec':
        known = {'scale', 'tau', 'labels', 'scale_range', 'rank', 'contrast', 'center', 'wm_from'}
        unknown = set(params) - known
        if unknown:
            raise SchemaError(f"Unknown normalizer params: {sorted(unknown)}")
        return cls(method=method, **params)


@dataclass(frozen=True)
class StandardHistogram:
    """Learned HM target: standard values at each landmark label"""
    labels: Tuple[float, ...]
    standard_values: Tuple[float, ...]
    scale: Tuple[float, float] = HM_SCALE

    def __post_init__(self):
        object.__setattr__(self, 'labels', tuple(float(x) for x in self.labels))
        object.__setattr__(self, 'standard_values', tuple(float(x) for x in self.standard_values))
        object.__setattr__(self, 'scale', tuple(float(x) for x in self.scale))
        values = self.standard_values
        if len(values) != len(self.labels):
            raise ContractError("Standard histogram labels and values differ in length")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ContractError(f"Standard values must be nondecreasing: {values}")
        lo, hi = self.scale
        tol = 1e-9 * (hi - lo)
        if values and (values[0] < lo - tol or values[-1] > hi + tol):
            raise ContractError(f"Standard values {values} leave the scale range {self.scale}")


@dataclass(frozen=True, eq=False)
class RavelModel:
    """
    Unwanted-variation basis and voxelwise coefficients

    Attributes:
        basis: m x b matrix of right singular vectors, rows follow image_ids
        coefficients: one gamma volume per basis column (zero outside the union mask)
        image_ids: the sample the model is bound to, in basis-row order
        singular_values: leading singular values of the CSF matrix
    """
    basis: np.ndarray
    coefficients: Tuple[Volume, ...]
    image_ids: Tuple[str, ...]
    rank: int
    center: bool = True
    singular_values: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape != (len(self.image_ids), self.rank):
            raise ContractError(f"RAVEL basis shape {basis.shape} does not match "
                                f"{len(self.image_ids)} images x rank {self.rank}")
        if len(self.coefficients) != self.rank:
            raise ContractError("RAVEL model needs one coefficient volume per basis column")
        object.__setattr__(self, 'basis', basis)
        object.__setattr__(self, 'image_ids', tuple(str(i) for i in self.image_ids))
        object.__setattr__(self, 'coefficients', tuple(self.coefficients))

    def row(self, image_id: str) -> np.ndarray:
        try:
            return self.basis[self.image_ids.index(str(image_id))]
        except ValueError:
            raise ContractError(f"Image '{image_id}' is not in the RAVEL sample; RAVEL is sample-bound")

    def correction(self, image_id: str) -> np.ndarray:
        """gamma_x . W_b[i] for every voxel"""
        row = self.row(image_id)
        total = np.zeros(self.coefficients[0].dims, dtype=np.float64)
        for j, gamma in enumerate(self.coefficients):
            total += gamma.data * row[j]
        return total


State = Union[None, StandardHistogram, RavelModel]


@dataclass(frozen=True, eq=False)
class NormalizerModel:
    spec: NormalizerSpec
    state: State = None

    def __post_init__(self):
        method = self.spec.method
        expected = {NormalizationMethod.HM: StandardHistogram, NormalizationMethod.RAVEL: RavelModel}.get(method)
        if expected is None and self.state is not None:
            raise ContractError(f"{method.value} is image-wise and carries no fitted state")
        if expected is not None and not isinstance(self.state, expected):
            raise ContractError(f"{method.value} model needs a {expected.__name__} state")


def _coefficient_path(path: str, j: int) -> str:
    stem = path[:-5] if path.endswith('.json') else path
    return f"{stem}.gamma{j}.nii.gz"


def _state_to_json(model: NormalizerModel, path: str) -> Optional[Dict[str, Any]]:
    state = model.state
    if isinstance(state, StandardHistogram):
        return {
            'labels': list(state.labels),
            'standard_values': list(state.standard_values),
            'scale': list(state.scale)
        }
    if isinstance(state, RavelModel):
        files = []
        for j, gamma in enumerate(state.coefficients):
            gamma_path = _coefficient_path(path, j)
            save_volume(gamma, gamma_path)
            files.append(os.path.basename(gamma_path))
        return {
            'basis': state.basis.tolist(),
            'image_ids': list(state.image_ids),
            'rank': state.rank,
            'center': state.center,
            'singular_values': list(state.singular_values),
            'coefficient_files': files
        }
    return None


def save_model(model: NormalizerModel, path) -> None:
    """
    Write a NormalizerModel as versioned JSON

    RAVEL coefficient volumes are written next to the JSON file and referenced
    by name.
    """
    path = os.fspath(path)
    payload = {
        'schema_version': MODEL_SCHEMA_VERSION,
        'method': model.spec.method.value,
        'params': model.spec.to_params(),
        'state': _state_to_json(model, path)
    }
    try:
        with open(path, 'w') as f:
            json.dump(payload, f, indent=2)
    except OSError as e:
        raise VolumeIOError(f"Could not write model {path}: {e}")
    logger.info(f"Saved {model.spec.method.value} model to {path}")


def load_model(path) -> NormalizerModel:
    """Read a model written by save_model, validating schema and version"""
    path = os.fspath(path)
    try:
        with open(path, 'r') as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise VolumeIOError(f"Model file not found: {path}")
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"Could not parse model {path}: {e}")

    if not isinstance(payload, dict) or not {'schema_version', 'method', 'params', 'state'} <= set(payload):
        raise SchemaError(f"{path} is missing model fields")
    if payload['schema_version'] != MODEL_SCHEMA_VERSION:
        raise SchemaError(f"{path} has schema version {payload['schema_version']}, "
                          f"expected {MODEL_SCHEMA_VERSION}")

    try:
        spec = NormalizerSpec.from_params(payload['method'], payload['params'] or {})
        state = _state_from_json(spec, payload['state'], path)
    except (KeyError, TypeError) as e:
        raise SchemaError(f"{path} has a malformed model state: {e}")
    return NormalizerModel(spec=spec, state=state)


def _state_from_json(spec: NormalizerSpec, state, path: str) -> State:
    if spec.method == NormalizationMethod.HM:
        state = StandardHistogram(labels=state['labels'], standard_values=state['standard_values'],
                                  scale=state['scale'])
    elif spec.method == NormalizationMethod.RAVEL:
        folder = os.path.dirname(os.path.abspath(path))
        coefficients = tuple(load_volume(os.path.join(folder, name)) for name in state['coefficient_files'])
        state = RavelModel(
            basis=np.asarray(state['basis'], dtype=np.float64),
            coefficients=coefficients,
            image_ids=tuple(state['image_ids']),
            rank=int(state['rank']),
            center=bool(state['center']),
            singular_values=tuple(state.get('singular_values', ()))
        )
    elif state is not None:
        raise SchemaError(f"{spec.method.value} model must have a null state")
    return state
