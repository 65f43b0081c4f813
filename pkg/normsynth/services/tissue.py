"""
Tissue-class models: fuzzy c-means and Gaussian mixtures over the brain mask

Provides the WM/CSF masks and WM means used by the segmentation-based
normalizers and by RAVEL.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from normsynth.config import (
    FCM_FUZZINESS,
    FCM_MAX_ITER,
    FCM_MIN_VOXELS,
    FCM_TOL,
    GMM_MAX_ITER,
    GMM_TOL,
)
from normsynth.models.errors import (
    ContractError,
    ConvergenceError,
    DegenerateFitError,
    EmptyMaskError,
)
from normsynth.models.volume import Contrast, Mask, Volume, check_dims, masked_values

# Setup logging
logger = logging.getLogger(__name__)


class Tissue(str, Enum):
    CSF = 'CSF'
    GM = 'GM'
    WM = 'WM'


# Class index (into ascending class means) of each tissue, per contrast
_CLASS_RULES = {
    Contrast.T1: {Tissue.CSF: 0, Tissue.GM: 1, Tissue.WM: 2},
    Contrast.T2: {Tissue.WM: 0, Tissue.GM: 1, Tissue.CSF: 2},
    Contrast.FLAIR: {Tissue.CSF: 0, Tissue.WM: 1, Tissue.GM: 2},
}


@dataclass(frozen=True, eq=False)
class MembershipMap:
    """
    Fuzzy c-means result

    Attributes:
        memberships: dims + (k,) array, rows sum to 1 inside the mask, 0 outside
        class_means: k intensities, strictly increasing
        mask: domain the memberships were computed over
        objective: final FCM objective
        n_iter: iterations used
    """
    memberships: np.ndarray
    class_means: np.ndarray
    mask: Mask
    objective: float
    n_iter: int

    @property
    def k(self) -> int:
        return int(self.class_means.size)

    @property
    def dims(self):
        return self.mask.dims

    def hard_labels(self) -> np.ndarray:
        """Argmax class per voxel, -1 outside the mask"""
        labels = np.argmax(self.memberships, axis=-1)
        return np.where(self.mask.data, labels, -1)


@dataclass(frozen=True, eq=False)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float = float('nan')
    n_iter: int = 0

    def __post_init__(self):
        if np.any(self.weights < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ContractError(f"GMM weights must be nonnegative and sum to 1: {self.weights}")
        if np.any(self.variances <= 0):
            raise ContractError(f"GMM variances must be positive: {self.variances}")

    @property
    def k(self) -> int:
        return int(self.means.size)

    def _log_joint(self, x: np.ndarray) -> np.ndarray:
        return (np.log(self.weights)[None, :]
                + norm.logpdf(x[:, None], loc=self.means[None, :], scale=np.sqrt(self.variances)[None, :]))

    def posteriors(self, intensities) -> np.ndarray:
        """Component responsibilities, shape (n, k)"""
        log_joint = self._log_joint(np.asarray(intensities, dtype=np.float64))
        return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


def _brain_intensities(volume: Volume, brain: Mask) -> np.ndarray:
    x = masked_values(volume, brain)
    if x.size < FCM_MIN_VOXELS:
        raise EmptyMaskError(f"Brain mask must contain at least {FCM_MIN_VOXELS} voxels, has {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateFitError("Intensities inside the brain mask are constant")
    return x


def _fcm_memberships(x: np.ndarray, centers: np.ndarray, fuzziness: float):
    dist2 = (x[:, None] - centers[None, :]) ** 2
    exact = dist2 == 0
    with np.errstate(divide='ignore'):
        inv = dist2 ** (-1.0 / (fuzziness - 1.0))
    # a voxel sitting exactly on a center belongs to it entirely
    hit = exact.any(axis=1)
    inv[hit] = exact[hit].astype(np.float64)
    u = inv / inv.sum(axis=1, keepdims=True)
    return u, dist2


def fcm_segment(volume: Volume, brain: Mask, k: int = 3, fuzziness: float = FCM_FUZZINESS,
                tol: float = FCM_TOL, max_iter: int = FCM_MAX_ITER) -> MembershipMap:
    """
    Fuzzy c-means over the masked intensities

    Centers start at evenly spaced percentiles (25/50/75 for k=3) and the fit
    stops when the relative objective change drops below tol.

    Args:
        volume: Source image
        brain: Brain mask, at least 1000 voxels
        k: Number of classes
        fuzziness: FCM exponent m > 1

    Returns:
        MembershipMap with class means sorted ascending
    """
    check_dims(volume, brain)
    if k < 1:
        raise ContractError(f"Class count must be >= 1, got {k}")
    if fuzziness <= 1:
        raise ContractError(f"Fuzziness must be > 1, got {fuzziness}")
    x = _brain_intensities(volume, brain)

    centers = np.percentile(x, np.linspace(0, 100, k + 2)[1:-1])
    previous = None
    objective = None
    for iteration in range(1, max_iter + 1):
        u, dist2 = _fcm_memberships(x, centers, fuzziness)
        um = u ** fuzziness
        objective = float(np.sum(um * dist2))
        if previous is not None and abs(previous - objective) <= tol * max(previous, np.finfo(float).tiny):
            break
        previous = objective
        centers = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
    else:
        raise ConvergenceError(
            f"FCM did not converge in {max_iter} iterations (objective {objective:.6g})",
            last_objective=objective
        )

    order = np.argsort(centers)
    centers = centers[order]
    u = u[:, order]
    if k > 1 and np.any(np.diff(centers) <= 0):
        raise DegenerateFitError(f"FCM class means are not distinct: {centers}")

    memberships = np.zeros(brain.dims + (k,), dtype=np.float64)
    memberships[brain.data] = u
    logger.debug(f"FCM converged in {iteration} iterations: means={np.round(centers, 3).tolist()}")
    return MembershipMap(memberships=memberships, class_means=centers, mask=brain,
                         objective=objective, n_iter=iteration)


def gmm_fit(volume: Volume, brain: Mask, k: int = 3, tol: float = GMM_TOL,
            max_iter: int = GMM_MAX_ITER) -> GmmParams:
    """
    EM fit of a k-component 1D Gaussian mixture to the masked intensities

    Initialized from the hard FCM classes so the fit is deterministic and its
    components come out ordered by mean.

    Args:
        volume: Source image
        brain: Brain mask
        k: Number of components
        tol: Stop when the mean log-likelihood improves by less than this
    """
    check_dims(volume, brain)
    x = _brain_intensities(volume, brain)
    total_var = float(np.var(x))

    seed_fit = fcm_segment(volume, brain, k=k)
    labels = np.argmax(seed_fit.memberships[brain.data], axis=1)
    weights = np.array([np.mean(labels == j) for j in range(k)])
    if np.any(weights == 0):
        raise DegenerateFitError("FCM initialization left an empty GMM component")
    means = np.array([x[labels == j].mean() for j in range(k)])
    variances = np.array([x[labels == j].var() for j in range(k)])
    variances = np.maximum(variances, 1e-6 * total_var)

    previous = -np.inf
    log_likelihood = -np.inf
    for iteration in range(1, max_iter + 1):
        log_joint = (np.log(weights)[None, :]
                     + norm.logpdf(x[:, None], loc=means[None, :], scale=np.sqrt(variances)[None, :]))
        log_norm = logsumexp(log_joint, axis=1, keepdims=True)
        log_likelihood = float(np.mean(log_norm))
        if abs(log_likelihood - previous) < tol:
            break
        previous = log_likelihood

        resp = np.exp(log_joint - log_norm)
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            raise DegenerateFitError("A GMM component lost all its responsibility")
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        if np.any(variances <= 1e-12 * total_var):
            raise DegenerateFitError(f"GMM component variance collapsed: {variances}")
    else:
        raise ConvergenceError(
            f"GMM did not converge in {max_iter} iterations (log-likelihood {log_likelihood:.6g})",
            last_objective=log_likelihood
        )

    order = np.argsort(means)
    weights = weights[order]
    logger.debug(f"GMM converged in {iteration} iterations: means={np.round(means[order], 3).tolist()}")
    return GmmParams(weights=weights / weights.sum(), means=means[order], variances=variances[order],
                     log_likelihood=log_likelihood, n_iter=iteration)


def tissue_class_index(contrast, tissue) -> int:
    """Index into ascending class means of a tissue under a contrast's rule"""
    contrast = Contrast.parse(contrast)
    rules = _CLASS_RULES.get(contrast, _CLASS_RULES[Contrast.T1])
    return rules[Tissue(tissue)]


def class_mask(fit: Union[MembershipMap, GmmParams], contrast, tissue=Tissue.WM,
               volume: Optional[Volume] = None, brain: Optional[Mask] = None) -> Mask:
    """
    Hard mask of one tissue class from a 3-class FCM or GMM fit

    Voxels are assigned to their maximum-membership (FCM) or maximum-posterior
    (GMM) class; the class for the tissue follows the contrast rule: WM is the
    max-mean class on T1, the middle on FLAIR and the min on T2.

    Args:
        fit: MembershipMap, or GmmParams together with volume and brain
        contrast: Contrast tag of the fitted image
        tissue: WM, GM or CSF
    """
    if fit.k != 3:
        raise ContractError(f"class_mask needs a 3-class fit, got k={fit.k}")
    index = tissue_class_index(contrast, tissue)

    if isinstance(fit, MembershipMap):
        return Mask(fit.hard_labels() == index)

    if volume is None or brain is None:
        raise ContractError("A GMM class mask needs the fitted volume and brain mask")
    check_dims(volume, brain)
    labels = np.full(brain.dims, -1, dtype=np.int64)
    labels[brain.data] = np.argmax(fit.posteriors(volume.data[brain.data]), axis=1)
    return Mask(labels == index)


def wm_mean(volume: Volume, wm: Mask) -> float:
    """Arithmetic mean of the intensities inside the WM mask"""
    values = masked_values(volume, wm)
    if values.size == 0:
        raise EmptyMaskError("WM mask is empty")
    return float(np.mean(values))
