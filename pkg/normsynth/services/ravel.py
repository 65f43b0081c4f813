"""
RAVEL: removal of unwanted technical variation from WhiteStripe-normalized,
co-registered volumes

The control voxels are the CSF voxels shared by every image. An SVD of their
intensities gives a basis for the unwanted factors, and a voxelwise linear
regression onto that basis gives the correction subtracted from each image.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from normsynth.models.errors import ContractError, DimensionMismatchError, NumericalError
from normsynth.models.normalizer_model import RavelModel
from normsynth.models.volume import Contrast, Mask, Volume
from normsynth.services.tissue import Tissue, class_mask, fcm_segment

# Setup logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CsfMatrix:
    """
    n x m matrix of CSF intensities

    Attributes:
        values: rows are voxels in the CSF intersection, columns are images
        voxel_index: n x 3 integer coordinates of the rows
        image_ids: column identifiers
    """
    values: np.ndarray
    voxel_index: np.ndarray
    image_ids: Tuple[str, ...]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def fcm_csf_mask(volume: Volume, brain: Mask) -> Mask:
    """CSF as the FCM class picked by the contrast rule (min-mean class on T1)"""
    return class_mask(fcm_segment(volume, brain, k=3), volume.contrast, Tissue.CSF)


def csf_mask_from_t1(t1: Volume, brain: Mask) -> Mask:
    """CSF control voxels as the minimum-mean FCM class of the subject's T1"""
    return class_mask(fcm_segment(t1, brain, k=3), Contrast.T1, Tissue.CSF)


def _check_same_dims(volumes: Sequence) -> Tuple[int, int, int]:
    dims = volumes[0].dims
    for v in volumes[1:]:
        if v.dims != dims:
            raise DimensionMismatchError(f"RAVEL needs co-registered inputs: {v.dims} vs {dims}")
    return dims


def build_csf_matrix(sample: Sequence[Tuple[Volume, Mask]],
                     image_ids: Optional[Sequence[str]] = None) -> CsfMatrix:
    """
    Gather intensities at the voxels inside every image's CSF mask

    Args:
        sample: (WhiteStripe-normalized volume, CSF mask) per image, co-registered
        image_ids: Column identifiers; defaults to '0', '1', ...
    """
    if not sample:
        raise ContractError("RAVEL needs at least one image")
    _check_same_dims([item for pair in sample for item in pair])

    common = np.logical_and.reduce([csf.data for _, csf in sample])
    n, m = int(np.count_nonzero(common)), len(sample)
    if n == 0:
        raise ContractError("empty CSF intersection")
    if n < m:
        raise ContractError(f"CSF intersection has {n} voxels, fewer than the {m} images")

    ids = tuple(str(i) for i in (image_ids if image_ids is not None else range(m)))
    if len(ids) != m:
        raise ContractError(f"Got {len(ids)} image ids for {m} images")
    values = np.column_stack([v.data[common] for v, _ in sample])
    logger.debug(f"CSF matrix: {n} voxels x {m} images")
    return CsfMatrix(values=values, voxel_index=np.argwhere(common), image_ids=ids)


def estimate_unwanted_basis(csf: CsfMatrix, rank: int = 1, center: bool = True) -> np.ndarray:
    """
    First `rank` right singular vectors of the CSF matrix

    With center=True each voxel's series across images has its mean removed
    first, so the basis describes between-image variation rather than the
    shared CSF level. Each vector's first nonzero entry is made positive.

    Returns:
        m x rank matrix with orthonormal columns
    """
    values = np.asarray(csf.values, dtype=np.float64)
    m = values.shape[1]
    if not 1 <= rank <= m:
        raise ContractError(f"Basis rank must be in [1, {m}], got {rank}")
    if not np.all(np.isfinite(values)):
        raise NumericalError("CSF matrix has non-finite entries")
    if center:
        values = values - values.mean(axis=1, keepdims=True)

    _, singular, vt = np.linalg.svd(values, full_matrices=False)
    if rank < singular.size and np.isclose(singular[rank - 1], singular[rank], rtol=1e-12, atol=0):
        logger.warning(f"Singular values {rank} and {rank + 1} tie ({singular[rank - 1]:.6g}); "
                       f"basis fixed by the sign/order convention")

    basis = vt[:rank].T.copy()
    for j in range(rank):
        nonzero = np.flatnonzero(np.abs(basis[:, j]) > 1e-12)
        if nonzero.size and basis[nonzero[0], j] < 0:
            basis[:, j] = -basis[:, j]
    logger.debug(f"Leading singular values: {np.round(singular[:rank + 1], 6).tolist()}")
    return basis


def ravel_fit_apply(sample: Sequence[Tuple[Volume, Mask, Mask]], rank: int = 1, center: bool = True,
                    image_ids: Optional[Sequence[str]] = None) -> Tuple[List[Volume], RavelModel]:
    """
    Estimate and remove unwanted variation from a co-registered sample

    For every voxel in the union of the brain masks, the m image intensities
    are regressed onto the basis (plus an intercept when centering); each
    output image subtracts its share gamma_x . W_b[i] of the fitted variation.

    Args:
        sample: (WhiteStripe-normalized volume, brain mask, CSF mask) per image
        rank: Number of basis vectors b
        center: Centered SVD with intercept regression (False: neither)
        image_ids: Identifiers the returned model is bound to

    Returns:
        (corrected volumes in input order, RavelModel)
    """
    m = len(sample)
    if m < rank + 2:
        raise ContractError(f"RAVEL with rank {rank} needs at least {rank + 2} images, got {m}")
    volumes = [v for v, _, _ in sample]
    _check_same_dims(volumes + [b for _, b, _ in sample] + [c for _, _, c in sample])

    csf = build_csf_matrix([(v, c) for v, _, c in sample], image_ids)
    basis = estimate_unwanted_basis(csf, rank=rank, center=center)
    singular = np.linalg.svd(
        csf.values - csf.values.mean(axis=1, keepdims=True) if center else csf.values,
        compute_uv=False
    )

    union = np.logical_or.reduce([b.data for _, b, _ in sample])
    series = np.vstack([v.data[union] for v in volumes])
    design = np.column_stack([np.ones(m), basis]) if center else basis
    coef, _, design_rank, _ = np.linalg.lstsq(design, series, rcond=None)
    if design_rank < design.shape[1]:
        raise NumericalError(f"RAVEL design matrix is rank deficient ({design_rank} < {design.shape[1]})")
    gamma = coef[1:] if center else coef

    reference = volumes[0]
    coefficients = []
    for j in range(rank):
        data = np.zeros(reference.dims, dtype=np.float64)
        data[union] = gamma[j]
        coefficients.append(reference.with_data(data))

    correction = basis @ gamma
    outputs = []
    for i, v in enumerate(volumes):
        data = np.array(v.data, dtype=np.float64)
        data[union] -= correction[i]
        outputs.append(v.with_data(data))

    model = RavelModel(basis=basis, coefficients=tuple(coefficients), image_ids=csf.image_ids,
                       rank=rank, center=center, singular_values=tuple(float(s) for s in singular[:rank + 1]))
    logger.info(f"RAVEL removed rank-{rank} variation from {m} images over {int(union.sum())} voxels")
    return outputs, model
