"""
3D volume and mask types with NIfTI-1 I/O

Every other module consumes these types. Volumes and masks are immutable:
their arrays are stored read-only and transforms return new objects.
"""
import gzip
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from normsynth.models.errors import (
    ContractError,
    DimensionMismatchError,
    EmptyMaskError,
    MalformedHeaderError,
    NotScalarVolumeError,
    VolumeIOError,
    VolumeNotFoundError,
)

# Setup logging
logger = logging.getLogger(__name__)

GZIP_MAGIC = b'\x1f\x8b'
NIFTI1_MAGICS = (b'n+1\x00', b'ni1\x00')
NIFTI1_MAGIC_OFFSET = 344


class Contrast(str, Enum):
    T1 = 'T1'
    T2 = 'T2'
    FLAIR = 'FLAIR'
    OTHER = 'OTHER'

    @classmethod
    def parse(cls, value) -> 'Contrast':
        if isinstance(value, Contrast):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ContractError(f"Unknown contrast '{value}'")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Volume:
    """
    A 3D scalar MR image

    Attributes:
        data: float64 intensities, shape (N, M, L)
        spacing: voxel size in mm
        contrast: acquisition weighting tag
        affine: opaque 4x4 voxel-to-world matrix carried from the file
    """
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: Contrast = Contrast.OTHER
    affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise NotScalarVolumeError(f"not a 3D scalar volume (got shape {data.shape})")
        if data.size == 0:
            raise ContractError(f"Volume has zero voxels (dims {data.shape})")
        if not np.all(np.isfinite(data)):
            raise ContractError("Volume contains NaN or Inf intensities")

        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ContractError(f"Spacing must be three positive values, got {self.spacing}")

        affine = self.affine
        if affine is None:
            affine = np.diag([*spacing, 1.0])
        affine = np.array(affine, dtype=np.float64)

        object.__setattr__(self, 'data', _frozen(data))
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'contrast', Contrast.parse(self.contrast))
        object.__setattr__(self, 'affine', _frozen(affine))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray) -> 'Volume':
        """New volume with the same header and different intensities"""
        return Volume(data=data, spacing=self.spacing, contrast=self.contrast, affine=self.affine)

    def with_contrast(self, contrast) -> 'Volume':
        return Volume(data=self.data, spacing=self.spacing, contrast=contrast, affine=self.affine)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary region aligned to a Volume (brain, WM, CSF, ...)"""
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=bool)
        if data.ndim != 3:
            raise NotScalarVolumeError(f"Mask must be 3D, got shape {data.shape}")
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    @classmethod
    def from_volume(cls, volume: Volume, threshold: float = 0.0) -> 'Mask':
        return cls(volume.data > threshold)

    @classmethod
    def full(cls, dims) -> 'Mask':
        return cls(np.ones(dims, dtype=bool))

    def __and__(self, other: 'Mask') -> 'Mask':
        check_dims(self, other)
        return Mask(self.data & other.data)

    def __or__(self, other: 'Mask') -> 'Mask':
        check_dims(self, other)
        return Mask(self.data | other.data)


@dataclass(frozen=True)
class MaskedStats:
    mean: float
    std: float
    min: float
    max: float
    n: int


def check_dims(a, b):
    """Raise DimensionMismatchError unless a and b have identical dims"""
    if a.dims != b.dims:
        raise DimensionMismatchError(f"Dimension mismatch: {a.dims} vs {b.dims}")


def masked_values(volume: Volume, mask: Mask) -> np.ndarray:
    """1D array of intensities inside the mask (C order)"""
    check_dims(volume, mask)
    return volume.data[mask.data]


def masked_stats(volume: Volume, mask: Mask) -> MaskedStats:
    """
    Mean, population standard deviation, min and max over the mask

    Args:
        volume: Source volume
        mask: Statistics domain, at least two voxels

    Returns:
        MaskedStats for the voxels where the mask is true
    """
    values = masked_values(volume, mask)
    if values.size < 2:
        raise EmptyMaskError(f"Mask must contain at least 2 voxels, has {values.size}")

    mean = float(np.mean(values))
    return MaskedStats(
        mean=mean,
        std=float(np.sqrt(np.mean((values - mean) ** 2))),
        min=float(values.min()),
        max=float(values.max()),
        n=int(values.size)
    )


def apply_mask(volume: Volume, mask: Mask) -> Volume:
    """Zero every voxel outside the mask, leave the interior unchanged"""
    check_dims(volume, mask)
    return volume.with_data(np.where(mask.data, volume.data, 0.0))


def dice(a: Mask, b: Mask) -> float:
    """Dice overlap between two masks (1.0 when both are empty)"""
    check_dims(a, b)
    total = a.count + b.count
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a.data & b.data) / total


def _read_nifti1(path: str) -> nib.Nifti1Image:
    """Read a NIfTI-1 image, detecting gzip and the format by magic bytes"""
    if not os.path.isfile(path):
        raise VolumeNotFoundError(f"Volume file not found: {path}")

    try:
        with open(path, 'rb') as f:
            raw = f.read()
        if raw[:2] == GZIP_MAGIC:
            raw = gzip.decompress(raw)
    except (OSError, EOFError) as e:
        raise VolumeIOError(f"Could not read {path}: {e}")

    magic = raw[NIFTI1_MAGIC_OFFSET:NIFTI1_MAGIC_OFFSET + 4]
    if magic not in NIFTI1_MAGICS:
        raise MalformedHeaderError(f"{path} is not a NIfTI-1 file (magic {magic!r})")
    if magic == b'ni1\x00':
        # Two-file (.hdr/.img) pairs cannot be rebuilt from a single byte stream
        return nib.load(path)

    try:
        return nib.Nifti1Image.from_bytes(raw)
    except (HeaderDataError, ImageFileError, ValueError) as e:
        raise MalformedHeaderError(f"Malformed NIfTI-1 header in {path}: {e}")


def _descrip_contrast(header) -> Optional[Contrast]:
    descrip = header['descrip'].tobytes().split(b'\x00', 1)[0].decode('ascii', 'ignore')
    for part in descrip.split(';'):
        key, _, value = part.partition('=')
        if key.strip() == 'contrast':
            try:
                return Contrast(value.strip())
            except ValueError:
                return None
    return None


def load_volume(path, contrast=None) -> Volume:
    """
    Load a scalar 3D NIfTI-1 volume (.nii or .nii.gz)

    Args:
        path: File path; compression is detected from the content
        contrast: Optional contrast tag overriding the one stored in the header

    Returns:
        Volume with float64 intensities and the header spacing
    """
    path = os.fspath(path)
    img = _read_nifti1(path)

    shape = img.shape
    if len(shape) != 3:
        raise NotScalarVolumeError(f"not a 3D scalar volume: {path} has shape {shape}")
    if img.get_data_dtype().fields is not None or np.issubdtype(img.get_data_dtype(), np.complexfloating):
        raise NotScalarVolumeError(f"not a 3D scalar volume: {path} has dtype {img.get_data_dtype()}")

    try:
        data = np.asarray(img.dataobj, dtype=np.float64)
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    except (HeaderDataError, ValueError) as e:
        raise MalformedHeaderError(f"Malformed NIfTI-1 header in {path}: {e}")

    if not np.all(np.isfinite(data)):
        raise ContractError(f"{path} contains NaN or Inf intensities")

    tag = contrast if contrast is not None else (_descrip_contrast(img.header) or Contrast.OTHER)
    logger.debug(f"Loaded {path}: dims={shape}, spacing={spacing}, contrast={tag}")
    return Volume(data=data, spacing=spacing, contrast=tag, affine=img.affine)


def load_mask(path) -> Mask:
    """Load a NIfTI file as a mask of its non-zero voxels"""
    return Mask.from_volume(load_volume(path), threshold=0.0)


def save_volume(volume: Volume, path) -> None:
    """
    Write a Volume as NIfTI-1 (gzip-compressed when the path ends in .gz)

    Args:
        volume: Volume to write; float64 data is stored losslessly
        path: Destination; its parent directory must exist
    """
    path = os.fspath(path)
    if volume.data.size == 0:
        raise ContractError("Cannot save a volume with zero voxels")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise VolumeIOError(f"Parent directory does not exist: {parent}")

    img = nib.Nifti1Image(np.asarray(volume.data, dtype=np.float64), volume.affine)
    img.header.set_zooms(volume.spacing)
    img.header.set_xyzt_units('mm')
    img.header['descrip'] = f'contrast={volume.contrast.value}'.encode('ascii')

    try:
        nib.save(img, path)
    except OSError as e:
        raise VolumeIOError(f"Could not write {path}: {e}")
    logger.debug(f"Saved {path}: dims={volume.dims}")


def save_mask(mask: Mask, path, like: Optional[Volume] = None) -> None:
    """Write a mask as a 0/1 NIfTI volume, borrowing the header of `like`"""
    header = like if like is not None else Volume(np.zeros(mask.dims))
    save_volume(header.with_data(mask.data.astype(np.float64)), path)
