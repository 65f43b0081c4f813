"""
Histogram, quantile, kernel density and mode-finding machinery

Shared by KDE normalization, WhiteStripe and histogram matching.
"""
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import fftconvolve, find_peaks

from normsynth.config import KDE_GRID_SIZE, KDE_MIN_SAMPLES, PEAK_PROMINENCE
from normsynth.models.errors import ContractError, NoPeakError, NumericalError
from normsynth.models.volume import Contrast

# Setup logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Smoothed histogram: pdf sampled on a uniform intensity grid"""
    grid: np.ndarray
    pdf: np.ndarray
    bandwidth: float

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        pdf = np.asarray(self.pdf, dtype=np.float64)
        if grid.ndim != 1 or grid.shape != pdf.shape or grid.size < 3:
            raise ContractError("Density grid and pdf must be 1D arrays of equal length >= 3")
        if np.any(np.diff(grid) <= 0):
            raise ContractError("Density grid must be strictly increasing")
        if np.any(pdf < 0):
            raise ContractError("Density pdf must be nonnegative")
        if not self.bandwidth > 0:
            raise ContractError(f"Bandwidth must be positive, got {self.bandwidth}")
        area = trapezoid(pdf, grid)
        if abs(area - 1.0) > 1e-3:
            raise ContractError(f"Density integrates to {area:.6f}, expected 1")
        object.__setattr__(self, 'grid', grid)
        object.__setattr__(self, 'pdf', pdf)
        object.__setattr__(self, 'bandwidth', float(self.bandwidth))

    def evaluate(self, x):
        """Linear interpolation of the pdf, zero off the grid"""
        return np.interp(x, self.grid, self.pdf, left=0.0, right=0.0)


class Mode(NamedTuple):
    intensity: float
    density: float


@dataclass(frozen=True)
class LandmarkVector:
    percentiles: tuple
    values: tuple

    def __post_init__(self):
        if len(self.percentiles) != len(self.values):
            raise ContractError("Landmark percentiles and values differ in length")
        if any(b < a for a, b in zip(self.values, self.values[1:])):
            raise ContractError("Landmark values must be nondecreasing")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _as_samples(intensities) -> np.ndarray:
    samples = np.asarray(intensities, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ContractError("Intensity collection is empty")
    return samples


def quantile(intensities, p: float) -> float:
    """
    Empirical quantile with linear interpolation between order statistics

    Args:
        intensities: Masked intensity collection
        p: Fraction in [0, 1]
    """
    samples = _as_samples(intensities)
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"Quantile fraction must be in [0, 1], got {p}")
    return float(np.quantile(samples, p, method='linear'))


def empirical_cdf(intensities, value: float) -> float:
    """F(value): fraction of samples less than or equal to value"""
    samples = np.sort(_as_samples(intensities))
    return float(np.searchsorted(samples, value, side='right') / samples.size)


def silverman_bandwidth(intensities) -> float:
    """h = 0.9 * min(std, IQR / 1.34) * n^(-1/5)"""
    samples = _as_samples(intensities)
    std = float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0
    q75, q25 = np.quantile(samples, [0.75, 0.25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        # heavy ties collapse the IQR; fall back to the standard deviation
        spread = std
    if spread <= 0:
        raise NumericalError("Cannot choose a KDE bandwidth for constant data")
    return 0.9 * spread * samples.size ** (-0.2)


def kde_estimate(intensities, bandwidth: Optional[float] = None,
                 grid_size: int = KDE_GRID_SIZE) -> DensityEstimate:
    """
    Gaussian kernel density estimate on a uniform grid

    Samples are linearly binned onto a grid spanning [min - 3h, max + 3h] and
    convolved with the sampled Gaussian kernel; the result is renormalized to
    unit area.

    Args:
        intensities: At least 50 samples
        bandwidth: Kernel standard deviation; Silverman's rule when omitted
        grid_size: Number of grid points
    """
    samples = _as_samples(intensities)
    if samples.size < KDE_MIN_SAMPLES:
        raise ContractError(f"KDE needs at least {KDE_MIN_SAMPLES} samples, got {samples.size}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(samples)
    elif not bandwidth > 0:
        raise ContractError(f"KDE bandwidth must be positive, got {bandwidth}")

    grid = np.linspace(samples.min() - 3 * bandwidth, samples.max() + 3 * bandwidth, grid_size)
    step = grid[1] - grid[0]

    # linear binning
    position = (samples - grid[0]) / step
    left = np.clip(np.floor(position).astype(np.int64), 0, grid_size - 2)
    frac = np.clip(position - left, 0.0, 1.0)
    counts = (np.bincount(left, weights=1.0 - frac, minlength=grid_size)
              + np.bincount(left + 1, weights=frac, minlength=grid_size))

    offsets = np.arange(-(grid_size - 1), grid_size) * step
    kernel = np.exp(-0.5 * (offsets / bandwidth) ** 2)
    pdf = np.clip(fftconvolve(counts, kernel, mode='same'), 0.0, None)

    area = trapezoid(pdf, grid)
    if not area > 0:
        raise NumericalError("Kernel density estimate has zero area")
    return DensityEstimate(grid=grid, pdf=pdf / area, bandwidth=bandwidth)


def find_modes(density: DensityEstimate, min_prominence: float = PEAK_PROMINENCE) -> List[Mode]:
    """
    Interior local maxima of the pdf, sorted by intensity

    Args:
        density: Estimated density
        min_prominence: Minimum prominence as a fraction of the global maximum

    Returns:
        List of Mode(intensity, density); may be empty
    """
    peaks, _ = find_peaks(density.pdf, prominence=min_prominence * float(density.pdf.max()))
    return [Mode(float(density.grid[i]), float(density.pdf[i])) for i in peaks]


def select_tissue_mode(modes: Sequence, contrast) -> float:
    """
    Pick the white-matter mode for a contrast

    T1 and FLAIR take the mode with the greatest intensity, T2 the highest
    peak (ties resolved toward the darker mode). Other contrasts follow T1.
    """
    if not modes:
        raise NoPeakError("no WM peak found")
    modes = [Mode(*m) for m in modes]
    if Contrast.parse(contrast) == Contrast.T2:
        best = min(modes, key=lambda m: (-m.density, m.intensity))
    else:
        best = max(modes, key=lambda m: m.intensity)
    return best.intensity


def landmark_percentiles(intensities, labels: Sequence[float]) -> LandmarkVector:
    """Quantiles of the samples at each percentile label"""
    samples = _as_samples(intensities)
    labels = tuple(float(label) for label in labels)
    if any(not 0 <= label <= 100 for label in labels) or list(labels) != sorted(labels):
        raise ContractError(f"Percentile labels must be sorted within [0, 100]: {labels}")
    values = tuple(quantile(samples, label / 100.0) for label in labels)
    return LandmarkVector(percentiles=labels, values=values)
