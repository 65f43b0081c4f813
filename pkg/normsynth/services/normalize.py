"""
The seven intensity-normalization methods behind one fit/apply interface

Every transform is applied to all voxels; zeroing the background for
synthesis is a separate apply_mask step.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from normsynth.config import (
    SCALE_CONSTANT,
    STRIPE_CLAMP_EPS,
    STRIPE_MIN_VOXELS,
    STRIPE_TAU,
    HM_LABELS,
    HM_SCALE,
)
from normsynth.models.errors import ContractError, DegenerateFitError, NumericalError
from normsynth.models.normalizer_model import (
    NormalizationMethod,
    NormalizerModel,
    NormalizerSpec,
    StandardHistogram,
    WmSource,
)
from normsynth.models.volume import Contrast, Mask, Volume, check_dims, masked_stats, masked_values
from normsynth.services.density import (
    empirical_cdf,
    find_modes,
    kde_estimate,
    landmark_percentiles,
    quantile,
    select_tissue_mode,
)
from normsynth.services.tissue import Tissue, class_mask, fcm_segment, gmm_fit, tissue_class_index, wm_mean

# Setup logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SampleImage:
    """
    One image of a fitting sample

    Attributes:
        volume: Image to normalize
        brain: Brain mask
        image_id: Stable identifier (RAVEL binds its model to these)
        csf: Optional CSF mask for RAVEL; derived by FCM when absent
    """
    volume: Volume
    brain: Mask
    image_id: str = ''
    csf: Optional[Mask] = None


@dataclass(frozen=True, eq=False)
class NormalizationResult:
    """Normalized volume plus the fitted statistics reported in audits"""
    volume: Volume
    stats: Dict[str, float]


def zscore_normalize(volume: Volume, brain: Mask) -> Volume:
    """(I - mu_B) / sigma_B over the whole image"""
    stats = masked_stats(volume, brain)
    if stats.std == 0:
        raise NumericalError("Z-score normalization needs nonzero masked variance")
    return volume.with_data((volume.data - stats.mean) / stats.std)


def wm_scale_normalize(volume: Volume, wm_value: float, scale: float = SCALE_CONSTANT) -> Volume:
    """c * I / wm_value, so the WM statistic of the output equals c"""
    if not wm_value > 0:
        raise NumericalError(f"WM statistic must be positive, got {wm_value}")
    return volume.with_data(scale * volume.data / wm_value)


def fcm_wm_mask(volume: Volume, brain: Mask, contrast=None) -> Mask:
    """WM mask from 3-class fuzzy c-means under the contrast rule"""
    contrast = contrast or volume.contrast
    return class_mask(fcm_segment(volume, brain, k=3), contrast, Tissue.WM)


def fcm_normalize(volume: Volume, brain: Mask, scale: float = SCALE_CONSTANT,
                  wm_mask: Optional[Mask] = None) -> NormalizationResult:
    """
    Scale the image so the mean over its WM mask equals c

    Args:
        wm_mask: Externally computed WM mask (e.g. from the subject's T1);
            segments the image itself when omitted
    """
    if wm_mask is None:
        wm_mask = fcm_wm_mask(volume, brain)
    check_dims(volume, wm_mask)
    mu = wm_mean(volume, wm_mask)
    return NormalizationResult(wm_scale_normalize(volume, mu, scale), {'wm_mean': mu})


def gmm_normalize(volume: Volume, brain: Mask, scale: float = SCALE_CONSTANT,
                  wm_mask: Optional[Mask] = None) -> NormalizationResult:
    """
    Scale the image by the mean of its WM mixture component

    The component follows the contrast rule (max mean on T1, middle on FLAIR,
    min on T2). With an external WM mask the mask mean is used instead.
    """
    if wm_mask is not None:
        mu = wm_mean(volume, wm_mask)
    else:
        params = gmm_fit(volume, brain, k=3)
        mu = float(params.means[tissue_class_index(volume.contrast, Tissue.WM)])
    return NormalizationResult(wm_scale_normalize(volume, mu, scale), {'wm_mean': mu})


def kde_wm_peak(volume: Volume, brain: Mask) -> float:
    modes = find_modes(kde_estimate(masked_values(volume, brain)))
    return select_tissue_mode(modes, volume.contrast)


def kde_normalize(volume: Volume, brain: Mask, scale: float = SCALE_CONSTANT,
                  wm_mask: Optional[Mask] = None) -> NormalizationResult:
    """Scale the image so its WM density peak lands at c"""
    if wm_mask is not None:
        peak = kde_wm_peak(volume, wm_mask)
    else:
        peak = kde_wm_peak(volume, brain)
    return NormalizationResult(wm_scale_normalize(volume, peak, scale), {'wm_peak': peak})


def _rescaled_landmarks(volume: Volume, brain: Mask, labels, scale_range) -> np.ndarray:
    landmarks = landmark_percentiles(masked_values(volume, brain), labels).as_array()
    low, high = landmarks[0], landmarks[-1]
    if high <= low:
        raise DegenerateFitError(f"Image landmarks collapse: p{labels[0]:g} == p{labels[-1]:g} == {low}")
    s_min, s_max = scale_range
    return s_min + (landmarks - low) / (high - low) * (s_max - s_min)


def hm_fit(sample: Sequence[Tuple[Volume, Mask]], labels=HM_LABELS, scale_range=HM_SCALE) -> StandardHistogram:
    """
    Learn a standard histogram by averaging rescaled landmarks

    Each image's landmarks are mapped affinely so its first and last landmark
    land on the ends of the standard scale, then averaged per landmark.
    """
    if not sample:
        raise ContractError("Histogram matching needs at least one image")
    rescaled = [_rescaled_landmarks(v, b, labels, scale_range) for v, b in sample]
    standard = np.mean(np.vstack(rescaled), axis=0)
    logger.debug(f"Standard histogram from {len(sample)} images: {np.round(standard, 3).tolist()}")
    return StandardHistogram(labels=tuple(labels), standard_values=tuple(standard.tolist()),
                             scale=tuple(scale_range))


def piecewise_linear_map(x: np.ndarray, knots: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Interpolate through (knots, values), extending the end segments' slopes"""
    out = np.interp(x, knots, values)
    low_slope = (values[1] - values[0]) / (knots[1] - knots[0])
    high_slope = (values[-1] - values[-2]) / (knots[-1] - knots[-2])
    below = x < knots[0]
    above = x > knots[-1]
    out[below] = values[0] + (x[below] - knots[0]) * low_slope
    out[above] = values[-1] + (x[above] - knots[-1]) * high_slope
    return out


def hm_apply(volume: Volume, brain: Mask, standard: StandardHistogram) -> Volume:
    """Map the image's landmarks onto the standard values piecewise linearly"""
    knots = landmark_percentiles(masked_values(volume, brain), standard.labels).as_array()
    if np.any(np.diff(knots) <= 0):
        raise ContractError(f"Image has duplicate adjacent landmarks (zero-width segment): {knots.tolist()}")
    values = np.asarray(standard.standard_values, dtype=np.float64)
    return volume.with_data(piecewise_linear_map(volume.data, knots, values))


@dataclass(frozen=True, eq=False)
class WhiteStripeResult:
    volume: Volume
    stripe: Tuple[float, float]
    mu: float
    sigma: float
    stripe_mask: Mask


def whitestripe_normalize(volume: Volume, brain: Mask, contrast=None, tau: float = STRIPE_TAU) -> WhiteStripeResult:
    """
    Z-score against the normal-appearing WM stripe

    mu is the WM density mode; the stripe holds the brain intensities strictly
    between F^-1(F(mu) - tau) and F^-1(F(mu) + tau); sigma is the stripe's
    sample standard deviation.
    """
    if not 0 < tau < 0.5:
        raise ContractError(f"tau must be in (0, 0.5), got {tau}")
    contrast = Contrast.parse(contrast or volume.contrast)
    values = masked_values(volume, brain)

    modes = find_modes(kde_estimate(values))
    mu = select_tissue_mode(modes, contrast)

    center = empirical_cdf(values, mu)
    low_p, high_p = center - tau, center + tau
    if low_p <= 0 or high_p >= 1:
        logger.warning(f"WhiteStripe quantiles {low_p:.4f}/{high_p:.4f} leave (0, 1); "
                       f"clamping to [{STRIPE_CLAMP_EPS}, {1 - STRIPE_CLAMP_EPS}]")
        low_p = min(max(low_p, STRIPE_CLAMP_EPS), 1 - STRIPE_CLAMP_EPS)
        high_p = min(max(high_p, STRIPE_CLAMP_EPS), 1 - STRIPE_CLAMP_EPS)
    low, high = quantile(values, low_p), quantile(values, high_p)

    stripe_mask = brain.data & (volume.data > low) & (volume.data < high)
    stripe = volume.data[stripe_mask]
    if stripe.size < STRIPE_MIN_VOXELS:
        raise NumericalError(f"White stripe holds {stripe.size} voxels, need {STRIPE_MIN_VOXELS}")
    sigma = float(np.std(stripe, ddof=1))
    if sigma == 0:
        raise NumericalError("White stripe has zero variance")

    return WhiteStripeResult(
        volume=volume.with_data((volume.data - mu) / sigma),
        stripe=(low, high),
        mu=mu,
        sigma=sigma,
        stripe_mask=Mask(stripe_mask)
    )


def _as_sample(item, index: int) -> SampleImage:
    if isinstance(item, SampleImage):
        return item
    volume, brain = item[0], item[1]
    csf = item[2] if len(item) > 2 else None
    return SampleImage(volume=volume, brain=brain, image_id=str(index), csf=csf)


def fit(spec: NormalizerSpec, sample: Sequence) -> NormalizerModel:
    """
    Fit a normalizer on a sample of images

    Image-wise methods carry no state; HM learns a standard histogram; RAVEL
    learns its basis and coefficients on the (co-registered) sample.

    Args:
        spec: Method and parameters
        sample: SampleImage items or (volume, brain[, csf]) tuples, in a fixed order
    """
    if not sample:
        raise ContractError("Cannot fit a normalizer on an empty sample")
    images = [_as_sample(item, i) for i, item in enumerate(sample)]

    if spec.method == NormalizationMethod.HM:
        state = hm_fit([(s.volume, s.brain) for s in images], spec.labels, spec.scale_range)
        return NormalizerModel(spec=spec, state=state)

    if spec.method == NormalizationMethod.RAVEL:
        from normsynth.services.ravel import fcm_csf_mask, ravel_fit_apply

        dims = images[0].volume.dims
        for s in images:
            if s.volume.dims != dims:
                raise ContractError(f"RAVEL needs co-registered volumes: {s.image_id} has dims "
                                    f"{s.volume.dims}, expected {dims}")
        triples = []
        for s in images:
            ws = whitestripe_normalize(s.volume, s.brain, spec.contrast or s.volume.contrast, spec.tau)
            csf = s.csf if s.csf is not None else fcm_csf_mask(s.volume, s.brain)
            triples.append((ws.volume, s.brain, csf))
        _, ravel_model = ravel_fit_apply(triples, rank=spec.rank, center=spec.center,
                                         image_ids=[s.image_id for s in images])
        return NormalizerModel(spec=spec, state=ravel_model)

    return NormalizerModel(spec=spec)


def apply(model: NormalizerModel, volume: Volume, brain: Mask, wm_mask: Optional[Mask] = None,
          image_id: Optional[str] = None) -> NormalizationResult:
    """
    Apply a fitted normalizer to one image

    Args:
        model: Output of fit or load_model
        volume: Image to transform; its contrast must match the model's
        brain: Brain mask
        wm_mask: WM mask for the '--wm-from t1' mode of FCM/GMM/KDE
        image_id: Required for RAVEL, which only applies to its fitted sample

    Returns:
        NormalizationResult with output dims equal to the input dims
    """
    spec = model.spec
    check_dims(volume, brain)
    if spec.contrast is not None and volume.contrast not in (spec.contrast, Contrast.OTHER):
        raise ContractError(f"Model was fit for {spec.contrast.value}, image is {volume.contrast.value}")
    method = spec.method

    if method == NormalizationMethod.ZSCORE:
        stats = masked_stats(volume, brain)
        return NormalizationResult(zscore_normalize(volume, brain), {'mean': stats.mean, 'std': stats.std})

    if method in (NormalizationMethod.FCM, NormalizationMethod.GMM, NormalizationMethod.KDE):
        if spec.wm_from == WmSource.SELF:
            wm_mask = None
        elif wm_mask is None and volume.contrast not in (Contrast.T1, Contrast.OTHER):
            raise ContractError(f"{method.value} with wm_from=t1 needs the subject's T1 WM mask "
                                f"for a {volume.contrast.value} image")
        normalize = {NormalizationMethod.FCM: fcm_normalize,
                     NormalizationMethod.GMM: gmm_normalize,
                     NormalizationMethod.KDE: kde_normalize}[method]
        return normalize(volume, brain, spec.scale, wm_mask=wm_mask)

    if method == NormalizationMethod.HM:
        return NormalizationResult(hm_apply(volume, brain, model.state), {})

    ws = whitestripe_normalize(volume, brain, spec.contrast or volume.contrast, spec.tau)
    stats = {'ws_mu': ws.mu, 'ws_sigma': ws.sigma, 'stripe_low': ws.stripe[0], 'stripe_high': ws.stripe[1]}
    if method == NormalizationMethod.WHITESTRIPE:
        return NormalizationResult(ws.volume, stats)

    if image_id is None:
        raise ContractError("RAVEL apply needs the image_id the model was fit with")
    ravel = model.state
    check_dims(volume, ravel.coefficients[0])
    corrected = ws.volume.data - ravel.correction(image_id)
    return NormalizationResult(ws.volume.with_data(corrected), stats)
