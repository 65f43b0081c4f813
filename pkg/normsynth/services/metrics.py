"""
Synthesis quality metrics and the statistics used to compare methods

Every metric is computed on masked voxels only, since normalized images live
on different scales and their backgrounds carry no information.
"""
import json
import logging
import os
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import correlate1d
from scipy.stats import norm, rankdata

from normsynth.config import (
    BOOTSTRAP_RESAMPLES,
    MI_BINS,
    MSSIM_K1,
    MSSIM_K2,
    MSSIM_SIGMA,
    MSSIM_WINDOW,
    SEED,
    SIGNIFICANCE_ALPHA,
    WILCOXON_EXACT_MAX_N,
)
from normsynth.models.errors import ContractError, EmptyMaskError, NumericalError, VolumeIOError
from normsynth.models.volume import Mask, Volume, check_dims, masked_values

# Setup logging
logger = logging.getLogger(__name__)

METRICS = ('NCC', 'MSSIM', 'MI')
WILCOXON_MIN_N = 5
REPORT_COLUMNS = ['pair', 'synth', 'method', 'image_id', 'metric', 'value']


def _paired_values(a: Volume, b: Volume, m: Mask) -> Tuple[np.ndarray, np.ndarray]:
    check_dims(a, b)
    check_dims(a, m)
    x, y = masked_values(a, m), masked_values(b, m)
    if x.size < 2:
        raise EmptyMaskError(f"Metric mask must contain at least 2 voxels, has {x.size}")
    return x, y


def ncc(a: Volume, b: Volume, m: Mask) -> float:
    """Pearson correlation of the masked voxel pairs"""
    x, y = _paired_values(a, b, m)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(xc, xc)), float(np.dot(yc, yc))
    if sxx == 0 or syy == 0:
        raise NumericalError("NCC is undefined for zero variance inside the mask")
    return float(np.clip(np.dot(xc, yc) / np.sqrt(sxx * syy), -1.0, 1.0))


def gaussian_weights(window: int = MSSIM_WINDOW, sigma: float = MSSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian window; its outer product is the SSIM window"""
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def mssim(a: Volume, b: Volume, m: Mask, window: int = MSSIM_WINDOW, sigma: float = MSSIM_SIGMA,
          k1: float = MSSIM_K1, k2: float = MSSIM_K2, two_d: bool = False) -> float:
    """
    Mean structural similarity over windows centered at the masked voxels

    Local means, variances and covariance use a separable Gaussian window
    with zero padding outside the volume. The dynamic range L is the joint
    masked max minus min of both images.

    Args:
        window: Odd window width in voxels
        sigma: Gaussian standard deviation in voxels
        two_d: Use in-plane (axes 0 and 1) windows instead of 3D ones
    """
    x, y = _paired_values(a, b, m)
    if window < 1 or window % 2 == 0:
        raise ContractError(f"SSIM window must be a positive odd width, got {window}")
    axes = (0, 1) if two_d else (0, 1, 2)
    if window > min(a.dims[i] for i in axes):
        raise ContractError(f"SSIM window {window} does not fit in volume {a.dims}")
    dynamic_range = max(x.max(), y.max()) - min(x.min(), y.min())
    if dynamic_range == 0:
        raise NumericalError("SSIM dynamic range is zero inside the mask")

    weights = gaussian_weights(window, sigma)

    def smooth(image: np.ndarray) -> np.ndarray:
        for axis in axes:
            image = correlate1d(image, weights, axis=axis, mode='constant', cval=0.0)
        return image

    ia, ib = a.data, b.data
    mu_a, mu_b = smooth(ia), smooth(ib)
    var_a = smooth(ia * ia) - mu_a * mu_a
    var_b = smooth(ib * ib) - mu_b * mu_b
    cov = smooth(ia * ib) - mu_a * mu_b

    c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.mean(ssim_map[m.data]))


def _bin_range(values: np.ndarray) -> Tuple[float, float]:
    low, high = float(values.min()), float(values.max())
    if high == low:
        return low - 0.5, high + 0.5
    return low, high


def _plugin_entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def entropy(volume: Volume, mask: Mask, bins: int = MI_BINS) -> float:
    """Plug-in entropy (nats) of the masked intensities in equal-width bins over their range"""
    values = masked_values(volume, mask)
    if values.size == 0:
        raise EmptyMaskError("Entropy mask is empty")
    counts, _ = np.histogramdd(values[:, None], bins=bins, range=[_bin_range(values)])
    return _plugin_entropy(counts)


def mutual_information(a: Volume, b: Volume, m: Mask, bins: int = MI_BINS) -> float:
    """
    Plug-in mutual information (nats) from the joint masked histogram

    Each image is binned with equal-width bins over its own masked range.
    Needs at least bins^2 masked voxels.
    """
    x, y = _paired_values(a, b, m)
    if x.size < bins * bins:
        raise ContractError(f"Mutual information with {bins} bins needs >= {bins * bins} voxels, got {x.size}")
    joint, _ = np.histogramdd(np.column_stack([x, y]), bins=bins, range=[_bin_range(x), _bin_range(y)])
    mi = _plugin_entropy(joint.sum(axis=1)) + _plugin_entropy(joint.sum(axis=0)) - _plugin_entropy(joint)
    return max(0.0, mi)


def slice_consistency(volume: Volume, mask: Mask, axis: int = 2) -> float:
    """
    Slice-to-slice intensity drift

    Mean absolute difference between the masked means of adjacent slices
    along an axis, relative to the masked mean absolute intensity.
    """
    check_dims(volume, mask)
    data = np.moveaxis(volume.data, axis, 0)
    inside = np.moveaxis(mask.data, axis, 0)
    means = [float(s[i].mean()) for s, i in zip(data, inside) if i.any()]
    if len(means) < 2:
        raise ContractError("Slice consistency needs at least two slices with masked voxels")
    scale = float(np.mean(np.abs(volume.data[mask.data])))
    if scale == 0:
        raise NumericalError("Masked intensities are all zero")
    return float(np.mean(np.abs(np.diff(means))) / scale)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    w_plus: float
    w_minus: float
    exact: bool


def _exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each doubled W+ value"""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x: Sequence[float], y: Optional[Sequence[float]] = None) -> WilcoxonResult:
    """
    Two-sided paired Wilcoxon signed-rank test

    Zero differences are dropped and tied |differences| share their average
    rank. Up to 25 nonzero differences the p-value is exact, from the full
    distribution of W+ over all 2^n sign assignments; above that the normal
    approximation with tie correction is used.
    Without ties the result matches scipy.stats.wilcoxon; its exact mode does
    not cover tied ranks, which the null distribution here does.

    Args:
        x: First sample, or a sequence of (x_i, y_i) pairs when y is omitted
        y: Second sample

    Returns:
        WilcoxonResult with statistic min(W+, W-) and p = min(1, 2 P(W <= statistic))
    """
    if y is None:
        pairs = np.asarray(x, dtype=np.float64).reshape(-1, 2)
        x, y = pairs[:, 0], pairs[:, 1]
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"Paired samples differ in length: {x.size} vs {y.size}")

    d = y - x
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        raise ContractError("no nonzero differences")
    if n < WILCOXON_MIN_N:
        raise ContractError(f"Wilcoxon test needs at least {WILCOXON_MIN_N} nonzero differences, got {n}")

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= WILCOXON_EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_null_counts(doubled)
        tail = counts[:int(np.rint(2 * statistic)) + 1].sum() / counts.sum()
        p_value = min(1.0, 2.0 * float(tail))
        exact = True
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        variance = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        if variance <= 0:
            raise NumericalError("Wilcoxon normal approximation has zero variance")
        z = (statistic - n * (n + 1) / 4.0) / np.sqrt(variance)
        p_value = min(1.0, 2.0 * float(norm.cdf(z)))
        exact = False

    return WilcoxonResult(statistic=statistic, p_value=p_value, n=n,
                          w_plus=w_plus, w_minus=w_minus, exact=exact)


def bootstrap_ci(values: Sequence[float], resamples: int = BOOTSTRAP_RESAMPLES, seed: int = SEED,
                 level: float = 0.95) -> Tuple[float, float, float]:
    """
    Percentile bootstrap confidence interval of the mean

    Returns:
        (mean, lower bound, upper bound)
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("Cannot bootstrap an empty sample")
    if not 0 < level < 1:
        raise ContractError(f"Confidence level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, values.size, size=(resamples, values.size))].mean(axis=1)
    tail = 100.0 * (1 - level) / 2
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(values.mean()), float(low), float(high)


def compute_metrics(prediction: Volume, truth: Volume, brain: Mask, bins: int = MI_BINS,
                    two_d: bool = False, window: int = MSSIM_WINDOW) -> Dict[str, float]:
    """NCC, MSSIM and MI of one prediction against its ground truth"""
    return {
        'NCC': ncc(prediction, truth, brain),
        'MSSIM': mssim(prediction, truth, brain, window=window, two_d=two_d),
        'MI': mutual_information(prediction, truth, brain, bins=bins),
    }


def _paired_series(frame: pd.DataFrame, method: str) -> pd.Series:
    return frame[frame['method'] == method].set_index('image_id')['value'].sort_index()


def _safe_wilcoxon(first: pd.Series, second: pd.Series) -> Tuple[float, float]:
    common = first.index.intersection(second.index)
    try:
        result = wilcoxon_signed_rank(first.loc[common].to_numpy(), second.loc[common].to_numpy())
        return result.statistic, result.p_value
    except ContractError as e:
        logger.warning(f"Wilcoxon skipped: {e}")
        return float('nan'), 1.0


def pairwise_method_tests(frame: pd.DataFrame, metric: str, alpha: float = SIGNIFICANCE_ALPHA,
                          exclude: Iterable[str] = ('raw',)) -> pd.DataFrame:
    """
    Wilcoxon test between every pair of methods on one metric

    Args:
        frame: Report rows for a single (pair, synth) group
        metric: Metric to compare
        alpha: Family-wise level, Bonferroni-divided by the number of pairs

    Returns:
        One row per method pair with the statistic, raw and corrected p, and
        the significantly better method (empty when not significant)
    """
    rows = frame[frame['metric'] == metric]
    methods = sorted(set(rows['method']) - set(exclude))
    pairs = list(combinations(methods, 2))
    records = []
    for first, second in pairs:
        a, b = _paired_series(rows, first), _paired_series(rows, second)
        statistic, p_value = _safe_wilcoxon(a, b)
        corrected = min(1.0, p_value * len(pairs))
        better = ''
        if corrected < alpha:
            better = first if a.mean() > b.mean() else second
        records.append({'metric': metric, 'method_a': first, 'method_b': second, 'statistic': statistic,
                        'p_value': p_value, 'p_bonferroni': corrected, 'better': better})
    return pd.DataFrame.from_records(
        records, columns=['metric', 'method_a', 'method_b', 'statistic', 'p_value', 'p_bonferroni', 'better'])


class QualityReport:
    """
    Per-image metric values with summaries and paired comparisons

    Rows are (pair, synth, method, image_id, metric, value); `pair` names the
    source->target contrasts and `synth` the regressor.
    """

    def __init__(self, frame: pd.DataFrame):
        missing = set(REPORT_COLUMNS) - set(frame.columns)
        if missing:
            raise ContractError(f"Quality report is missing columns {sorted(missing)}")
        self.frame = (frame[REPORT_COLUMNS]
                      .sort_values(['pair', 'synth', 'method', 'image_id', 'metric'])
                      .reset_index(drop=True))
        self._check_ranges()

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> 'QualityReport':
        return cls(pd.DataFrame.from_records(list(records), columns=REPORT_COLUMNS))

    @classmethod
    def read_csv(cls, path) -> 'QualityReport':
        try:
            frame = pd.read_csv(path, dtype={'image_id': str})
        except FileNotFoundError:
            raise VolumeIOError(f"Report not found: {path}")
        return cls(frame)

    def _check_ranges(self):
        values = self.frame.set_index('metric')['value']
        for metric, low, high in (('NCC', -1.0, 1.0), ('MSSIM', -1.0, 1.0), ('MI', 0.0, np.inf)):
            if metric in values.index:
                v = values.loc[[metric]]
                if ((v < low - 1e-12) | (v > high + 1e-12)).any():
                    raise NumericalError(f"{metric} values outside [{low}, {high}]")

    def __len__(self) -> int:
        return len(self.frame)

    def groups(self) -> List[Tuple[str, str]]:
        return sorted(set(zip(self.frame['pair'], self.frame['synth'])))

    def summary(self, resamples: int = BOOTSTRAP_RESAMPLES, seed: int = SEED) -> pd.DataFrame:
        """Mean and percentile-bootstrap 95% CI per (pair, synth, method, metric)"""
        records = []
        for key, group in self.frame.groupby(['pair', 'synth', 'method', 'metric'], sort=True):
            mean, low, high = bootstrap_ci(group['value'].to_numpy(), resamples=resamples, seed=seed)
            records.append(dict(zip(['pair', 'synth', 'method', 'metric'], key),
                                n=len(group), mean=mean, ci_low=low, ci_high=high))
        return pd.DataFrame.from_records(records)

    def compare_to_baseline(self, baseline: str = 'raw') -> pd.DataFrame:
        """Wilcoxon of every method against the baseline, per (pair, synth, metric)"""
        records = []
        for (pair, synth, metric), group in self.frame.groupby(['pair', 'synth', 'metric'], sort=True):
            if baseline not in set(group['method']):
                continue
            reference = _paired_series(group, baseline)
            for method in sorted(set(group['method']) - {baseline}):
                values = _paired_series(group, method)
                statistic, p_value = _safe_wilcoxon(reference, values)
                records.append({'pair': pair, 'synth': synth, 'method': method, 'metric': metric,
                                'statistic': statistic, 'p_value': p_value,
                                'mean_difference': float(values.mean() - reference.mean())})
        return pd.DataFrame.from_records(
            records, columns=['pair', 'synth', 'method', 'metric', 'statistic', 'p_value', 'mean_difference'])

    def method_tests(self, alpha: float = SIGNIFICANCE_ALPHA) -> pd.DataFrame:
        """Bonferroni-corrected pairwise tests among the normalization methods"""
        tables = []
        for pair, synth in self.groups():
            group = self.frame[(self.frame['pair'] == pair) & (self.frame['synth'] == synth)]
            for metric in sorted(set(group['metric'])):
                table = pairwise_method_tests(group, metric, alpha=alpha)
                table.insert(0, 'synth', synth)
                table.insert(0, 'pair', pair)
                tables.append(table)
        return pd.concat(tables, ignore_index=True) if tables else pd.DataFrame()

    def plot_data(self, resamples: int = BOOTSTRAP_RESAMPLES, seed: int = SEED) -> pd.DataFrame:
        """Bar-chart values: one row per (pair, synth, method) with mean and CI columns per metric"""
        summary = self.summary(resamples, seed)
        wide = summary.pivot_table(index=['pair', 'synth', 'method'], columns='metric',
                                   values=['mean', 'ci_low', 'ci_high'])
        wide.columns = [f"{metric}_{stat}" for stat, metric in wide.columns]
        return wide.reset_index()

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format='%.12g')
        logger.info(f"Wrote {len(self.frame)} report rows to {path}")

    def to_json(self, path, resamples: int = BOOTSTRAP_RESAMPLES, seed: int = SEED) -> None:
        """Nested values pair -> synth -> method -> metric -> image_id, plus summaries and tests"""
        nested: Dict[str, dict] = {}
        for row in self.frame.itertuples(index=False):
            (nested.setdefault(row.pair, {}).setdefault(row.synth, {})
             .setdefault(row.method, {}).setdefault(row.metric, {}))[row.image_id] = float(row.value)
        payload = {
            'values': nested,
            'summary': self.summary(resamples, seed).to_dict(orient='records'),
            'versus_baseline': self.compare_to_baseline().to_dict(orient='records'),
            'method_tests': self.method_tests().to_dict(orient='records'),
        }
        parent = os.path.dirname(os.path.abspath(os.fspath(path)))
        if not os.path.isdir(parent):
            raise VolumeIOError(f"Parent directory does not exist: {parent}")
        with open(path, 'w') as f:
            json.dump(payload, f, indent=2, default=float)
        logger.info(f"Wrote report JSON to {path}")
