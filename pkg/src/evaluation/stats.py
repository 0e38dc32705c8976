"""
Confidence intervals and paired significance tests.

Resampling loops run in fixed-size chunks, each drawn from its own child of
``SeedSequence(seed)``, so results depend only on the seed and the number of
resamples.
"""

from dataclasses import dataclass
import itertools
import logging
from pathlib import Path
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from ..core.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

N_RESAMPLES = 10_000
CHUNK_SIZE = 1_000
MAX_EXACT_PAIRS = 20

Statistic = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class MetricSample:
    """Per-case metric values keyed by case id."""
    case_ids: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if len(self.case_ids) != len(self.values):
            raise ValidationError(f"{len(self.case_ids)} ids for {len(self.values)} values")
        if len(set(self.case_ids)) != len(self.case_ids):
            raise ValidationError("Duplicate case ids")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'MetricSample':
        """Read a ``case_id,value`` table."""
        try:
            frame = pd.read_csv(path, dtype={"case_id": str})
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise FormatError(f"Cannot read metric table {path}: {e}") from e
        missing = {"case_id", "value"} - set(frame.columns)
        if missing:
            raise FormatError(f"{path} lacks columns {sorted(missing)}")
        return cls(tuple(frame["case_id"]), frame["value"].to_numpy(dtype=np.float64))

    def paired_with(self, other: 'MetricSample') -> Tuple[np.ndarray, np.ndarray]:
        """Values of both samples aligned on this sample's id order.

        Raises:
            ValidationError: If the id sets differ
        """
        if set(self.case_ids) != set(other.case_ids):
            only = sorted(set(self.case_ids) ^ set(other.case_ids))
            raise ValidationError(f"Samples are not paired; unmatched ids: {only[:5]}")
        lookup = dict(zip(other.case_ids, other.values))
        return self.values, np.array([lookup[c] for c in self.case_ids], dtype=np.float64)


@dataclass(frozen=True)
class CIResult:
    point: float
    lower: float
    upper: float
    n_resamples: int
    seed: int
    percentile_lower: float = float("nan")
    percentile_upper: float = float("nan")
    z0: float = 0.0
    acceleration: float = 0.0
    # point outside [lower, upper]; happens with tiny or very skewed samples
    flagged: bool = False

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _chunks(seed: int, total: int, chunk: int = CHUNK_SIZE):
    sizes = [min(chunk, total - s) for s in range(0, total, chunk)]
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    for size, child in zip(sizes, children):
        yield size, np.random.default_rng(child)


def bootstrap_distribution(values: np.ndarray, statistic: Statistic, n: int, seed: int) -> np.ndarray:
    """Statistic over ``n`` resamples of the rows of ``values``."""
    m = values.shape[0]
    out = np.empty(n, dtype=np.float64)
    pos = 0
    for size, rng in _chunks(seed, n):
        idx = rng.integers(0, m, size=(size, m))
        for row in idx:
            out[pos] = statistic(values[row])
            pos += 1
    return out


def jackknife_values(values: np.ndarray, statistic: Statistic) -> np.ndarray:
    m = values.shape[0]
    keep = np.ones(m, dtype=bool)
    out = np.empty(m, dtype=np.float64)
    for i in range(m):
        keep[i] = False
        out[i] = statistic(values[keep])
        keep[i] = True
    return out


def bca_acceleration(jack: np.ndarray) -> float:
    u = jack.mean() - jack
    den = 6.0 * float(np.sum(u ** 2)) ** 1.5
    if den == 0:
        return 0.0
    return float(np.sum(u ** 3) / den)


def bca_bootstrap(values: Union[Sequence[float], np.ndarray], statistic: Statistic = np.mean,
                  n: int = N_RESAMPLES, seed: int = 0, alpha: float = 0.05) -> CIResult:
    """Bias-corrected and accelerated bootstrap interval.

    ``values`` may be 1-D (cases) or 2-D (cases x columns); rows are resampled
    together so statistics over several columns stay paired.

    Raises:
        ValidationError: For an empty sample or n < 1
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0 or values.shape[0] == 0:
        raise ValidationError("bca_bootstrap needs at least one value")
    if n < 1:
        raise ValidationError(f"Number of resamples must be >= 1, got {n}")
    point = float(statistic(values))
    if values.shape[0] == 1 or np.all(values == values[0]):
        return CIResult(point, point, point, n, seed, point, point)

    boot = bootstrap_distribution(values, statistic, n, seed)
    # ties at the point estimate count half, which keeps z0 finite for discrete statistics
    prop = (np.sum(boot < point) + 0.5 * np.sum(boot == point)) / n
    prop = float(np.clip(prop, 1.0 / (n + 1), n / (n + 1)))
    z0 = float(norm.ppf(prop))
    a = bca_acceleration(jackknife_values(values, statistic))

    levels = []
    for q in (alpha / 2, 1 - alpha / 2):
        zq = z0 + norm.ppf(q)
        levels.append(float(norm.cdf(z0 + zq / (1 - a * zq))))
    lower, upper = (float(v) for v in np.quantile(boot, levels))
    p_lo, p_hi = (float(v) for v in np.quantile(boot, [alpha / 2, 1 - alpha / 2]))
    flagged = not lower <= point <= upper
    if flagged:
        logger.warning("BCa interval [%.4g, %.4g] excludes the point estimate %.4g (n=%d)",
                       lower, upper, point, values.shape[0])
    return CIResult(point, lower, upper, n, seed, p_lo, p_hi, z0, a, flagged)


def _paired_diffs(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError(f"Paired samples differ in length: {x.size} vs {y.size}")
    if x.size == 0:
        raise ValidationError("Paired samples are empty")
    return x - y


def _at_least(t_star: np.ndarray, t: float) -> np.ndarray:
    return np.abs(t_star) >= abs(t) - 1e-12 * max(1.0, abs(t))


def paired_permutation_test(x: Sequence[float], y: Sequence[float], n: int = N_RESAMPLES,
                            seed: int = 0) -> float:
    """Two-sided sign-flip test on mean(x - y); p = (1 + #{|T*| >= |T|}) / (n + 1)."""
    d = _paired_diffs(x, y)
    t = float(d.mean())
    count = 0
    for size, rng in _chunks(seed, n):
        signs = rng.choice(np.array([-1.0, 1.0]), size=(size, d.size))
        count += int(_at_least(signs @ d / d.size, t).sum())
    return (1 + count) / (n + 1)


def exact_permutation_test(x: Sequence[float], y: Sequence[float]) -> float:
    """Exact sign-flip p-value by enumerating all 2^n sign patterns."""
    d = _paired_diffs(x, y)
    if d.size > MAX_EXACT_PAIRS:
        raise ValidationError(f"Exact enumeration is limited to {MAX_EXACT_PAIRS} pairs, got {d.size}")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=d.size)))
    return float(_at_least(signs @ d / d.size, float(d.mean())).mean())


@dataclass(frozen=True)
class HolmResult:
    reject: List[bool]
    adjusted: List[float]


def holm_bonferroni(pvals: Sequence[float], alpha: float = 0.05) -> HolmResult:
    """Holm step-down adjustment; outputs follow the input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    stepped = np.minimum(np.maximum.accumulate((m - np.arange(m)) * p[order]), 1.0)
    adjusted = np.empty(m)
    adjusted[order] = stepped
    return HolmResult(reject=[bool(v <= alpha) for v in adjusted], adjusted=adjusted.tolist())
