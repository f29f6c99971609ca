"""Random matrices and Monte-Carlo estimates of their extreme singular values.

Entries are i.i.d. from one of three distributions:

``gaussian``   N(0, 1)
``uniform``    U[0, 1]
``lognormal``  exp(Z), Z ~ N(0, 1)

each multiplied by ``DistSpec.scale``.  Trial ``i`` of a study with seed
``s`` draws its matrix from ``numpy.random.default_rng(SeedSequence(s).spawn(trials)[i])``
(PCG64), so a trial's matrix depends only on ``(s, i)`` and not on how
many workers run the study.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .svd import singular_values

__all__ = [
    "DISTRIBUTIONS",
    "DistSpec",
    "ExtremeSvEstimate",
    "SpectrumHistogram",
    "Prop2Check",
    "sample_matrix",
    "mp_edges",
    "trial_spectra",
    "study",
    "expected_extreme_sv",
    "spectrum_histogram",
    "verify_prop2",
]

DISTRIBUTIONS = ("gaussian", "uniform", "lognormal")


@dataclass(frozen=True)
class DistSpec:
    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.kind!r}; choose from {DISTRIBUTIONS}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def sample(self, rng, shape):
        if self.kind == "gaussian":
            x = rng.standard_normal(shape)
        elif self.kind == "uniform":
            x = rng.random(shape)
        else:
            x = np.exp(rng.standard_normal(shape))
        if self.scale != 1.0:
            x *= self.scale
        return x


def _dist(dist):
    return dist if isinstance(dist, DistSpec) else DistSpec(dist)


@dataclass(frozen=True)
class ExtremeSvEstimate:
    """Sample means and standard deviations (``ddof=1``) of the extreme singular values."""

    dist: str
    m: int
    n: int
    trials: int
    seed: int
    mean_sigma_min: float
    mean_sigma_max: float
    std_sigma_min: float
    std_sigma_max: float

    @property
    def se_sigma_min(self):
        return self.std_sigma_min / math.sqrt(self.trials)

    @property
    def se_sigma_max(self):
        return self.std_sigma_max / math.sqrt(self.trials)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SpectrumHistogram:
    """Histogram of every singular value from every trial."""

    dist: str
    m: int
    n: int
    trials: int
    seed: int
    edges: np.ndarray
    counts: np.ndarray

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Prop2Check:
    """Outcome of checking ``lower <= E s_min <= E s_max <= upper`` with ``k * SE`` slack."""

    holds: bool
    lower: float
    upper: float
    mean_sigma_min: float
    mean_sigma_max: float
    se_sigma_min: float
    se_sigma_max: float
    slack_se: float
    estimate: ExtremeSvEstimate

    def __bool__(self):
        return bool(self.holds)

    def to_dict(self):
        d = asdict(self)
        d["estimate"] = self.estimate.to_dict()
        return d


def sample_matrix(dist, m, n, seed):
    """One ``m x n`` matrix with i.i.d. entries; the same seed gives the same matrix."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    return _dist(dist).sample(np.random.default_rng(seed), (m, n))


def mp_edges(m, n):
    """Asymptotic range ``(sqrt(m) - sqrt(n), sqrt(m) + sqrt(n))`` of the extreme singular values."""
    if n < 1 or m < n:
        raise ValueError(f"need m >= n >= 1, got m={m}, n={n}")
    rm, rn = math.sqrt(m), math.sqrt(n)
    return rm - rn, rm + rn


def _check(m, n, trials):
    if n < 1 or m < n:
        raise ValueError(f"need m >= n >= 1, got m={m}, n={n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")


def trial_spectra(dist, m, n, trials, seed, workers=1):
    """Full spectra of ``trials`` independent matrices, shape ``(trials, n)``, descending rows."""
    _check(m, n, trials)
    dist = _dist(dist)
    children = np.random.SeedSequence(seed).spawn(trials)

    def one(child):
        return singular_values(dist.sample(np.random.default_rng(child), (m, n)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, children))
    else:
        rows = [one(c) for c in children]
    return np.array(rows)


def _estimate(dist, m, n, trials, seed, spectra):
    ddof = 1 if trials > 1 else 0
    smin, smax = spectra[:, -1], spectra[:, 0]
    return ExtremeSvEstimate(
        dist=dist.kind, m=m, n=n, trials=trials, seed=seed,
        mean_sigma_min=float(np.mean(smin)), mean_sigma_max=float(np.mean(smax)),
        std_sigma_min=float(np.std(smin, ddof=ddof)), std_sigma_max=float(np.std(smax, ddof=ddof)))


def _histogram(dist, m, n, trials, seed, spectra, bins):
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(spectra.ravel(), bins=bins)
    return SpectrumHistogram(dist.kind, m, n, trials, seed, edges, counts)


def study(dist, m, n, trials=100, seed=0, bins=50, workers=1):
    """Estimate and histogram from one set of trials: ``(ExtremeSvEstimate, SpectrumHistogram)``."""
    dist = _dist(dist)
    spectra = trial_spectra(dist, m, n, trials, seed, workers)
    return (_estimate(dist, m, n, trials, seed, spectra),
            _histogram(dist, m, n, trials, seed, spectra, bins))


def expected_extreme_sv(dist, m, n, trials=100, seed=0, workers=1):
    """Monte-Carlo means of the smallest and largest singular value."""
    dist = _dist(dist)
    spectra = trial_spectra(dist, m, n, trials, seed, workers)
    return _estimate(dist, m, n, trials, seed, spectra)


def spectrum_histogram(dist, m, n, trials=100, bins=50, seed=0, workers=1):
    """Histogram of the pooled singular values of ``trials`` matrices."""
    dist = _dist(dist)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    spectra = trial_spectra(dist, m, n, trials, seed, workers)
    return _histogram(dist, m, n, trials, seed, spectra, bins)


def verify_prop2(dist, m, n, trials=100, seed=0, slack_se=3.0, estimate=None, workers=1):
    """Check the non-asymptotic edge inequality for Gaussian matrices.

    Passes when ``mean_sigma_min >= sqrt(m) - sqrt(n) - slack_se * SE_min`` and
    ``mean_sigma_max <= sqrt(m) + sqrt(n) + slack_se * SE_max``.  A precomputed
    ``estimate`` for the same ``(m, n)`` may be supplied to avoid resampling.
    """
    dist = _dist(dist)
    if dist.kind != "gaussian" or dist.scale != 1.0:
        raise ValueError("the edge inequality is stated for standard Gaussian entries")
    lower, upper = mp_edges(m, n)
    est = estimate or expected_extreme_sv(dist, m, n, trials, seed, workers)
    if (est.m, est.n, est.dist) != (m, n, dist.kind):
        raise ValueError("estimate does not match (dist, m, n)")
    holds = (est.mean_sigma_min >= lower - slack_se * est.se_sigma_min
             and est.mean_sigma_max <= upper + slack_se * est.se_sigma_max)
    return Prop2Check(bool(holds), lower, upper, est.mean_sigma_min, est.mean_sigma_max,
                      est.se_sigma_min, est.se_sigma_max, slack_se, est)
