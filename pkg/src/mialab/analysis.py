"""Metrics and loss-distribution theory checks.

Covers rank-based AUC with tie handling, population loss statistics, the
variance decomposition Var(a + b) = Var(a) + Var(b) + 2 Cov(a, b), the
closed-form Hellinger distance between Gaussians, the chained
Hellinger -> total-variation -> AUC upper bound, and the two factors that
fully characterize the Gaussian Hellinger distance given the std ratio c.

Conventions: population (biased) variance everywhere, so the variance
identity is exact in float64; Gaussian fits are method-of-moments.
"""

import math

import numpy as np

from .errors import DimensionError, MetricUndefinedError


def average_ranks(values):
    """1-based ranks with ties sharing their group's mean rank.

    Mean ranks of integer positions are half-integers, so they are exact
    in float64 for any realistic input size.
    """
    values = np.asarray(values)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts).astype(np.float64)
    group_rank = cum - (counts - 1) / 2.0
    return group_rank[inverse]


def compute_auc(score_set):
    """Pairwise-comparison AUC of membership scores, ties counted half.

    Members (truth 1) are the positive class. Equals the Mann-Whitney U
    statistic normalized by n_pos * n_neg.
    """
    scores = np.asarray(score_set.scores, dtype=np.float64)
    truths = np.asarray(score_set.truths)
    if scores.shape != truths.shape:
        raise DimensionError("scores and truths lengths differ")
    n_pos = int((truths == 1).sum())
    n_neg = int((truths == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both members and non-members")
    ranks = average_ranks(scores)
    rank_sum = ranks[truths == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class LossStats:
    """Population mean/variance of a per-sample loss sample."""

    def __init__(self, mean, variance, count):
        if variance < 0 or count < 1:
            raise ValueError("variance >= 0 and count >= 1 required")
        self.mean = float(mean)
        self.variance = float(variance)
        self.count = int(count)

    def as_dict(self):
        return {"mean": self.mean, "variance": self.variance, "count": self.count}


def loss_stats(losses):
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise MetricUndefinedError("empty loss sample")
    return LossStats(losses.mean(), losses.var(), losses.size)


def variance_decomposition(losses, deltas):
    """Check Var(l + dl) = Var(l) + Var(dl) + 2 Cov(l, dl) on data.

    Returns a dict with the three terms, Var(l + dl), the identity
    residual, and the two qualitative flags: Cov > 0 and whether the
    variance actually increased.
    """
    losses = np.asarray(losses, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if losses.shape != deltas.shape or losses.ndim != 1:
        raise DimensionError("losses and deltas must be equal-length vectors")
    if losses.size < 2:
        raise MetricUndefinedError("need at least 2 samples")
    var_l = float(losses.var())
    var_dl = float(deltas.var())
    cov = float(((losses - losses.mean()) * (deltas - deltas.mean())).mean())
    var_sum = float((losses + deltas).var())
    residual = abs(var_sum - (var_l + var_dl + 2.0 * cov))
    return {
        "var_l": var_l,
        "var_dl": var_dl,
        "cov": cov,
        "var_sum": var_sum,
        "identity_residual": residual,
        "cov_positive": cov > 0.0,
        "variance_increased": var_sum > var_l,
    }


class GaussianFit:
    """Mean and standard deviation of a fitted normal."""

    def __init__(self, mu, sigma):
        if not sigma > 0.0:
            raise ValueError("sigma must be positive")
        self.mu = float(mu)
        self.sigma = float(sigma)

    def as_dict(self):
        return {"mu": self.mu, "sigma": self.sigma}


def fit_gaussian(samples):
    """Method-of-moments fit (population sigma)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise MetricUndefinedError("need at least 2 samples to fit")
    sigma = samples.std()
    if sigma == 0.0:
        raise MetricUndefinedError("degenerate (constant) sample")
    return GaussianFit(samples.mean(), sigma)


def hellinger_gaussian(p, q):
    """Closed-form Hellinger distance between two normals.

    D_H^2 = 1 - sqrt(2 s1 s2 / (s1^2 + s2^2)) * exp(-(m1 - m2)^2 / (4 (s1^2 + s2^2)))
    Symmetric, zero iff the parameters coincide, always in [0, 1].
    """
    if p.sigma <= 0.0 or q.sigma <= 0.0:
        raise ValueError("sigmas must be positive")
    s2 = p.sigma ** 2 + q.sigma ** 2
    coeff = math.sqrt(2.0 * p.sigma * q.sigma / s2)
    expo = math.exp(-0.25 * (p.mu - q.mu) ** 2 / s2)
    d2 = 1.0 - coeff * expo
    return math.sqrt(max(d2, 0.0))


def tv_upper_bound(d_h):
    """Total-variation bound sqrt(2) * D_H, clamped at 1 (TV <= 1 always)."""
    if not 0.0 <= d_h <= 1.0:
        raise ValueError("Hellinger distance must be in [0, 1]")
    return min(1.0, math.sqrt(2.0) * d_h)


def auc_upper_bound(d_tv):
    """Attack-AUC cap -TV^2/2 + TV + 1/2; monotone from 0.5 up to 1."""
    if not 0.0 <= d_tv <= 1.0:
        raise ValueError("total variation must be in [0, 1]")
    return -0.5 * d_tv * d_tv + d_tv + 0.5


def bound_terms(mu1, mu2, sigma1, c_ratio):
    """The two factors whose product determines the Gaussian Hellinger gap.

    With c = sigma2/sigma1:
        term_star  = sqrt(2c / (1 + c^2))        (max 1 at c = 1, then falls)
        term_dstar = exp(-(mu1 - mu2)^2 / (4 (1 + c^2) sigma1^2))  (rises in c)
    and 1 - term_star * term_dstar = D_H^2.
    """
    if sigma1 <= 0.0 or c_ratio <= 0.0:
        raise ValueError("sigma1 and c_ratio must be positive")
    term_star = math.sqrt(2.0 * c_ratio / (1.0 + c_ratio ** 2))
    term_dstar = math.exp(
        -0.25 * (mu1 - mu2) ** 2 / ((1.0 + c_ratio ** 2) * sigma1 ** 2)
    )
    return term_star, term_dstar


class BoundReport:
    """The full Hellinger -> TV -> AUC chain for one pair of Gaussian fits."""

    def __init__(self, train_fit, test_fit):
        self.d_hellinger = hellinger_gaussian(train_fit, test_fit)
        self.d_tv_upper = tv_upper_bound(self.d_hellinger)
        self.auc_upper = auc_upper_bound(self.d_tv_upper)
        self.c_ratio = test_fit.sigma / train_fit.sigma
        self.term_star, self.term_dstar = bound_terms(
            train_fit.mu, test_fit.mu, train_fit.sigma, self.c_ratio
        )

    def as_dict(self):
        return {
            "d_hellinger": self.d_hellinger,
            "d_tv_upper": self.d_tv_upper,
            "auc_upper": self.auc_upper,
            "term_star": self.term_star,
            "term_dstar": self.term_dstar,
            "c_ratio": self.c_ratio,
        }


def pearson_correlation(xs, ys):
    """Product-moment correlation; rejects constant sequences."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DimensionError("xs and ys must be equal-length vectors")
    if xs.size < 2:
        raise MetricUndefinedError("need at least 2 points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = math.sqrt(float((dx * dx).sum()))
    sy = math.sqrt(float((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise MetricUndefinedError("correlation undefined for constant sequence")
    return float((dx * dy).sum() / (sx * sy))


class Histogram:
    """Uniform-bin counts plus explicit under/overflow bins."""

    def __init__(self, counts, bin_edges, underflow, overflow):
        self.counts = counts
        self.bin_edges = bin_edges
        self.underflow = underflow
        self.overflow = overflow

    def as_dict(self):
        return {
            "counts": [int(c) for c in self.counts],
            "bin_edges": [float(e) for e in self.bin_edges],
            "underflow": int(self.underflow),
            "overflow": int(self.overflow),
        }


def loss_histogram(losses, bin_count, value_range):
    """Histogram over [lo, hi]; the top edge lands in the last bin.

    In-range counts sum to the number of in-range samples; everything
    outside is tallied in the underflow/overflow bins.
    """
    lo, hi = value_range
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    if not lo < hi:
        raise ValueError("inverted or empty range")
    losses = np.asarray(losses, dtype=np.float64)
    in_range = losses[(losses >= lo) & (losses <= hi)]
    counts, edges = np.histogram(in_range, bins=bin_count, range=(lo, hi))
    underflow = int((losses < lo).sum())
    overflow = int((losses > hi).sum())
    return Histogram(counts, edges, underflow, overflow)


def generalization_gap(trace):
    """Final-epoch top-1 train accuracy minus test accuracy (percent)."""
    rec = trace.final
    return rec.train_acc1 - rec.test_acc1
