"""Certification core: priors, the Gibbs posterior, and the bound families.

Bounds on the transformed true cost of a single controller drawn from a
posterior, each reported with the joint probability statement it carries:

* ``bound_randomized``  — any posterior, via the log density ratio (1-delta
  per side, 1-2delta jointly).
* ``bounds_qstar_exact`` — the optimal Gibbs posterior with an exactly known
  partition function (grid discretization); same probabilities.
* ``bounds_qstar_mc``   — Gibbs posterior with a Monte-Carlo partition
  estimate; a McDiarmid term covers the estimation error (1-2delta per side,
  1-3delta jointly).

All partition-function arithmetic is done in the log domain: at lambda* the
Gibbs weights span e^-80 and would underflow otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import sim


# ----------------------------------------------------------------------
# priors
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Gaussian1D:
    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be positive")

    def log_density(self, x):
        z = (x - self.mean) / self.std
        return -0.5 * ad.pow2(z) - math.log(self.std * math.sqrt(2.0 * math.pi))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(n)

    def interval(self, coverage_sigmas: float = 3.0) -> tuple[float, float]:
        return (self.mean - coverage_sigmas * self.std,
                self.mean + coverage_sigmas * self.std)


@dataclass(frozen=True)
class Uniform1D:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("need hi > lo")

    def log_density(self, x):
        inside = (np.asarray(ad.value_of(x)) >= self.lo) \
            & (np.asarray(ad.value_of(x)) <= self.hi)
        base = -math.log(self.hi - self.lo)
        return np.where(inside, base, -np.inf) + 0.0 * x  # keeps tape linkage

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=n)

    def interval(self, coverage_sigmas: float = 3.0) -> tuple[float, float]:
        return (self.lo, self.hi)


@dataclass(frozen=True)
class GaussianIso:
    """Spherical Gaussian over a flat parameter vector."""

    mean: np.ndarray
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be positive")

    @property
    def dim(self) -> int:
        return np.asarray(self.mean).size

    def log_density(self, theta):
        z = (theta - self.mean) * (1.0 / self.std)
        return (ad.sum_(ad.pow2(z)) * -0.5
                - self.dim * math.log(self.std * math.sqrt(2.0 * math.pi)))

    def log_density_batch(self, thetas: np.ndarray) -> np.ndarray:
        z = (np.asarray(thetas) - self.mean) / self.std
        return (-0.5 * np.sum(z * z, axis=-1)
                - self.dim * math.log(self.std * math.sqrt(2.0 * math.pi)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class Product2D:
    """Independent priors on the affine gain k and bias beta."""

    k: Gaussian1D
    beta: Gaussian1D | Uniform1D

    def log_density(self, theta):
        return self.k.log_density(theta[0]) + self.beta.log_density(theta[1])

    def log_density_batch(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas)
        return (np.asarray(self.k.log_density(thetas[..., 0]))
                + np.asarray(self.beta.log_density(thetas[..., 1])))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.k.sample(n, rng), self.beta.sample(n, rng)], axis=-1)


Prior = GaussianIso | Product2D


# ----------------------------------------------------------------------
# Gibbs posterior
# ----------------------------------------------------------------------
@dataclass
class GibbsPosterior:
    """prior x exp(-lambda * empirical cost), known up to -ln Z."""

    prior: Prior
    dataset: sim.NoiseDataset
    lam: float
    problem: object = None  # ControlProblem or any object with the evaluator API

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    def empirical(self, theta) -> float:
        return self.problem.empirical(theta, self.dataset)

    def log_unnorm(self, theta) -> float:
        lp = float(np.asarray(ad.value_of(self.prior.log_density(theta))))
        if not np.isfinite(lp):
            return -np.inf
        return lp - self.lam * self.empirical(theta)

    def log_unnorm_taped(self, theta_var: ad.Var):
        """Differentiable unnormalized log density (prior support assumed)."""
        lp = self.prior.log_density(theta_var)
        return lp - self.lam * self.problem.empirical_taped(theta_var, self.dataset)

    def grad_log_unnorm(self, theta: np.ndarray) -> np.ndarray:
        _, g = ad.gradient(self.log_unnorm_taped, theta)
        return g


def lambda_star(s: int, delta: float, c: float) -> float:
    """Bound-optimal Gibbs parameter sqrt(8 S ln(1/delta)) / C."""
    if s < 1 or not (0.0 < delta < 1.0) or c <= 0:
        raise ValueError("need S >= 1, delta in (0,1), C > 0")
    return math.sqrt(8.0 * s * math.log(1.0 / delta)) / c


def union_delta(delta: float, n_q: int) -> float:
    """delta' = delta / N_Q so bounds survive best-of-N_Q selection."""
    if n_q < 1:
        raise ValueError("N_Q must be >= 1")
    return delta / n_q


def partition_estimate(costs: np.ndarray, lam: float) -> float:
    """ln Z-hat from empirical costs of prior samples (log-sum-exp)."""
    costs = np.asarray(costs, dtype=float)
    if costs.size < 1:
        raise ValueError("need at least one prior sample")
    return float(_logsumexp(-lam * costs) - math.log(costs.size))


def _logsumexp(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(x - m))))


def mcdiarmid_correction(lam: float, c: float, n_p: int, delta: float) -> float:
    """(1/lam) ln(1 + (e^{lam C}-1)/N_P) sqrt((N_P/2) ln(1/delta))."""
    if n_p < 1:
        raise ValueError("N_P must be >= 1")
    return (math.log1p(math.expm1(lam * c) / n_p) / lam
            * math.sqrt(0.5 * n_p * math.log(1.0 / delta)))


# ----------------------------------------------------------------------
# bound reports
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class BoundReport:
    family: str                 # thm1 | cor2_exact | cor3_mc
    s: int
    delta: float
    lam: float
    c: float
    empirical_cost: float
    log_z: float                 # exact or estimated ln Z (nan for thm1)
    confidence_term: float       # (1/lam) ln(1/delta)
    slack_term: float            # lam C^2 / (8 S)
    mcdiarmid_term: float        # 0 unless cor3_mc
    upper: float
    lower: float
    per_side_validity: str
    joint_validity: str

    def __post_init__(self):
        for name in ("confidence_term", "slack_term", "mcdiarmid_term"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    CSV_FIELDS = ("family", "s", "delta", "lam", "c", "empirical_cost",
                  "log_z", "confidence_term", "slack_term", "mcdiarmid_term",
                  "upper", "lower", "per_side_validity", "joint_validity")

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def _terms(lam: float, delta: float, c: float, s: int) -> tuple[float, float]:
    if lam <= 0 or not (0.0 < delta < 1.0):
        raise ValueError("need lambda > 0 and delta in (0,1)")
    return math.log(1.0 / delta) / lam, lam * c * c / (8.0 * s)


def bound_randomized(l_hat: float, log_density_ratio: float, lam: float,
                     delta: float, c: float, s: int) -> BoundReport:
    """General randomized bounds for any posterior via ln dQ/dP(theta)."""
    conf, slack = _terms(lam, delta, c, s)
    ratio = log_density_ratio / lam
    return BoundReport(
        family="thm1", s=s, delta=delta, lam=lam, c=c, empirical_cost=l_hat,
        log_z=float("nan"), confidence_term=conf, slack_term=slack,
        mcdiarmid_term=0.0,
        upper=l_hat + ratio + conf + slack,
        lower=l_hat - ratio - conf - slack,
        per_side_validity="1-delta", joint_validity="1-2delta",
    )


def bounds_qstar_exact(l_hat: float, log_z: float, lam: float, delta: float,
                       c: float, s: int) -> BoundReport:
    """Bounds specialized to the optimal posterior with exact ln Z."""
    conf, slack = _terms(lam, delta, c, s)
    return BoundReport(
        family="cor2_exact", s=s, delta=delta, lam=lam, c=c,
        empirical_cost=l_hat, log_z=log_z, confidence_term=conf,
        slack_term=slack, mcdiarmid_term=0.0,
        upper=-log_z / lam + conf + slack,
        lower=2.0 * l_hat + log_z / lam - conf - slack,
        per_side_validity="1-delta", joint_validity="1-2delta",
    )


def bounds_qstar_mc(l_hat: float, log_z_hat: float, n_p: int, lam: float,
                    delta: float, c: float, s: int) -> BoundReport:
    """Monte-Carlo partition bounds with the McDiarmid overestimation term."""
    conf, slack = _terms(lam, delta, c, s)
    corr = mcdiarmid_correction(lam, c, n_p, delta)
    return BoundReport(
        family="cor3_mc", s=s, delta=delta, lam=lam, c=c,
        empirical_cost=l_hat, log_z=log_z_hat, confidence_term=conf,
        slack_term=slack, mcdiarmid_term=corr,
        upper=-log_z_hat / lam + conf + slack + corr,
        lower=2.0 * l_hat + log_z_hat / lam - conf - slack - corr,
        per_side_validity="1-2delta", joint_validity="1-3delta",
    )


# ----------------------------------------------------------------------
# two-stage inference
# ----------------------------------------------------------------------
def split_dataset(dataset: sim.NoiseDataset, s1: int) -> tuple:
    """Deterministic disjoint split into the first s1 and remaining
    sequences."""
    s = dataset.size
    if not (0 <= s1 <= s):
        raise ValueError("split size out of range")
    idx = np.arange(s)
    return idx[:s1], idx[s1:]


def two_stage(prior, dataset: sim.NoiseDataset, s1: int, lam: float,
              problem, resolution: int = 120):
    """Two-stage Gibbs inference with matched parameters lam_i = (S_i/S) lam.

    Returns (Q1, Q2) as grid posteriors; Q2 coincides with the single-stage
    posterior on the full dataset.  Thin wrapper over the grid machinery.
    """
    from . import inference
    return inference.two_stage_grid(prior, dataset, s1, lam, problem,
                                    resolution)


def two_stage_constant_terms(lam: float, s: int, s1: int, delta: float,
                             c: float, n_p: int) -> float:
    """Stage-2 constant terms of the MC bound; the split-search ranking key."""
    s2 = s - s1
    if s2 < 1:
        return float("inf")
    lam2 = lam * s2 / s
    conf, slack = _terms(lam2, delta, c, s2)
    return conf + slack + mcdiarmid_correction(lam2, c, n_p, delta)


def two_stage_split_search(candidate_splits, lam: float, s: int, delta: float,
                           c: float, n_p: int, evaluate_split,
                           top: int = 3) -> tuple:
    """Rank candidate splits (values of S1) by the stage-2 constant terms,
    fully evaluate the best few, and return the tightest.

    ``evaluate_split(s1) -> BoundReport`` runs the expensive path (stage-1
    inference plus the stage-2 MC bound).  Ties in the constant terms prefer
    smaller S1: more data for the certified stage.
    """
    candidates = sorted(set(int(x) for x in candidate_splits))
    if not candidates:
        raise ValueError("need at least one candidate split")
    ranked = sorted(
        candidates,
        key=lambda s1: (two_stage_constant_terms(lam, s, s1, delta, c, n_p), s1),
    )
    reports = [(s1, evaluate_split(s1)) for s1 in ranked[:top]]
    best_s1, best = min(reports, key=lambda pair: pair[1].upper)
    return best_s1, best, reports
