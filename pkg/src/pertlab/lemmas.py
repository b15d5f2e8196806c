"""Monte-Carlo coverage checks for the concentration bounds the theory
leans on, plus the lazy-regime diagnostic for trained traces.

Each ``check_*`` draws ``trials`` independent replicas of the bounded
quantity and counts how often it escapes its high-probability bound.  A
check passes when the empirical failure rate stays within binomial noise of
the nominal level:

    failures / trials <= delta + 3 sqrt(delta (1 - delta) / trials)

Trials are generated in fixed-size blocks, one spawned child seed per block,
so the failure counts are reproducible and the blocks could be farmed out
to workers without changing the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import TrainTrace

_TRIAL_BLOCK = 512


@dataclass
class CoverageResult:
    lemma_id: str
    trials: int
    failures: int
    rate: float
    delta: float
    limit: float  # largest admissible rate
    bound: float  # the deterministic bound that was tested
    passed: bool

    def to_dict(self) -> dict:
        return {
            "lemma_id": self.lemma_id,
            "trials": self.trials,
            "failures": self.failures,
            "rate": self.rate,
            "delta": self.delta,
            "limit": self.limit,
            "bound": self.bound,
            "passed": self.passed,
        }


def coverage_pass(failures: int, trials: int, delta: float) -> bool:
    limit = delta + 3.0 * math.sqrt(delta * (1.0 - delta) / trials)
    return failures / trials <= limit


def _result(lemma_id, trials, failures, delta, bound) -> CoverageResult:
    limit = delta + 3.0 * math.sqrt(delta * (1.0 - delta) / trials)
    rate = failures / trials
    return CoverageResult(
        lemma_id=lemma_id,
        trials=trials,
        failures=failures,
        rate=rate,
        delta=delta,
        limit=limit,
        bound=float(bound),
        passed=rate <= limit,
    )


def _trial_blocks(trials: int, seed: int):
    if trials < 1:
        raise ValueError("trials must be positive")
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(math.ceil(trials / _TRIAL_BLOCK))
    done = 0
    for child in children:
        b = min(_TRIAL_BLOCK, trials - done)
        done += b
        yield np.random.default_rng(child), b


def check_gaussian_max(
    *, m: int, sigma2: float, delta: float, trials: int, seed: int
) -> CoverageResult:
    """max_i |G_i| over m draws of N(0, sigma2) vs sqrt(2 sigma2 ln(2m/delta))."""
    if m < 1:
        raise ValueError("need at least one coordinate")
    bound = math.sqrt(2.0 * sigma2 * math.log(2.0 * m / delta))
    sd = math.sqrt(sigma2)
    failures = 0
    for rng, b in _trial_blocks(trials, seed):
        g = rng.standard_normal((b, m)) * sd
        failures += int(np.count_nonzero(np.abs(g).max(axis=1) > bound))
    return _result("gaussian_max", trials, failures, delta, bound)


def check_subexp(
    *,
    m: int,
    gamma: float,
    sigma2: float,
    delta: float,
    trials: int,
    seed: int,
    y_mode: str = "slope",
) -> CoverageResult:
    """|sum_i X_i^2 Y_i - sigma2 m (1+gamma^2)/2| vs the sub-exponential bound
    max(16 sigma2 ln(2/delta), sqrt(128 m sigma2^2 ln(2/delta))).

    X_i ~ N(0, sigma2).  Y_i is the squared activation slope at an
    independent standard Gaussian (y_mode "slope", the case the analysis
    needs) or uniform on [gamma^2, 1] (y_mode "uniform", same mean, a
    stress variant).  Per block the X matrix is drawn before the Y source.
    gamma = 1 is allowed here (Y degenerates to 1); m = 0 never fails.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if y_mode not in ("slope", "uniform"):
        raise ValueError(f"unknown y_mode {y_mode!r}")
    log_term = math.log(2.0 / delta)
    bound = max(16.0 * sigma2 * log_term, math.sqrt(128.0 * m * sigma2**2 * log_term))
    mean = sigma2 * m * (1.0 + gamma**2) / 2.0
    sd = math.sqrt(sigma2)
    failures = 0
    for rng, b in _trial_blocks(trials, seed):
        x2 = (rng.standard_normal((b, m)) * sd) ** 2
        if y_mode == "slope":
            y = np.where(rng.standard_normal((b, m)) > 0.0, 1.0, gamma) ** 2
        else:
            y = rng.uniform(gamma**2, 1.0, (b, m))
        failures += int(np.count_nonzero(np.abs((x2 * y).sum(axis=1) - mean) > bound))
    return _result("subexp", trials, failures, delta, bound)


def small_count_k(m: int, eta: float) -> int:
    """Size of the near-kink set the lazy analysis is allowed to ignore."""
    return math.ceil(eta * math.sqrt(m))


def small_count_threshold(*, m: int, k: int, delta: float, sigma2: float) -> float:
    """Level t such that with prob >= 1 - delta at most k of m draws of
    N(0, sigma2) satisfy |G_i| <= t.

    Inverts the tail comparison erf(x) <= sqrt(1 - exp(-4x^2/pi)) at the
    empirical quantile (k+1)/m after subtracting the DKW-style slack
    sqrt(ln(1/delta) / (2m)).
    """
    if not 1 <= k <= m - 1:
        raise ValueError(f"k={k} must lie in [1, m-1] for m={m}")
    q = (k + 1) / m - math.sqrt(-math.log(delta) / (2.0 * m))
    if not 0.0 < q < 1.0:
        raise ValueError(
            f"inadmissible parameters: corrected quantile {q:.4g} outside (0, 1); "
            "need (k+1)/m comfortably above sqrt(ln(1/delta)/(2m))"
        )
    return math.sqrt(-(math.pi * sigma2 / 2.0) * math.log1p(-(q * q)))


def check_small_count(
    *, m: int, eta: float, sigma2: float, delta: float, trials: int, seed: int
) -> CoverageResult:
    """Counts of |G_i| <= t with t from :func:`small_count_threshold`; a trial
    fails when more than k = ceil(eta sqrt(m)) draws land that close to 0."""
    k = small_count_k(m, eta)
    thr = small_count_threshold(m=m, k=k, delta=delta, sigma2=sigma2)
    sd = math.sqrt(sigma2)
    failures = 0
    for rng, b in _trial_blocks(trials, seed):
        g = rng.standard_normal((b, m)) * sd
        failures += int(np.count_nonzero((np.abs(g) <= thr).sum(axis=1) > k))
    return _result("small_count", trials, failures, delta, thr)


def check_hoeffding(
    *, scales: np.ndarray, delta: float, trials: int, seed: int
) -> CoverageResult:
    """|sum_i s_i xi_i| for Rademacher xi vs sqrt(2 ln(2/delta) sum s_i^2)."""
    s = np.asarray(scales, dtype=np.float64)
    bound = math.sqrt(2.0 * math.log(2.0 / delta) * float(s @ s))
    failures = 0
    for rng, b in _trial_blocks(trials, seed):
        xi = rng.integers(0, 2, (b, s.shape[0])) * 2 - 1
        failures += int(np.count_nonzero(np.abs(xi @ s) > bound))
    return _result("hoeffding", trials, failures, delta, bound)


def c_thr(z: np.ndarray, *, m: int, eta: float, delta: float, d: int) -> float:
    """Kink-proximity scale at probe z: preactivations there have variance
    ||z||^2/d + 1, and the sqrt(2) folds the drift budget in."""
    z = np.asarray(z, dtype=np.float64)
    sigma2 = float(z @ z) / d + 1.0
    k = small_count_k(m, eta)
    return math.sqrt(2.0) * small_count_threshold(m=m, k=k, delta=delta, sigma2=sigma2)


@dataclass
class LazyDiagnostic:
    """Did a finished training run actually stay in the lazy regime at z?"""

    z: np.ndarray
    k: int
    small_set: np.ndarray  # indices of the k initially-nearest-kink units
    drift_max: float  # max_i |h_T(z)_i - h_0(z)_i|
    drift_bound: float  # C_thr(z)/sqrt(2)
    drift_ok: bool
    flip_fraction: float  # fraction of units whose preactivation sign changed
    flips_outside_small_set: int
    width_rhs1: float  # width the drift bound asks for (data + probe term)
    width_rhs2: float  # width the kernel concentration asks for
    width_ok: bool  # m >= max(rhs1, rhs2)

    def to_dict(self) -> dict:
        return {
            "z": [float(v) for v in np.asarray(self.z).ravel()],
            "k": self.k,
            "drift_max": self.drift_max,
            "drift_bound": self.drift_bound,
            "drift_ok": self.drift_ok,
            "flip_fraction": self.flip_fraction,
            "flips_outside_small_set": self.flips_outside_small_set,
            "width_rhs1": self.width_rhs1,
            "width_rhs2": self.width_rhs2,
            "width_ok": self.width_ok,
        }


def lazy_diagnostic(trace: TrainTrace, *, eta: float, delta: float):
    """Per-probe lazy-regime report for a trace trained with probes.

    Flip counts come from the signs recorded during training; drift and the
    near-kink set are recomputed from the stored initial and final nets.
    """
    if trace.probes is None:
        raise ValueError("trace carries no probes; train with probes= to use this")
    m = trace.initial_net.m
    d = trace.initial_net.d
    X = trace.dataset.x
    w = trace.integral_weights
    n = trace.dataset.n
    k = small_count_k(m, eta)
    out = []
    for j in range(trace.probes.shape[0]):
        z = trace.probes[j]
        h0 = trace.initial_net.preactivations(z)
        hT = trace.final_net.preactivations(z)
        small = np.argsort(np.abs(h0))[:k]
        drift = float(np.max(np.abs(hT - h0)))
        cthr = c_thr(z, m=m, eta=eta, delta=delta, d=d)
        bound = cthr / math.sqrt(2.0)

        flipped = np.flatnonzero(
            trace.probe_signs_initial[j] != trace.probe_signs_final[j]
        )
        outside = int(len(set(flipped.tolist()) - set(small.tolist())))

        rhs1 = (
            4.0
            * math.log(2.0 * m / delta)
            * float(np.sum((np.abs(X @ z) + 1.0) * w)) ** 2
            / (n**2 * cthr**2)
        )
        rhs2 = 4.0 * float(np.abs(X @ X.T) @ w @ w) / n**2

        out.append(
            LazyDiagnostic(
                z=z,
                k=k,
                small_set=small,
                drift_max=drift,
                drift_bound=bound,
                drift_ok=drift <= bound,
                flip_fraction=float(len(flipped) / m),
                flips_outside_small_set=outside,
                width_rhs1=rhs1,
                width_rhs2=rhs2,
                width_ok=m >= max(rhs1, rhs2),
            )
        )
    return out
