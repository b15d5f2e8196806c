"""Expected activation-derivative products for wide leaky-ReLU layers.

For hidden units with inner weights v ~ N(0, I_d/d) and bias a ~ N(0, 1) the
pre-activations (<v,z1>+a, <v,z2>+a) are centered bivariate normal with

    Var  = ||z_i||^2/d + 1        (i = 1, 2)
    Cov  = <z1,z2>/d + 1

so with rho = Cov/sqrt(Var1*Var2) and phi'(h) = 1 for h > 0, gamma otherwise,

    Phi(z1,z2) = E[phi'(h1) phi'(h2)]
               = gamma + (1-gamma)^2 * (1/4 + arcsin(rho)/(2*pi)),

using the orthant probability P(h1>0, h2>0) = 1/4 + arcsin(rho)/(2*pi).
A direct Monte Carlo sampler over (v, a) is kept as an independent estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PhiEstimate",
    "phi_closed",
    "phi_closed_gram",
    "phi_mc",
    "lambda_factor",
    "lambda_gram",
    "phi_bound",
]


@dataclass(frozen=True)
class PhiEstimate:
    """A kernel value together with how it was obtained."""

    value: float
    stderr: float
    method: str  # "closed" or "mc"
    n_samples: int

    def interval(self, k: float = 4.0) -> tuple[float, float]:
        return (self.value - k * self.stderr, self.value + k * self.stderr)


def _check_inputs(z1: np.ndarray, z2: np.ndarray, gamma: float, d: int) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if z1.shape != (d,) or z2.shape != (d,):
        raise ValueError(
            f"expected two vectors of length d={d}, got {z1.shape} and {z2.shape}"
        )


def _rho(z1: np.ndarray, z2: np.ndarray, d: int) -> float:
    if np.array_equal(z1, z2):
        # self-pair: mathematically rho = 1, and arcsin amplifies the float
        # noise of the dot products to ~1e-8 right at the endpoint
        return 1.0
    var1 = float(z1 @ z1) / d + 1.0
    var2 = float(z2 @ z2) / d + 1.0
    cov = float(z1 @ z2) / d + 1.0
    rho = cov / math.sqrt(var1 * var2)
    if abs(rho) > 1.0 + 1e-9:
        raise ValueError(f"correlation {rho} outside [-1, 1]; inputs not finite?")
    return min(1.0, max(-1.0, rho))


def _phi_from_rho(rho, gamma: float):
    return gamma + (1.0 - gamma) ** 2 * (0.25 + np.arcsin(rho) / (2.0 * math.pi))


def phi_closed(z1: np.ndarray, z2: np.ndarray, *, gamma: float, d: int) -> PhiEstimate:
    """Exact kernel value via the bivariate orthant probability."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    _check_inputs(z1, z2, gamma, d)
    value = float(_phi_from_rho(_rho(z1, z2, d), gamma))
    return PhiEstimate(value=value, stderr=0.0, method="closed", n_samples=0)


def phi_closed_gram(
    Z1: np.ndarray, Z2: np.ndarray, *, gamma: float, d: int
) -> np.ndarray:
    """Kernel matrix Phi(Z1[i], Z2[j]) for row-stacked inputs; vectorized."""
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=np.float64))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=np.float64))
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if Z1.shape[1] != d or Z2.shape[1] != d:
        raise ValueError("row dimension mismatch with d")
    var1 = np.einsum("ij,ij->i", Z1, Z1) / d + 1.0
    var2 = np.einsum("ij,ij->i", Z2, Z2) / d + 1.0
    cov = (Z1 @ Z2.T) / d + 1.0
    rho = cov / np.sqrt(np.outer(var1, var2))
    np.clip(rho, -1.0, 1.0, out=rho)
    # pin identical rows to rho = 1 exactly, matching the pairwise route;
    # scenario-b grams hit the self-kernel on every kept row
    ii, jj = np.nonzero(rho > 1.0 - 1e-9)
    for i, j in zip(ii, jj):
        if np.array_equal(Z1[i], Z2[j]):
            rho[i, j] = 1.0
    return _phi_from_rho(rho, gamma)


def phi_mc(
    z1: np.ndarray,
    z2: np.ndarray,
    *,
    gamma: float,
    d: int,
    n_samples: int,
    seed: int,
    block_size: int = 262_144,
) -> PhiEstimate:
    """Monte Carlo estimate of E[phi'(<v,z1>+a) phi'(<v,z2>+a)].

    Samples v ~ N(0, I_d/d) and a ~ N(0,1) directly (no reuse of the closed
    form's covariance reduction, so the two routes are independent). Blocks
    get their own child seeds and are reduced in a fixed order, which makes
    the estimate reproducible and embarrassingly parallel if ever needed.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    _check_inputs(z1, z2, gamma, d)
    if n_samples <= 1:
        raise ValueError("n_samples must exceed 1")
    root = np.random.SeedSequence(seed)
    n_blocks = (n_samples + block_size - 1) // block_size
    children = root.spawn(n_blocks)
    total = 0.0
    total_sq = 0.0
    left = n_samples
    scale = 1.0 / math.sqrt(d)
    for child in children:
        nb = min(block_size, left)
        left -= nb
        rng = np.random.default_rng(child)
        v = rng.standard_normal((nb, d)) * scale
        a = rng.standard_normal(nb)
        h1 = v @ z1 + a
        h2 = v @ z2 + a
        p = np.where(h1 > 0.0, 1.0, gamma) * np.where(h2 > 0.0, 1.0, gamma)
        total += float(p.sum())
        total_sq += float((p * p).sum())
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    stderr = math.sqrt(var / n_samples)
    return PhiEstimate(value=mean, stderr=stderr, method="mc", n_samples=n_samples)


def lambda_factor(z1: np.ndarray, z2: np.ndarray, *, d: int) -> float:
    """Distance-sensitive factor in (0.34, 1] controlling the kernel bound.

    lambda = 1 - sqrt( (e/2pi) *
        (||z1||^2 ||z2||^2 - <z1,z2>^2 + d ||z1-z2||^2) /
        (||z1||^2 ||z2||^2 + <z1,z2>^2 + d ||z1+z2||^2 + 2 d^2) )
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != (d,) or z2.shape != (d,):
        raise ValueError("expected two vectors of length d")
    n1 = float(z1 @ z1)
    n2 = float(z2 @ z2)
    ip = float(z1 @ z2)
    diff = float((z1 - z2) @ (z1 - z2))
    sm = float((z1 + z2) @ (z1 + z2))
    num = max(n1 * n2 - ip * ip + d * diff, 0.0)  # Cauchy-Schwarz: >= 0 up to fp
    den = n1 * n2 + ip * ip + d * sm + 2.0 * d * d
    return 1.0 - math.sqrt(math.e / (2.0 * math.pi) * num / den)


def lambda_gram(Z1: np.ndarray, Z2: np.ndarray, *, d: int) -> np.ndarray:
    """lambda_factor for all row pairs of Z1 (n x d) and Z2 (k x d)."""
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=np.float64))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=np.float64))
    n1 = np.einsum("ij,ij->i", Z1, Z1)
    n2 = np.einsum("ij,ij->i", Z2, Z2)
    ip = Z1 @ Z2.T
    nn = np.outer(n1, n2)
    ipsq = ip * ip
    diff = n1[:, None] + n2[None, :] - 2.0 * ip
    sm = n1[:, None] + n2[None, :] + 2.0 * ip
    num = np.maximum(nn - ipsq + d * diff, 0.0)
    den = nn + ipsq + d * sm + 2.0 * d * d
    return 1.0 - np.sqrt(math.e / (2.0 * math.pi) * num / den)


def phi_bound(
    z1: np.ndarray, z2: np.ndarray, *, gamma: float, d: int
) -> tuple[float, float]:
    """Interval |Phi - (1+gamma)^2/4| <= (1+gamma)(1-gamma)/4 * lambda.

    Only valid for distinct points; identical inputs are rejected.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    _check_inputs(z1, z2, gamma, d)
    if np.array_equal(z1, z2):
        raise ValueError("bound requires two distinct points")
    center = (1.0 + gamma) ** 2 / 4.0
    half = (1.0 + gamma) * (1.0 - gamma) / 4.0 * lambda_factor(z1, z2, d=d)
    return (center - half, center + half)
