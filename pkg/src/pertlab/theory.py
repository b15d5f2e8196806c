"""Kernel-regime predictions for perturbation learning.

In the wide-network limit a trained two-layer leaky-ReLU net behaves like a
kernel machine: its decision value at z is predicted (up to positive scale) by

    f_hat(z) = (1/N) sum_n y_n Phi(x_n, z) <x_n, z> w_n

where Phi is the closed-form activation-derivative kernel and w_n is the
per-sample loss-derivative integral accumulated during training.  A second
net trained on normalized perturbations p_n (scenario "a": p_n = r_n,
scenario "b": p_n = x_n + r_n) is predicted by the composed expression

    g_hat(z) = (1/(N_g N_f)) sum_n Phi(p_n, z) w^g_n
               sum_k y_k Phi(x_n, x_k) <x_k, z> w^f_k

in which the target labels cancel (y_adv^2 = 1) and a positive scale factor
eps/||grad f|| has been dropped.  Sign agreement between f_hat and g_hat is
guaranteed whenever a data-only ratio clears (1-gamma)/(1+gamma); that
sufficient certificate is re-asserted at runtime on every condition report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import lambda_gram, phi_closed_gram
from .network import TrainTrace
from .perturbation import AdvSet


class InvariantViolation(RuntimeError):
    """A mathematically guaranteed relationship failed to hold numerically."""


def _as_batch(z: np.ndarray):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    return z, False


def f_hat(z, *, x, y, w, gamma: float):
    """Predicted decision value(s) of the clean-trained net at z."""
    Z, squeeze = _as_batch(z)
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    K = phi_closed_gram(x, Z, gamma=gamma, d=d)
    vals = ((np.asarray(y) * np.asarray(w))[:, None] * K * (x @ Z.T)).sum(axis=0)
    vals /= x.shape[0]
    return float(vals[0]) if squeeze else vals


def g_hat(z, *, p, wg, x, y, wf, gamma: float, x_src=None):
    """Predicted decision value(s) of the perturbation-trained net at z.

    ``x_src`` gives the clean source point of each row of ``p``; it defaults
    to ``x`` and only differs when degenerate rows were skipped.
    """
    Z, squeeze = _as_batch(z)
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    x_src = x if x_src is None else np.asarray(x_src, dtype=np.float64)
    if x_src.shape[0] != p.shape[0]:
        raise ValueError("p and x_src must have the same number of rows")
    d = x.shape[1]
    K_pz = phi_closed_gram(p, Z, gamma=gamma, d=d)  # (Ng, M)
    K_sx = phi_closed_gram(x_src, x, gamma=gamma, d=d)  # (Ng, Nf)
    inner = K_sx @ ((np.asarray(y) * np.asarray(wf))[:, None] * (x @ Z.T))  # (Ng, M)
    vals = (K_pz * np.asarray(wg)[:, None] * inner).sum(axis=0)
    vals /= p.shape[0] * x.shape[0]
    return float(vals[0]) if squeeze else vals


def cosine(u, v) -> float:
    """Cosine similarity between two vectors; zero vectors are an error."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def predicted_directions(*, x, y, w, gamma: float) -> np.ndarray:
    """Kernel-limit gradient direction at every training point.

    Row n is (1/N) sum_k y_k Phi(x_n, x_k) x_k w_k, the direction the actual
    input gradient grad f(x_n) should align with for wide nets.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    K = phi_closed_gram(x, x, gamma=gamma, d=d)
    return K @ (x * (np.asarray(y) * np.asarray(w))[:, None]) / x.shape[0]


def predicted_direction(trace: TrainTrace, n: int) -> np.ndarray:
    """Kernel-limit gradient direction at training point n of a trace."""
    ds = trace.dataset
    if not 0 <= n < ds.n:
        raise IndexError(f"sample index {n} out of range for N={ds.n}")
    D = predicted_directions(
        x=ds.x, y=ds.y, w=trace.integral_weights, gamma=trace.final_net.gamma
    )
    return D[n]


def mean_gradient_cosine(*, gradients, x, y, w, gamma: float) -> float:
    """Mean cosine between measured input gradients and their kernel-limit
    directions; zero-norm rows contribute 0."""
    G = np.asarray(gradients, dtype=np.float64)
    D = predicted_directions(x=x, y=y, w=w, gamma=gamma)
    ng = np.linalg.norm(G, axis=1)
    nd = np.linalg.norm(D, axis=1)
    denom = ng * nd
    dots = np.einsum("ij,ij->i", G, D)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return float(cos.mean())


def mean_gradient_cosine_from_trace(trace: TrainTrace) -> float:
    ds = trace.dataset
    G = trace.final_net.input_gradient(ds.x)
    return mean_gradient_cosine(
        gradients=G,
        x=ds.x,
        y=ds.y,
        w=trace.integral_weights,
        gamma=trace.final_net.gamma,
    )


def sufficient_ratio(z, *, x, y, w):
    """Data-only ratio behind the sign-agreement certificate.

    numerator:   |sum_n y_n <x_n, z> w_n|
    denominator: max over c in {x_1..x_N, z} of sum_n lambda(x_n, c) |<x_n, z>| w_n

    The 0/0 case (z orthogonal to every sample) is defined as 0.  When the
    ratio exceeds (1-gamma)/(1+gamma), the kernel-value spread around its
    midpoint (bounded through lambda) is too small to flip any of the signed
    sums, so f_hat and g_hat for both scenarios share z's predicted sign.
    """
    Z, squeeze = _as_batch(z)
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    yw = np.asarray(y) * np.asarray(w)
    XZ = x @ Z.T  # (N, M)
    num = np.abs(yw @ XZ)
    B = np.abs(XZ) * np.asarray(w)[:, None]
    lam_xx = lambda_gram(x, x, d=d)  # (N, N), symmetric
    # lambda(x, x) = 1 identically, but the gram form loses that to
    # cancellation; pin it so self-candidates are scored exactly
    np.fill_diagonal(lam_xx, 1.0)
    cand_x = (lam_xx @ B).max(axis=0)
    lam_zx = lambda_gram(x, Z, d=d)  # (N, M)
    cand_z = (lam_zx * B).sum(axis=0)
    den = np.maximum(cand_x, cand_z)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(ratio[0]) if squeeze else ratio


def width_diagnostic(trace_f: TrainTrace, trace_g: TrainTrace) -> float:
    """Width scale above which the lazy/kernel description should hold for
    the trained pair: d^2 (mean w^f + mean w^g)^2."""
    d = trace_f.dataset.d
    wf = trace_f.integral_weights
    wg = trace_g.integral_weights
    return float(d**2 * (np.mean(wf) + np.mean(wg)) ** 2)


@dataclass
class ConditionReport:
    """Evaluation of the sign-prediction conditions at a single probe z.

    margin_f and margin_g are |f_hat| and |g_hat| with the mean integral
    weights divided out, so that for the identity loss (w_n = T exactly)
    they reduce to the weight-free kernel sums the thresholds were stated
    for.  thresholds_used records c1, c2 and the resolved right-hand sides:

        threshold1 = c1 (1 + 1/T_f)
        threshold2 = c2 (1/T_f + (sqrt(d)/eps)(1/T_g + tail(scenario)))

    with T the flow time (mean weight) of the respective run, tail = 1/sqrt(N)
    for scenario "a" and sqrt(sum_n (<x_n,z>+1)^2)/N for scenario "b".
    """

    z: np.ndarray
    f_hat: float
    g_hat: float
    margin_f: float
    margin_g: float
    sign_f: float
    sign_g: float
    signs_agree: bool  # equal signs, an exact 0 counting as its own sign
    sufficient_ratio: float
    sufficient_threshold: float  # (1-gamma)/(1+gamma)
    width_diag: float
    thresholds_used: dict = field(repr=False)
    conditions_hold: tuple = ()  # (margin 1, margin 2, certificate)
    scenario: str = "a"
    eps: float = 0.0

    @property
    def cond1(self) -> bool:
        return self.conditions_hold[0]

    @property
    def cond2(self) -> bool:
        return self.conditions_hold[1]

    @property
    def cond3(self) -> bool:
        return self.conditions_hold[2]

    def to_dict(self) -> dict:
        return {
            "z": [float(v) for v in np.asarray(self.z).ravel()],
            "f_hat": self.f_hat,
            "g_hat": self.g_hat,
            "margin_f": self.margin_f,
            "margin_g": self.margin_g,
            "sign_f": self.sign_f,
            "sign_g": self.sign_g,
            "signs_agree": self.signs_agree,
            "sufficient_ratio": self.sufficient_ratio,
            "sufficient_threshold": self.sufficient_threshold,
            "width_diag": self.width_diag,
            "thresholds_used": dict(self.thresholds_used),
            "conditions_hold": list(self.conditions_hold),
            "scenario": self.scenario,
            "eps": self.eps,
        }


def evaluate_conditions(
    z,
    trace_f: TrainTrace,
    adv: AdvSet,
    trace_g: TrainTrace,
    *,
    c1: float = 1.0,
    c2: float = 1.0,
) -> ConditionReport:
    """Evaluate the sign-prediction conditions for one probe point.

    Raises :class:`InvariantViolation` if the certificate fires but the two
    predictors disagree in sign -- that combination is mathematically
    impossible, so hitting it means a bug, not an unlucky draw.
    """
    z = np.asarray(z, dtype=np.float64)
    out = evaluate_conditions_grid(z[None, :], trace_f, adv, trace_g, c1=c1, c2=c2)
    sf, sg = float(out["sign_f"][0]), float(out["sign_g"][0])
    return ConditionReport(
        z=z,
        f_hat=float(out["fhat"][0]),
        g_hat=float(out["ghat"][0]),
        margin_f=float(np.abs(out["margin_f"][0])),
        margin_g=float(np.abs(out["margin_g"][0])),
        sign_f=sf,
        sign_g=sg,
        signs_agree=bool(sf == sg),
        sufficient_ratio=float(out["ratio"][0]),
        sufficient_threshold=float(out["certificate_threshold"]),
        width_diag=float(out["width_diag"]),
        thresholds_used={
            "c1": c1,
            "c2": c2,
            "threshold1": float(out["threshold1"]),
            "threshold2": float(out["threshold2"][0]),
        },
        conditions_hold=(
            bool(out["cond1"][0]),
            bool(out["cond2"][0]),
            bool(out["cond3"][0]),
        ),
        scenario=adv.scenario,
        eps=adv.eps,
    )


def evaluate_conditions_grid(
    Z: np.ndarray,
    trace_f: TrainTrace,
    adv: AdvSet,
    trace_g: TrainTrace,
    *,
    c1: float = 1.0,
    c2: float = 1.0,
) -> dict:
    """Vectorized form of :func:`evaluate_conditions` over rows of Z."""
    gamma = trace_f.final_net.gamma
    if trace_g.final_net.gamma != gamma:
        raise ValueError("f and g were trained with different gamma values")
    if adv.dataset.meta.get("source") != dict(trace_f.dataset.meta):
        raise ValueError("adv set was not derived from trace_f's dataset")
    if trace_g.dataset.meta != adv.dataset.meta:
        raise ValueError("trace_g was not trained on the given adv set")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    ds = trace_f.dataset
    X, y = ds.x, ds.y
    wf = trace_f.integral_weights
    wg = trace_g.integral_weights
    d = ds.d
    Tf, Tg = trace_f.flow_time, trace_g.flow_time
    eps = adv.eps
    if Tf <= 0 or Tg <= 0:
        raise ValueError("conditions need positive flow times for f and g")
    if eps <= 0:
        raise ValueError("conditions need a positive perturbation size")
    x_src = X[adv.kept]

    fv = f_hat(Z, x=X, y=y, w=wf, gamma=gamma)
    gv = g_hat(
        Z, p=adv.dataset.x, wg=wg, x=X, y=y, wf=wf, gamma=gamma, x_src=x_src
    )
    margin_f = fv / wf.mean()
    margin_g = gv / (wf.mean() * wg.mean())

    threshold1 = c1 * (1.0 + 1.0 / Tf)
    if adv.scenario == "a":
        tail = 1.0 / np.sqrt(adv.dataset.n) * np.ones(Z.shape[0])
    else:
        tail = np.sqrt(((X @ Z.T + 1.0) ** 2).sum(axis=0)) / X.shape[0]
    threshold2 = c2 * (1.0 / Tf + (np.sqrt(d) / eps) * (1.0 / Tg + tail))

    ratio = sufficient_ratio(Z, x=X, y=y, w=wf)
    cert_thr = (1.0 - gamma) / (1.0 + gamma)

    cond1 = np.abs(margin_f) > threshold1
    cond2 = np.abs(margin_g) > threshold2
    cond3 = ratio > cert_thr
    sign_f = np.sign(fv)
    sign_g = np.sign(gv)

    bad = cond3 & ((sign_f != sign_g) | (sign_f == 0.0))
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise InvariantViolation(
            "certificate fired but predicted signs disagree at probe "
            f"{Z[j]!r}: f_hat={fv[j]!r}, g_hat={gv[j]!r}, ratio={ratio[j]!r}"
        )

    return {
        "fhat": fv,
        "ghat": gv,
        "margin_f": margin_f,
        "margin_g": margin_g,
        "threshold1": threshold1,
        "threshold2": threshold2,
        "ratio": ratio,
        "certificate_threshold": cert_thr,
        "cond1": cond1,
        "cond2": cond2,
        "cond3": cond3,
        "sign_f": sign_f,
        "sign_g": sign_g,
        "width_diag": float(d**2 * (wf.mean() + wg.mean()) ** 2),
    }
