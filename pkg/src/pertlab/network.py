"""Two-layer leaky-ReLU networks and full-batch gradient-descent training.

The model is f(x) = sum_i alpha_i * phi(<v_i, x> + a_i) with
phi(h) = max(gamma * h, h), gamma in [0, 1), and phi'(0) := gamma.  Only the
input layer (V, a) is trained; the output weights alpha stay frozen at their
initialization.  Training minimizes the mean of ell(-y * f(x)) over the
dataset, where ell is one of the margin losses below (ell' > 0 everywhere).

``train`` returns a :class:`TrainTrace` carrying everything downstream
analysis needs: the initial and final nets, the dataset, the accumulated flow
time T = sum_t eta_t, the per-sample loss-derivative integral weights
w_n = sum_t ell'(-y_n f_t(x_n)) * eta_t (left Riemann rule), and optional
hidden-unit sign snapshots at a set of probe points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import Dataset

LOSSES = ("identity", "exponential", "logistic")


class TrainingDivergedError(RuntimeError):
    """Raised when the mean training loss stops being finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"training loss became non-finite at step {step} ({value!r})")
        self.step = step
        self.value = value


def loss_value(kind: str, s: np.ndarray) -> np.ndarray:
    """ell(s) for margin s = -y * f(x)."""
    if kind == "identity":
        return np.asarray(s, dtype=np.float64)
    if kind == "exponential":
        return np.exp(s)
    if kind == "logistic":
        return np.logaddexp(0.0, s)  # softplus, overflow-safe
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def loss_deriv(kind: str, s: np.ndarray) -> np.ndarray:
    """ell'(s); positive everywhere for every supported loss."""
    if kind == "identity":
        return np.ones_like(np.asarray(s, dtype=np.float64))
    if kind == "exponential":
        return np.exp(s)
    if kind == "logistic":
        return np.exp(-np.logaddexp(0.0, -s))  # sigmoid via stable softplus
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


@dataclass
class TwoLayerNet:
    V: np.ndarray  # (m, d) input-layer weights
    a: np.ndarray  # (m,)  input-layer biases
    alpha: np.ndarray  # (m,) frozen output weights
    gamma: float

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.V.ndim != 2:
            raise ValueError("V must be (m, d)")
        m = self.V.shape[0]
        if self.a.shape != (m,) or self.alpha.shape != (m,):
            raise ValueError("a and alpha must both have shape (m,)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def m(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]

    def preactivations(self, x: np.ndarray) -> np.ndarray:
        """h_i(x) = <v_i, x> + a_i; accepts a single point or a batch."""
        return np.asarray(x, dtype=np.float64) @ self.V.T + self.a

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.preactivations(x)
        return np.where(h > 0.0, h, self.gamma * h) @ self.alpha

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """grad_x f; at a kink the gamma branch is used (phi'(0) = gamma).

        For a batch (N, d) returns the (N, d) matrix of gradients.
        """
        h = self.preactivations(x)
        s = np.where(h > 0.0, 1.0, self.gamma)
        return (s * self.alpha) @ self.V

    def param_gradients(self, x: np.ndarray):
        """dF/dV (m, d) and dF/da (m,) of the scalar output at one point."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("param_gradients takes a single point")
        h = self.V @ x + self.a
        coeff = self.alpha * np.where(h > 0.0, 1.0, self.gamma)
        return np.outer(coeff, x), coeff

    def copy(self) -> "TwoLayerNet":
        return TwoLayerNet(
            V=self.V.copy(), a=self.a.copy(), alpha=self.alpha.copy(), gamma=self.gamma
        )


def init_net(m: int, d: int, gamma: float, seed: int) -> TwoLayerNet:
    """Standard initialization: V ~ N(0, 1/d), a ~ N(0, 1), alpha ~ N(0, 1/m)."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((m, d)) / np.sqrt(d)
    a = rng.standard_normal(m)
    alpha = rng.standard_normal(m) / np.sqrt(m)
    return TwoLayerNet(V=V, a=a, alpha=alpha, gamma=gamma)


@dataclass
class TrainTrace:
    initial_net: TwoLayerNet
    final_net: TwoLayerNet
    dataset: Dataset
    loss: str
    steps: int
    step_size: float
    flow_time: float  # sum of the step sizes actually applied
    mode: str  # "flow" (plain GD) or "momentum" (not a gradient-flow proxy)
    integral_weights: np.ndarray  # (N,) sum_t ell'(-y_n f_t(x_n)) eta_t
    loss_history: np.ndarray  # (steps,) mean loss at each step start
    step_size_history: np.ndarray  # (steps,) eta_t actually used
    probes: Optional[np.ndarray] = None
    probe_signs_initial: Optional[np.ndarray] = None  # (P, m) int8
    probe_signs_final: Optional[np.ndarray] = None

    def margins(self) -> np.ndarray:
        """Final-net margins y_n * f(x_n) on the training set."""
        return self.dataset.y * self.final_net.forward(self.dataset.x)


def _probe_signs(net: TwoLayerNet, probes: np.ndarray) -> np.ndarray:
    return np.sign(net.preactivations(probes)).astype(np.int8)


def train(
    net: TwoLayerNet,
    dataset: Dataset,
    *,
    loss: str = "identity",
    steps: int,
    step_size: float,
    optimizer: str = "plain",
    momentum: float = 0.9,
    plateau_factor: float = 0.1,
    plateau_patience: int = 10,
    probes: Optional[np.ndarray] = None,
) -> TrainTrace:
    """Full-batch gradient descent on mean ell(-y f(x)); alpha stays frozen.

    Plain mode applies V <- V + eta * (alpha_i/N) sum_n y_n ell'_n phi'(h_in) x_n
    (and likewise for a) with a constant step size, so the accumulated flow
    time is exactly steps * step_size.  Momentum mode keeps a velocity buffer
    (coefficient ``momentum``) and reduces the step size by ``plateau_factor``
    whenever the mean loss fails to improve for ``plateau_patience``
    consecutive steps; its traces are flagged ``mode="momentum"`` because the
    step-size sum is no longer a faithful gradient-flow time.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    if optimizer not in ("plain", "momentum"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    if dataset.d != net.d:
        raise ValueError(f"dataset dim {dataset.d} != net dim {net.d}")

    X = dataset.x
    yf = dataset.y.astype(np.float64)
    n = dataset.n
    m = net.m
    gamma = net.gamma
    V = net.V.copy()
    a = net.a.copy()
    alpha = net.alpha

    if probes is not None:
        probes = np.asarray(probes, dtype=np.float64)
        signs0 = _probe_signs(net, probes)
    else:
        signs0 = None

    w = np.zeros(n)
    flow = 0.0
    loss_hist = np.empty(steps)
    lr_hist = np.empty(steps)
    H = np.empty((n, m))

    use_momentum = optimizer == "momentum"
    if use_momentum:
        velV = np.zeros_like(V)
        vela = np.zeros_like(a)
        best = np.inf
        bad = 0
    lr = step_size

    for t in range(steps):
        np.matmul(X, V.T, out=H)
        H += a
        S = np.where(H > 0.0, 1.0, gamma)
        H *= S  # H is now phi(h)
        f = H @ alpha
        s_margin = -yf * f
        with np.errstate(over="ignore"):  # overflow -> inf is the diverged signal
            mean_loss = float(np.mean(loss_value(loss, s_margin)))
        loss_hist[t] = mean_loss
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(t, mean_loss)
        if use_momentum:
            if mean_loss < best:
                best = mean_loss
                bad = 0
            else:
                bad += 1
                if bad > plateau_patience:
                    lr *= plateau_factor
                    bad = 0
        lr_hist[t] = lr

        lp = loss_deriv(loss, s_margin)
        w += lp * lr
        flow += lr

        S *= ((yf * lp) / n)[:, None]  # S[n, i] = y_n ell'_n phi'(h_in) / N
        gV = alpha[:, None] * (S.T @ X)
        ga = alpha * S.sum(axis=0)
        if use_momentum:
            velV *= momentum
            velV += gV
            vela *= momentum
            vela += ga
            V += lr * velV
            a += lr * vela
        else:
            V += lr * gV
            a += lr * ga

    final = TwoLayerNet(V=V, a=a, alpha=alpha.copy(), gamma=gamma)
    return TrainTrace(
        initial_net=net.copy(),
        final_net=final,
        dataset=dataset,
        loss=loss,
        steps=steps,
        step_size=step_size,
        flow_time=flow,
        mode="momentum" if use_momentum else "flow",
        integral_weights=w,
        loss_history=loss_hist,
        step_size_history=lr_hist,
        probes=probes,
        probe_signs_initial=signs0,
        probe_signs_final=None if probes is None else _probe_signs(final, probes),
    )
