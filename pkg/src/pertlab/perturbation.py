"""Crafting normalized single-step perturbations from a trained net.

Given a trained classifier f and a target label y_adv, the perturbation is
one normalized gradient-descent step on the margin loss toward the target:

    r = -eps * grad_x ell(-y_adv f(x)) / ||grad_x ell(-y_adv f(x))||
      =  eps * y_adv * grad_x f(x) / ||grad_x f(x)||

The second form follows because ell' > 0 for every supported loss, so the
loss choice scales out under normalization.  ||r|| = eps by construction.

``build_adv_set`` applies this across a training trace and packages either
the bare perturbations (scenario "a") or the perturbed inputs (scenario "b"),
labeled by the targets, as a dataset a second network can train on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import Dataset
from .network import TrainTrace, TwoLayerNet

SCENARIOS = ("a", "b")
TARGET_MODES = ("uniform", "flip")


class DegenerateGradientError(ValueError):
    """The input gradient vanished, so no perturbation direction exists."""

    def __init__(self, message: str, indices: Sequence[int] = ()):
        super().__init__(message)
        self.indices = tuple(int(i) for i in indices)


def sample_target_labels(y: np.ndarray, *, mode: str, seed: int) -> np.ndarray:
    """Targets y_adv: drawn uniformly from {-1, +1}, or the flipped labels."""
    y = np.asarray(y)
    if mode == "flip":
        return (-y).astype(np.int8)
    if mode == "uniform":
        rng = np.random.default_rng(seed)
        return (rng.integers(0, 2, y.shape[0]) * 2 - 1).astype(np.int8)
    raise ValueError(f"unknown target mode {mode!r}; expected one of {TARGET_MODES}")


def make_perturbation(
    net: TwoLayerNet, x: np.ndarray, *, y_adv: int, eps: float
) -> np.ndarray:
    """One perturbation r with ||r|| = eps; raises if grad f(x) is zero."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if y_adv not in (-1, 1):
        raise ValueError(f"y_adv must be -1 or +1, got {y_adv}")
    g = net.input_gradient(np.asarray(x, dtype=np.float64))
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise DegenerateGradientError("grad_x f(x) is exactly zero", indices=(0,))
    return (eps * y_adv) * (g / norm)


@dataclass
class AdvSet:
    """A perturbation-derived training set plus its bookkeeping."""

    dataset: Dataset  # inputs p_n (kept rows only), labels y_adv
    r: np.ndarray  # (N, d) perturbations for *all* source rows
    y_adv: np.ndarray  # (N,) targets for all source rows
    scenario: str  # "a": p = r, "b": p = x + r
    eps: float
    kept: np.ndarray  # indices of source rows present in .dataset
    skipped: np.ndarray  # indices dropped for degenerate gradients


def build_adv_set(
    trace: TrainTrace,
    *,
    scenario: str,
    eps: float,
    target_mode: str = "uniform",
    seed: int = 0,
    on_degenerate: str = "raise",
) -> AdvSet:
    """Craft perturbations for every training point of a finished trace.

    eps = 0 is allowed as a control: the perturbations are identically zero
    (no gradients are evaluated), so scenario "b" reproduces the clean inputs
    under the target labels.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if on_degenerate not in ("raise", "skip"):
        raise ValueError(f"on_degenerate must be 'raise' or 'skip', got {on_degenerate!r}")

    net = trace.final_net
    X = trace.dataset.x
    n = trace.dataset.n
    y_adv = sample_target_labels(trace.dataset.y, mode=target_mode, seed=seed)

    if eps == 0.0:
        r = np.zeros_like(X)
        kept = np.arange(n)
        skipped = np.empty(0, dtype=np.intp)
    else:
        G = net.input_gradient(X)
        norms = np.linalg.norm(G, axis=1)
        dead = np.flatnonzero(norms == 0.0)
        if dead.size and on_degenerate == "raise":
            raise DegenerateGradientError(
                f"grad_x f vanished on {dead.size} sample(s)", indices=dead
            )
        kept = np.flatnonzero(norms > 0.0)
        skipped = dead
        r = np.zeros_like(X)
        r[kept] = (eps * y_adv[kept, None]) * (G[kept] / norms[kept, None])

    p = r if scenario == "a" else X + r
    meta = {
        "kind": "adv",
        "scenario": scenario,
        "eps": float(eps),
        "target_mode": target_mode,
        "target_seed": int(seed),
        "source": dict(trace.dataset.meta),
    }
    adv_ds = Dataset(x=p[kept], y=y_adv[kept], meta=meta)
    return AdvSet(
        dataset=adv_ds,
        r=r,
        y_adv=y_adv,
        scenario=scenario,
        eps=float(eps),
        kept=kept,
        skipped=skipped,
    )
