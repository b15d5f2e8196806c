"""Full perturbation-learning runs, sweeps, the cosine study, and the 2D
prediction-matching map.

A run is fully described by an ExperimentConfig: train f on clean data,
craft normalized perturbations from it, train g on the perturbation set
(scenario "a") or the perturbed inputs (scenario "b"), then score both nets
on the clean training data and a held-out test draw.  All randomness flows
from the four named seeds; the held-out set uses seed_data + TEST_SEED_OFFSET
and probe points seed_data + 2*TEST_SEED_OFFSET, so none of the three draws
can collide.  Sweep replicate s shifts every named seed by +s.

Tables carry their column list explicitly so an empty table still knows its
CSV header.  CSV floats are written with %.17g (bit-stable round trip).
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import (
    TEST_SEED_OFFSET,
    Dataset,
    gen_shifted_gaussian,
    gen_zero_mean_gaussian,
    holdout,
    load_idx_pair,
)
from .network import init_net, train
from .perturbation import build_adv_set
from .theory import evaluate_conditions_grid, predicted_directions, width_diagnostic

SWEEP_COLUMNS = [
    "axis",
    "value",
    "seed",
    "step_size_f",
    "step_size_g",
    "acc_f_train",
    "acc_g_clean",
    "agreement_test",
    "mean_cosine",
    "width_diag",
    "skipped",
    "mode",
]

MAP_COLUMNS = ["s", "t", "f_sign", "g_sign", "fhat", "ghat", "cond1", "cond2", "cond3"]

SWEEP_AXES = ("d", "m", "N", "eps", "T_f", "T_g")

_DATASETS = ("shifted", "zero_mean", "idx")

_INT_FIELDS = {
    "n",
    "d",
    "m",
    "steps_f",
    "steps_g",
    "n_test",
    "n_probes",
    "seed_data",
    "seed_net_f",
    "seed_net_g",
    "seed_targets",
    "class_pos",
    "class_neg",
}
_FLOAT_FIELDS = {
    "shift",
    "gamma",
    "step_size_f",
    "step_size_g",
    "eps",
    "eps_per_coord",
    "c1",
    "c2",
    "pixel_scale",
}


@dataclass
class ExperimentConfig:
    """One perturbation-learning run; defaults are the shifted-Gaussian
    scenario-A reference setting."""

    dataset: str = "shifted"
    n: int = 1000
    d: int = 100
    shift: float = 0.3
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None
    class_pos: Optional[int] = None
    class_neg: Optional[int] = None
    pixel_scale: float = 1.0
    m: int = 100
    gamma: float = 0.0
    loss: str = "identity"
    optimizer: str = "plain"
    steps_f: int = 1000
    steps_g: int = 1000
    step_size_f: float = 1.0
    step_size_g: float = 1.0
    scenario: str = "a"
    eps: Optional[float] = 0.01
    eps_per_coord: Optional[float] = None
    target_mode: str = "uniform"
    n_test: int = 1000
    n_probes: int = 10
    c1: float = 1.0
    c2: float = 1.0
    seed_data: int = 101
    seed_net_f: int = 1_000_202
    seed_net_g: int = 2_000_303
    seed_targets: int = 3_000_404
    outdir: str = "out"

    def to_text(self) -> str:
        lines = []
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if v is None:
                continue
            s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f_.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            try:
                kwargs[key] = cast_config_value(key, val.strip())
            except ValueError as e:
                raise ValueError(f"{e} (line {lineno})") from None
        # eps and eps_per_coord are an exclusive pair; a file that names only
        # the per-coordinate form means it, so drop the default eps
        if "eps_per_coord" in kwargs and "eps" not in kwargs:
            kwargs["eps"] = None
        return cls(**kwargs)


def cast_config_value(key: str, val: str):
    """Parse one 'key = value' right-hand side with the field's type."""
    if key not in {f_.name for f_ in fields(ExperimentConfig)}:
        raise ValueError(f"unknown config key {key!r}")
    if key in _INT_FIELDS:
        return int(val)
    if key in _FLOAT_FIELDS:
        return float(val)
    return val


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the run-defining fields (everything but outdir)."""
    payload = {k: v for k, v in asdict(cfg).items() if k != "outdir"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_eps(cfg: ExperimentConfig, d: Optional[int] = None) -> float:
    """The run's perturbation size; per-coordinate c makes it sqrt(d c^2)."""
    if (cfg.eps is None) == (cfg.eps_per_coord is None):
        raise ValueError("exactly one of eps and eps_per_coord must be set")
    if cfg.eps is not None:
        return float(cfg.eps)
    dd = cfg.d if d is None else d
    return math.sqrt(dd * cfg.eps_per_coord**2)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset not in _DATASETS:
        raise ValueError(f"unknown dataset {cfg.dataset!r}; expected one of {_DATASETS}")
    resolve_eps(cfg)  # checks the exclusive pair
    if cfg.eps is not None and cfg.eps < 0:
        raise ValueError("eps must be >= 0")
    if cfg.eps_per_coord is not None and cfg.eps_per_coord <= 0:
        raise ValueError("eps_per_coord must be positive")
    if cfg.n_test < 1:
        raise ValueError("n_test must be positive")
    if cfg.dataset == "idx" and not (cfg.idx_images and cfg.idx_labels):
        raise ValueError("idx dataset needs idx_images and idx_labels paths")


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "shifted":
        return gen_shifted_gaussian(cfg.n, cfg.d, seed=cfg.seed_data, shift=cfg.shift)
    if cfg.dataset == "zero_mean":
        return gen_zero_mean_gaussian(cfg.n, cfg.d, seed=cfg.seed_data)
    return load_idx_pair(
        cfg.idx_images,
        cfg.idx_labels,
        class_pos=cfg.class_pos,
        class_neg=cfg.class_neg,
        pixel_scale=cfg.pixel_scale,
    )


def holdout_dataset(cfg: ExperimentConfig, ds: Dataset) -> Dataset:
    if cfg.dataset == "idx":
        if not (cfg.idx_test_images and cfg.idx_test_labels):
            raise ValueError("idx dataset needs idx_test_images/idx_test_labels")
        return load_idx_pair(
            cfg.idx_test_images,
            cfg.idx_test_labels,
            class_pos=cfg.class_pos,
            class_neg=cfg.class_neg,
            pixel_scale=cfg.pixel_scale,
        )
    return holdout(ds.meta, cfg.n_test, seed=cfg.seed_data + TEST_SEED_OFFSET)


def gen_probes(cfg: ExperimentConfig, ds: Dataset) -> np.ndarray:
    """Probe points for condition reports and lazy diagnostics: a fresh draw
    from the data distribution on its own seed stream."""
    probe_ds = holdout(ds.meta, cfg.n_probes, seed=cfg.seed_data + 2 * TEST_SEED_OFFSET)
    return probe_ds.x


def _pipeline(cfg: ExperimentConfig, probes: Optional[np.ndarray] = None):
    ds = build_dataset(cfg)
    eps = resolve_eps(cfg, d=ds.d)
    net_f = init_net(cfg.m, ds.d, gamma=cfg.gamma, seed=cfg.seed_net_f)
    trace_f = train(
        net_f,
        ds,
        loss=cfg.loss,
        steps=cfg.steps_f,
        step_size=cfg.step_size_f,
        optimizer=cfg.optimizer,
        probes=probes,
    )
    adv = build_adv_set(
        trace_f,
        scenario=cfg.scenario,
        eps=eps,
        target_mode=cfg.target_mode,
        seed=cfg.seed_targets,
        on_degenerate="skip",
    )
    net_g = init_net(cfg.m, ds.d, gamma=cfg.gamma, seed=cfg.seed_net_g)
    trace_g = train(
        net_g,
        adv.dataset,
        loss=cfg.loss,
        steps=cfg.steps_g,
        step_size=cfg.step_size_g,
        optimizer=cfg.optimizer,
    )
    return ds, trace_f, adv, trace_g


def _mean_adv_cosine(adv, trace_f, gamma: float) -> float:
    """Mean cosine between the crafted perturbations and the kernel-limit
    direction (target sign divided out); zero rows contribute 0."""
    ds = trace_f.dataset
    D = predicted_directions(x=ds.x, y=ds.y, w=trace_f.integral_weights, gamma=gamma)
    target = adv.y_adv[:, None].astype(np.float64) * D
    num = np.einsum("ij,ij->i", adv.r, target)
    den = np.linalg.norm(adv.r, axis=1) * np.linalg.norm(target, axis=1)
    cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(cos.mean())


@dataclass
class RunResult:
    acc_f_train: float  # f on its clean training data
    acc_g_clean: float  # g on the same clean data: the transfer measure
    agreement_test: float  # sgn f = sgn g on the held-out draw
    mean_cosine: float  # crafted vs predicted perturbation directions
    skipped_samples: int  # degenerate-gradient rows dropped from the adv set
    undetermined: int  # test points where either net output exactly 0
    width_diag: float
    mode: str  # "plain" or "momentum"


def run_with_traces(cfg: ExperimentConfig, probes=None):
    """run_once, but also hand back the dataset, both traces, and the adv
    set for callers that want condition reports or trace bundles."""
    _validate(cfg)
    try:
        ds, trace_f, adv, trace_g = _pipeline(cfg, probes=probes)
        test = holdout_dataset(cfg, ds)
    except ValueError:
        raise
    except Exception as e:
        raise RuntimeError(f"run {config_hash(cfg)[:12]} failed: {e}") from e

    acc_f = float(np.mean(np.sign(trace_f.final_net.forward(ds.x)) == ds.y))
    acc_g = float(np.mean(np.sign(trace_g.final_net.forward(ds.x)) == ds.y))

    sf = np.sign(trace_f.final_net.forward(test.x))
    sg = np.sign(trace_g.final_net.forward(test.x))
    det = (sf != 0) & (sg != 0)
    n_det = int(np.count_nonzero(det))
    agreement = float(np.mean(sf[det] == sg[det])) if n_det else float("nan")

    res = RunResult(
        acc_f_train=acc_f,
        acc_g_clean=acc_g,
        agreement_test=agreement,
        mean_cosine=_mean_adv_cosine(adv, trace_f, cfg.gamma),
        skipped_samples=int(len(adv.skipped)),
        undetermined=test.n - n_det,
        width_diag=width_diagnostic(trace_f, trace_g),
        mode=cfg.optimizer,
    )
    return ds, trace_f, adv, trace_g, res


def run_once(cfg: ExperimentConfig) -> RunResult:
    """Train f, build the adv set, train g, and score everything."""
    return run_with_traces(cfg)[4]


# ---------------------------------------------------------------------------
# tables


@dataclass
class Table:
    columns: list
    rows: list  # list of dicts keyed by the column names


def _derive(cfg: ExperimentConfig, axis: str, value, s: int, lf: float, lg: float):
    kw = dict(
        seed_data=cfg.seed_data + s,
        seed_net_f=cfg.seed_net_f + s,
        seed_net_g=cfg.seed_net_g + s,
        seed_targets=cfg.seed_targets + s,
        step_size_f=lf,
        step_size_g=lg,
    )
    if axis == "d":
        if cfg.dataset == "idx":
            raise ValueError("cannot sweep d on file-backed data")
        kw["d"] = int(value)
    elif axis == "m":
        kw["m"] = int(value)
    elif axis == "N":
        kw["n"] = int(value)
    elif axis == "eps":
        kw["eps"] = float(value)
        kw["eps_per_coord"] = None
    elif axis == "T_f":
        kw["steps_f"] = int(value)
    elif axis == "T_g":
        kw["steps_g"] = int(value)
    return replace(cfg, **kw)


def _check_sweep_args(axis, values, seeds_per_point):
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("need at least one axis value")
    if any(v <= 0 for v in values):
        raise ValueError("axis values must be positive")
    if values != sorted(values):
        raise ValueError("axis values must be sorted ascending")
    if seeds_per_point < 1:
        raise ValueError("seeds_per_point must be positive")
    return values


def _run_pool(worker, configs, jobs: int):
    if jobs <= 1:
        return [worker(c) for c in configs]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(worker, configs))


def sweep(
    cfg: ExperimentConfig,
    axis: str,
    values,
    seeds_per_point: int,
    *,
    step_sizes_f=None,
    step_sizes_g=None,
    jobs: int = 1,
) -> Table:
    """One run_once per (value, seed, step_size_f, step_size_g), rows in that
    order regardless of worker scheduling."""
    values = _check_sweep_args(axis, values, seeds_per_point)
    lfs = list(step_sizes_f) if step_sizes_f else [cfg.step_size_f]
    lgs = list(step_sizes_g) if step_sizes_g else [cfg.step_size_g]
    specs = [
        (v, s, lf, lg)
        for v in values
        for s in range(seeds_per_point)
        for lf in lfs
        for lg in lgs
    ]
    results = _run_pool(
        run_once, [_derive(cfg, axis, v, s, lf, lg) for v, s, lf, lg in specs], jobs
    )
    rows = []
    for (v, s, lf, lg), res in zip(specs, results):
        rows.append(
            {
                "axis": axis,
                "value": v,
                "seed": s,
                "step_size_f": lf,
                "step_size_g": lg,
                "acc_f_train": res.acc_f_train,
                "acc_g_clean": res.acc_g_clean,
                "agreement_test": res.agreement_test,
                "mean_cosine": res.mean_cosine,
                "width_diag": res.width_diag,
                "skipped": res.skipped_samples,
                "mode": res.mode,
            }
        )
    return Table(columns=SWEEP_COLUMNS, rows=rows)


def collapse_best(table: Table, metric: str = "acc_g_clean") -> Table:
    """Per (value, seed), the row with the best metric over the step-size
    grid -- the selection rule the reference curves were reported with."""
    best = {}
    order = []
    for row in table.rows:
        key = (row["value"], row["seed"])
        if key not in best:
            order.append(key)
            best[key] = row
        elif row[metric] > best[key][metric]:
            best[key] = row
    return Table(columns=table.columns, rows=[best[k] for k in order])


def _cosine_once(cfg: ExperimentConfig) -> dict:
    _validate(cfg)
    ds = build_dataset(cfg)
    eps = resolve_eps(cfg, d=ds.d)
    net_f = init_net(cfg.m, ds.d, gamma=cfg.gamma, seed=cfg.seed_net_f)
    trace_f = train(
        net_f,
        ds,
        loss=cfg.loss,
        steps=cfg.steps_f,
        step_size=cfg.step_size_f,
        optimizer=cfg.optimizer,
    )
    adv = build_adv_set(
        trace_f,
        scenario=cfg.scenario,
        eps=eps,
        target_mode=cfg.target_mode,
        seed=cfg.seed_targets,
        on_degenerate="skip",
    )
    return {
        "acc_f_train": float(np.mean(np.sign(trace_f.final_net.forward(ds.x)) == ds.y)),
        "mean_cosine": _mean_adv_cosine(adv, trace_f, cfg.gamma),
        "skipped": int(len(adv.skipped)),
        "mode": cfg.optimizer,
    }


def cosine_study(
    cfg: ExperimentConfig,
    axis: str,
    values,
    seeds_per_point: int = 1,
    *,
    jobs: int = 1,
) -> Table:
    """Direction-alignment study: trains f and crafts perturbations only, so
    the g-dependent columns are nan (the sweep schema is kept for emit)."""
    values = _check_sweep_args(axis, values, seeds_per_point)
    specs = [(v, s) for v in values for s in range(seeds_per_point)]
    results = _run_pool(
        _cosine_once,
        [_derive(cfg, axis, v, s, cfg.step_size_f, cfg.step_size_g) for v, s in specs],
        jobs,
    )
    rows = []
    for (v, s), part in zip(specs, results):
        rows.append(
            {
                "axis": axis,
                "value": v,
                "seed": s,
                "step_size_f": cfg.step_size_f,
                "step_size_g": cfg.step_size_g,
                "acc_f_train": part["acc_f_train"],
                "acc_g_clean": float("nan"),
                "agreement_test": float("nan"),
                "mean_cosine": part["mean_cosine"],
                "width_diag": float("nan"),
                "skipped": part["skipped"],
                "mode": part["mode"],
            }
        )
    return Table(columns=SWEEP_COLUMNS, rows=rows)


# ---------------------------------------------------------------------------
# prediction map


def class_axes(ds: Dataset):
    """Normalized per-class mean vectors (u_pos, u_neg); these are the two
    plot axes and are deliberately not orthogonalized."""
    axes = []
    for cls in (1, -1):
        rows = ds.x[ds.y == cls]
        if rows.shape[0] == 0:
            raise ValueError(f"class {cls:+d} has no samples")
        mu = rows.mean(axis=0)
        nrm = float(np.linalg.norm(mu))
        if nrm == 0.0:
            raise ValueError(f"class {cls:+d} mean is the zero vector")
        axes.append(mu / nrm)
    return axes[0], axes[1]


@dataclass
class MapResult:
    table: Table
    u_pos: np.ndarray
    u_neg: np.ndarray
    extent: float
    resolution: int
    sample_s: np.ndarray
    sample_t: np.ndarray
    sample_y: np.ndarray
    fhat: np.ndarray  # (res, res) kernel predictor values
    ghat: np.ndarray
    f_sign: np.ndarray  # (res, res) empirical net signs
    g_sign: np.ndarray
    cond_all: np.ndarray  # (res, res) all three conditions hold
    mode: str


def prediction_map(cfg: ExperimentConfig, grid_resolution: int = 41) -> MapResult:
    """Evaluate empirical and predicted signs on a grid in the span of the
    class-mean axes; grid coordinate (s, t) maps to z = s u_pos + t u_neg."""
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be at least 2")
    _validate(cfg)
    ds, trace_f, adv, trace_g = _pipeline(cfg)
    u_pos, u_neg = class_axes(ds)
    sample_s = ds.x @ u_pos
    sample_t = ds.x @ u_neg
    extent = 1.1 * float(max(np.abs(sample_s).max(), np.abs(sample_t).max()))
    lin = np.linspace(-extent, extent, grid_resolution)
    S, T = np.meshgrid(lin, lin, indexing="ij")
    sf_, tf_ = S.ravel(), T.ravel()
    Z = sf_[:, None] * u_pos + tf_[:, None] * u_neg

    out = evaluate_conditions_grid(Z, trace_f, adv, trace_g, c1=cfg.c1, c2=cfg.c2)
    f_sign = np.sign(trace_f.final_net.forward(Z))
    g_sign = np.sign(trace_g.final_net.forward(Z))

    rows = []
    for i in range(Z.shape[0]):
        rows.append(
            {
                "s": float(sf_[i]),
                "t": float(tf_[i]),
                "f_sign": int(f_sign[i]),
                "g_sign": int(g_sign[i]),
                "fhat": float(out["fhat"][i]),
                "ghat": float(out["ghat"][i]),
                "cond1": int(out["cond1"][i]),
                "cond2": int(out["cond2"][i]),
                "cond3": int(out["cond3"][i]),
            }
        )
    shape = (grid_resolution, grid_resolution)
    cond_all = (out["cond1"] & out["cond2"] & out["cond3"]).reshape(shape)
    return MapResult(
        table=Table(columns=MAP_COLUMNS, rows=rows),
        u_pos=u_pos,
        u_neg=u_neg,
        extent=extent,
        resolution=grid_resolution,
        sample_s=sample_s,
        sample_t=sample_t,
        sample_y=ds.y.copy(),
        fhat=out["fhat"].reshape(shape),
        ghat=out["ghat"].reshape(shape),
        f_sign=f_sign.reshape(shape),
        g_sign=g_sign.reshape(shape),
        cond_all=cond_all,
        mode=cfg.optimizer,
    )


# ---------------------------------------------------------------------------
# emission


def _fmt_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _write_csv(path: Path, tab: Table) -> None:
    lines = [",".join(tab.columns)]
    for row in tab.rows:
        lines.append(",".join(_fmt_cell(row[c]) for c in tab.columns))
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, tab: Table, config_hash_: Optional[str]) -> None:
    doc = {"columns": tab.columns, "rows": tab.rows}
    if config_hash_:
        doc["config_hash"] = config_hash_
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def emit(obj, fmt: str, path, *, config_hash: Optional[str] = None) -> Path:
    """Write a Table or MapResult as csv/json/svg; byte-stable per input."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "svg":
        from . import figures

        figures.render(obj, path)
        return path
    tab = obj.table if isinstance(obj, MapResult) else obj
    if not isinstance(tab, Table):
        raise TypeError(f"cannot emit {type(obj).__name__}")
    if fmt == "csv":
        _write_csv(path, tab)
    elif fmt == "json":
        _write_json(path, tab, config_hash)
    else:
        raise ValueError(f"unknown format {fmt!r}; expected csv, json, or svg")
    return path
