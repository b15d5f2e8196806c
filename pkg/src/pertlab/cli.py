"""Command-line entry point.

Every run writes its artifacts plus a manifest.json (resolved config, run
arguments, sha256 of each artifact) into the output directory; `replay`
re-executes a manifest and verifies the bytes match.  Exit codes: 0 success,
1 validation problem or failed verification verdict, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .experiments import (
    ExperimentConfig,
    Table,
    build_dataset,
    cast_config_value,
    class_axes,
    config_hash,
    cosine_study,
    emit,
    gen_probes,
    prediction_map,
    resolve_eps,
    run_with_traces,
    sweep,
)
from .kernel import phi_bound, phi_closed, phi_mc
from .lemmas import (
    check_gaussian_max,
    check_hoeffding,
    check_small_count,
    check_subexp,
)
from .network import init_net, train
from .perturbation import build_adv_set
from .serialize import save_container
from .theory import evaluate_conditions_grid

ENV_OUTDIR = "PERTLAB_OUTDIR"

SWEEP_AXES = ("d", "m", "N", "eps", "T_f", "T_g")

CONDITION_COLUMNS = [
    "idx",
    "s",
    "t",
    "fhat",
    "ghat",
    "margin_f",
    "margin_g",
    "threshold1",
    "threshold2",
    "ratio",
    "certificate_threshold",
    "cond1",
    "cond2",
    "cond3",
    "sign_f",
    "sign_g",
]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; our contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config plumbing


def _num_list(text: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            v = float(tok)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {tok!r}")
        out.append(int(v) if v == int(v) and "." not in tok and "e" not in tok.lower() else v)
    if not out:
        raise argparse.ArgumentTypeError("empty value list")
    return out


def _float_list(text: str):
    return [float(v) for v in _num_list(text)]


_FLAGGED_FIELDS = [
    ("--dataset", "dataset", str),
    ("--n", "n", int),
    ("--d", "d", int),
    ("--shift", "shift", float),
    ("--m", "m", int),
    ("--gamma", "gamma", float),
    ("--loss", "loss", str),
    ("--optimizer", "optimizer", str),
    ("--steps-f", "steps_f", int),
    ("--steps-g", "steps_g", int),
    ("--step-size-f", "step_size_f", float),
    ("--step-size-g", "step_size_g", float),
    ("--scenario", "scenario", str),
    ("--eps", "eps", float),
    ("--eps-per-coord", "eps_per_coord", float),
    ("--target-mode", "target_mode", str),
    ("--n-test", "n_test", int),
    ("--n-probes", "n_probes", int),
    ("--c1", "c1", float),
    ("--c2", "c2", float),
    ("--seed-data", "seed_data", int),
    ("--seed-net-f", "seed_net_f", int),
    ("--seed-net-g", "seed_net_g", int),
    ("--seed-targets", "seed_targets", int),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")
    p.add_argument(
        "--outdir",
        default=None,
        help=f"output directory (default: config value, else ${ENV_OUTDIR}, else 'out')",
    )
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    for flag, dest, typ in _FLAGGED_FIELDS:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=argparse.SUPPRESS)


def _resolve_config(ns) -> ExperimentConfig:
    if getattr(ns, "config", None):
        cfg = ExperimentConfig.from_text(Path(ns.config).read_text())
    else:
        cfg = ExperimentConfig()
    over = {}
    for item in getattr(ns, "set", []):
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        over[key.strip()] = cast_config_value(key.strip(), val.strip())
    for _, name, _typ in _FLAGGED_FIELDS:
        v = getattr(ns, name, None)
        if v is not None:
            over[name] = v
    # setting one of the eps pair supersedes the other
    if "eps" in over and "eps_per_coord" not in over:
        over["eps_per_coord"] = None
    elif "eps_per_coord" in over and "eps" not in over:
        over["eps"] = None
    return replace(cfg, **over) if over else cfg


def _outdir(ns, cfg: ExperimentConfig) -> Path:
    if getattr(ns, "outdir", None):
        return Path(ns.outdir)
    if cfg.outdir != "out":  # config file moved it
        return Path(cfg.outdir)
    env = os.environ.get(ENV_OUTDIR)
    return Path(env) if env else Path(cfg.outdir)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


def _write_manifest(outdir: Path, subcommand: str, cfg, run_args: dict, artifacts) -> Path:
    doc = {
        "subcommand": subcommand,
        "config": cfg.to_text(),
        "config_hash": config_hash(cfg),
        "run_args": run_args,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    return _write_json(outdir / "manifest.json", doc)


# ---------------------------------------------------------------------------
# executors: deterministic (cfg, run_args, outdir) -> artifact paths.
# Both the direct subcommands and `replay` funnel through these.


def _save_trace(path: Path, trace) -> Path:
    extra = {}
    if trace.probes is not None:
        extra = {
            "probes": trace.probes,
            "probe_signs_initial": trace.probe_signs_initial,
            "probe_signs_final": trace.probe_signs_final,
        }
    np.savez(
        path,
        V0=trace.initial_net.V,
        a0=trace.initial_net.a,
        V=trace.final_net.V,
        a=trace.final_net.a,
        alpha=trace.final_net.alpha,
        x=trace.dataset.x,
        y=trace.dataset.y,
        integral_weights=trace.integral_weights,
        loss_history=trace.loss_history,
        step_size_history=trace.step_size_history,
        flow_time=np.float64(trace.flow_time),
        gamma=np.float64(trace.final_net.gamma),
        steps=np.int64(trace.steps),
        step_size=np.float64(trace.step_size),
        loss=np.bytes_(trace.loss.encode()),
        mode=np.bytes_(trace.mode.encode()),
        meta=np.bytes_(json.dumps(trace.dataset.meta, sort_keys=True).encode()),
        **extra,
    )
    return path


def _train_f(cfg: ExperimentConfig):
    ds = build_dataset(cfg)
    net = init_net(cfg.m, ds.d, gamma=cfg.gamma, seed=cfg.seed_net_f)
    trace = train(
        net,
        ds,
        loss=cfg.loss,
        steps=cfg.steps_f,
        step_size=cfg.step_size_f,
        optimizer=cfg.optimizer,
    )
    return ds, trace


def _do_gen_data(cfg, a, outdir):
    ds = build_dataset(cfg)
    path = outdir / "dataset.bin"
    save_container(path, ds.x, ds.y, ds.meta)
    return [path, Path(str(path) + ".meta.json")]


def _do_train(cfg, a, outdir):
    ds = build_dataset(cfg)
    probes = None
    if cfg.dataset != "idx" and cfg.n_probes > 0:
        probes = gen_probes(cfg, ds)
    net = init_net(cfg.m, ds.d, gamma=cfg.gamma, seed=cfg.seed_net_f)
    trace = train(
        net,
        ds,
        loss=cfg.loss,
        steps=cfg.steps_f,
        step_size=cfg.step_size_f,
        optimizer=cfg.optimizer,
        probes=probes,
    )
    arts = [_save_trace(outdir / "trace_f.npz", trace)]
    acc = float(np.mean(np.sign(trace.final_net.forward(ds.x)) == ds.y))
    doc = {
        "acc_f_train": acc,
        "flow_time": trace.flow_time,
        "final_loss": float(trace.loss_history[-1]) if trace.steps else None,
        "mode": trace.mode,
        "config_hash": config_hash(cfg),
    }
    arts.append(_write_json(outdir / "train.json", doc))
    return arts


def _do_perturb(cfg, a, outdir):
    ds, trace = _train_f(cfg)
    eps = resolve_eps(cfg, d=ds.d)
    adv = build_adv_set(
        trace,
        scenario=cfg.scenario,
        eps=eps,
        target_mode=cfg.target_mode,
        seed=cfg.seed_targets,
        on_degenerate="skip",
    )
    path = outdir / "adv.npz"
    np.savez(
        path,
        r=adv.r,
        y_adv=adv.y_adv,
        x=adv.dataset.x,
        y=adv.dataset.y,
        kept=np.asarray(adv.kept, dtype=np.int64),
        skipped=np.asarray(adv.skipped, dtype=np.int64),
        eps=np.float64(adv.eps),
        scenario=np.bytes_(adv.scenario.encode()),
    )
    norms = np.linalg.norm(adv.r, axis=1)
    doc = {
        "eps": eps,
        "scenario": cfg.scenario,
        "skipped": int(len(adv.skipped)),
        "mean_r_norm": float(norms.mean()) if norms.size else 0.0,
        "config_hash": config_hash(cfg),
    }
    return [path, _write_json(outdir / "perturb.json", doc)]


def _do_phi(cfg, a, outdir):
    rng = np.random.default_rng(a["seed"])
    gamma, d = a["gamma"], a["d"]
    rows = []
    for i in range(a["pairs"]):
        z1 = rng.standard_normal(d)
        z2 = rng.standard_normal(d)
        est = phi_closed(z1, z2, gamma=gamma, d=d)
        lo, hi = phi_bound(z1, z2, gamma=gamma, d=d)
        row = {"phi": est.value, "bound_lo": lo, "bound_hi": hi}
        if a["mc_samples"]:
            mc = phi_mc(
                z1, z2, gamma=gamma, d=d, n_samples=a["mc_samples"], seed=a["seed"] + 1 + i
            )
            row["mc"] = mc.value
            row["mc_stderr"] = mc.stderr
        rows.append(row)
    doc = {"gamma": gamma, "d": d, "seed": a["seed"], "pairs": rows}
    return [_write_json(outdir / "phi.json", doc)]


def _emit_report(obj, base: str, fmt: str, outdir: Path, cfg) -> list:
    if fmt == "json":
        return [emit(obj, "json", outdir / f"{base}.json", config_hash=config_hash(cfg))]
    arts = [emit(obj, "csv", outdir / f"{base}.csv")]
    if fmt == "svg":
        arts.append(emit(obj, "svg", outdir / f"{base}.svg"))
    return arts


def _do_sweep(cfg, a, outdir):
    tab = sweep(
        cfg,
        a["axis"],
        a["values"],
        a["seeds_per_point"],
        step_sizes_f=a.get("step_sizes_f"),
        step_sizes_g=a.get("step_sizes_g"),
        jobs=a.get("jobs", 1),
    )
    return _emit_report(tab, "sweep", a["format"], outdir, cfg)


def _do_cosine(cfg, a, outdir):
    tab = cosine_study(cfg, a["axis"], a["values"], a["seeds_per_point"], jobs=a.get("jobs", 1))
    return _emit_report(tab, "cosine", a["format"], outdir, cfg)


def _do_verify_direction(cfg, a, outdir):
    tab = cosine_study(cfg, a["axis"], a["values"], a["seeds_per_point"], jobs=a.get("jobs", 1))
    arts = _emit_report(tab, "direction", a["format"], outdir, cfg)
    medians = []
    for v in a["values"]:
        pts = [r["mean_cosine"] for r in tab.rows if r["value"] == v]
        medians.append(float(np.median(pts)))
    doc = {
        "axis": a["axis"],
        "values": a["values"],
        "median_cosine": medians,
        "non_decreasing": bool(all(b >= a_ for a_, b in zip(medians, medians[1:]))),
        "config_hash": config_hash(cfg),
    }
    arts.append(_write_json(outdir / "direction.json", doc))
    return arts


def _do_verify_pl(cfg, a, outdir):
    ds, trace_f, adv, trace_g, res = run_with_traces(cfg)
    Z = gen_probes(cfg, ds)
    grid = evaluate_conditions_grid(Z, trace_f, adv, trace_g, c1=cfg.c1, c2=cfg.c2)
    u_pos, u_neg = class_axes(ds)
    s_coord, t_coord = Z @ u_pos, Z @ u_neg
    rows = []
    for i in range(Z.shape[0]):
        row = {"idx": i, "s": float(s_coord[i]), "t": float(t_coord[i])}
        for key in CONDITION_COLUMNS[3:]:
            val = grid[key]
            v = val[i] if np.ndim(val) else val  # thresholds are run constants
            row[key] = int(v) if key.startswith(("cond", "sign")) else float(v)
        rows.append(row)
    arts = [emit(Table(columns=CONDITION_COLUMNS, rows=rows), "csv", outdir / "conditions.csv")]
    doc = asdict(res)
    doc["config_hash"] = config_hash(cfg)
    doc["n_probes"] = int(Z.shape[0])
    doc["probes_all_conditions"] = int(
        sum(r["cond1"] and r["cond2"] and r["cond3"] for r in rows)
    )
    doc["probes_signs_agree"] = int(sum(r["sign_f"] == r["sign_g"] != 0 for r in rows))
    arts.append(_write_json(outdir / "result.json", doc))
    return arts


def _do_map(cfg, a, outdir):
    mp = prediction_map(cfg, grid_resolution=a["grid_resolution"])
    return _emit_report(mp, "map", a["format"], outdir, cfg)


def _do_lemma_check(cfg, a, outdir):
    delta, trials, seed = a["delta"], a["trials"], a["seed"]
    checks = [
        check_gaussian_max(m=a["m"], sigma2=a["sigma2"], delta=delta, trials=trials, seed=seed),
        check_subexp(
            m=a["m"], gamma=a["gamma"], sigma2=a["sigma2"], delta=delta, trials=trials,
            seed=seed + 1,
        ),
        check_small_count(
            m=a["m"], eta=a["eta"], sigma2=a["sigma2"], delta=delta, trials=trials,
            seed=seed + 2,
        ),
        check_hoeffding(scales=np.ones(a["n"]), delta=delta, trials=trials, seed=seed + 3),
    ]
    doc = {
        "delta": delta,
        "trials": trials,
        "checks": [c.to_dict() for c in checks],
        "all_passed": bool(all(c.passed for c in checks)),
    }
    return [_write_json(outdir / "lemma_check.json", doc)]


_EXECUTORS = {
    "gen-data": _do_gen_data,
    "train": _do_train,
    "perturb": _do_perturb,
    "phi": _do_phi,
    "verify-direction": _do_verify_direction,
    "verify-pl": _do_verify_pl,
    "sweep": _do_sweep,
    "cosine": _do_cosine,
    "map": _do_map,
    "lemma-check": _do_lemma_check,
}


def _execute(subcommand: str, cfg, run_args: dict, outdir: Path):
    fn = _EXECUTORS.get(subcommand)
    if fn is None:
        raise ValueError(f"manifest names unknown subcommand {subcommand!r}")
    outdir.mkdir(parents=True, exist_ok=True)
    return fn(cfg, run_args, outdir)


# ---------------------------------------------------------------------------
# subcommand handlers


def _finish(name: str, ns, run_args: dict, *, echo: str = None, verdict_key: str = None) -> int:
    cfg = _resolve_config(ns)
    outdir = _outdir(ns, cfg)
    cfg = replace(cfg, outdir=str(outdir))
    arts = _execute(name, cfg, run_args, outdir)
    _write_manifest(outdir, name, cfg, run_args, arts)
    code = 0
    if echo:
        text = (outdir / echo).read_text()
        sys.stdout.write(text)
        if verdict_key is not None:
            code = 0 if json.loads(text).get(verdict_key) else 1
    else:
        summary = {
            "command": name,
            "outdir": str(outdir),
            "config_hash": config_hash(cfg),
            "artifacts": sorted(p.name for p in arts),
        }
        if verdict_key is not None:
            doc = json.loads((outdir / f"{name.split('-')[-1]}.json").read_text())
            summary[verdict_key] = bool(doc.get(verdict_key))
            code = 0 if summary[verdict_key] else 1
        print(json.dumps(summary, sort_keys=True))
    return code


def _cmd_gen_data(ns):
    return _finish("gen-data", ns, {})


def _cmd_train(ns):
    return _finish("train", ns, {})


def _cmd_perturb(ns):
    return _finish("perturb", ns, {})


def _cmd_phi(ns):
    run_args = {
        "gamma": ns.gamma if ns.gamma is not None else 0.0,
        "d": ns.d if ns.d is not None else 10,
        "pairs": ns.pairs,
        "seed": ns.seed,
        "mc_samples": ns.mc_samples,
    }
    return _finish("phi", ns, run_args, echo="phi.json")


def _cmd_sweep(ns):
    run_args = {
        "axis": ns.axis,
        "values": ns.values,
        "seeds_per_point": ns.seeds_per_point,
        "step_sizes_f": ns.step_sizes_f,
        "step_sizes_g": ns.step_sizes_g,
        "format": ns.format,
        "jobs": ns.jobs,
    }
    return _finish("sweep", ns, run_args)


def _cmd_cosine(ns):
    run_args = {
        "axis": ns.axis,
        "values": ns.values,
        "seeds_per_point": ns.seeds_per_point,
        "format": ns.format,
        "jobs": ns.jobs,
    }
    return _finish("cosine", ns, run_args)


def _cmd_verify_direction(ns):
    run_args = {
        "axis": ns.axis,
        "values": ns.values,
        "seeds_per_point": ns.seeds_per_point,
        "format": ns.format,
        "jobs": ns.jobs,
    }
    return _finish("verify-direction", ns, run_args, verdict_key="non_decreasing")


def _cmd_verify_pl(ns):
    return _finish("verify-pl", ns, {}, echo="result.json")


def _cmd_map(ns):
    return _finish("map", ns, {"grid_resolution": ns.grid_resolution, "format": ns.format})


def _cmd_lemma_check(ns):
    run_args = {
        "m": ns.m if ns.m is not None else 200,
        "n": ns.hoeffding_n,
        "sigma2": ns.sigma2,
        "gamma": ns.gamma if ns.gamma is not None else 0.0,
        "eta": ns.eta,
        "delta": ns.delta,
        "trials": ns.trials,
        "seed": ns.seed,
    }
    return _finish("lemma-check", ns, run_args, echo="lemma_check.json", verdict_key="all_passed")


def _cmd_replay(ns):
    man_path = Path(ns.manifest)
    man = json.loads(man_path.read_text())
    outdir = Path(ns.outdir) if ns.outdir else man_path.parent / "replay"
    cfg = replace(ExperimentConfig.from_text(man["config"]), outdir=str(outdir))
    arts = _execute(man["subcommand"], cfg, man["run_args"], outdir)
    got = {p.name: _sha256(p) for p in arts}
    want = man["artifacts"]
    mismatches = sorted(
        set(want).symmetric_difference(got)
        | {k for k in want if k in got and want[k] != got[k]}
    )
    print(
        json.dumps(
            {
                "command": "replay",
                "replayed": man["subcommand"],
                "outdir": str(outdir),
                "match": not mismatches,
                "mismatches": mismatches,
            },
            sort_keys=True,
        )
    )
    return 0 if not mismatches else 2


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    top = _Parser(
        prog="pertlab",
        description="perturbation-learning laboratory: train, perturb, verify, sweep",
    )
    sub = top.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    add("gen-data", _cmd_gen_data, "generate a dataset and store it with its meta block")
    add("train", _cmd_train, "train f on the configured dataset; store the trace bundle")
    add("perturb", _cmd_perturb, "train f and craft the perturbation set")

    p = add("phi", _cmd_phi, "closed-form kernel values on random pairs, optional MC check")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mc-samples", type=int, default=0, help="0 = closed form only")

    def add_axis_flags(p, seeds_default=1):
        p.add_argument("--axis", required=True, choices=SWEEP_AXES)
        p.add_argument("--values", required=True, type=_num_list, metavar="V1,V2,...")
        p.add_argument("--seeds-per-point", type=int, default=seeds_default)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--format", choices=("csv", "json", "svg"), default="svg")

    p = add("verify-direction", _cmd_verify_direction,
            "perturbations vs the kernel-limit direction along an axis")
    add_axis_flags(p, seeds_default=5)

    p = add("verify-pl", _cmd_verify_pl,
            "full run plus margin/width/certificate conditions at probe points")

    p = add("sweep", _cmd_sweep, "accuracy/agreement sweep along one axis")
    add_axis_flags(p)
    p.add_argument("--step-sizes-f", type=_float_list, default=None, metavar="S1,S2,...")
    p.add_argument("--step-sizes-g", type=_float_list, default=None, metavar="S1,S2,...")

    p = add("cosine", _cmd_cosine, "cosine-alignment study along one axis")
    add_axis_flags(p)

    p = add("map", _cmd_map, "empirical vs predicted signs on the class-mean plane")
    p.add_argument("--grid-resolution", type=int, default=41)
    p.add_argument("--format", choices=("csv", "json", "svg"), default="svg")

    p = add("lemma-check", _cmd_lemma_check,
            "statistical coverage of the concentration bounds")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=2.0)
    p.add_argument("--hoeffding-n", type=int, default=64)

    p = sub.add_parser("replay", help="re-run a manifest and verify byte identity")
    p.add_argument("manifest")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=_cmd_replay)

    return top


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    if not hasattr(ns, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return ns.func(ns)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
