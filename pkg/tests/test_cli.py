"""End-to-end CLI contract: exit codes, manifests, replay byte-identity."""

import hashlib
import json

import numpy as np
import pytest

from pertlab.cli import CONDITION_COLUMNS, main
from pertlab.experiments import SWEEP_COLUMNS
from pertlab.serialize import load_container

SMALL = [
    "--n", "20", "--d", "6", "--m", "8", "--steps-f", "12", "--steps-g", "12",
    "--step-size-f", "0.5", "--step-size-g", "0.5", "--eps", "0.3",
    "--n-test", "21", "--seed-data", "7",
]


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_no_args_prints_usage_and_exits_1(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_exits_1(capsys):
    code = main(["sweep", "--axis", "m", "--values", "8", "--bogus-flag", "1"])
    assert code == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_validation_error_exits_1(tmp_path, capsys):
    # eps and eps_per_coord together violate the exclusive pair
    code = main(
        ["sweep", "--axis", "m", "--values", "8", "--eps", "0.1",
         "--eps-per-coord", "0.01", "--outdir", str(tmp_path)]
    )
    assert code == 1
    assert "exactly one" in capsys.readouterr().err


def test_gen_data_container_and_manifest(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["gen-data", "--n", "20", "--d", "4", "--seed-data", "7",
                 "--outdir", str(out)])
    assert code == 0
    rows, labels, meta = load_container(out / "dataset.bin")
    assert rows.shape == (20, 4) and labels.shape == (20,)
    man = json.loads((out / "manifest.json").read_text())
    assert man["subcommand"] == "gen-data"
    assert len(man["config_hash"]) == 64
    assert man["artifacts"]["dataset.bin"] == _sha(out / "dataset.bin")
    summary = json.loads(capsys.readouterr().out)
    assert summary["config_hash"] == man["config_hash"]


def test_train_writes_trace_bundle(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *SMALL, "--n-probes", "3", "--outdir", str(out)]) == 0
    with np.load(out / "trace_f.npz") as z:
        assert z["V0"].shape == (8, 6) and z["V"].shape == (8, 6)
        assert z["integral_weights"].shape == (20,)
        assert z["probes"].shape == (3, 6)
        assert json.loads(bytes(z["meta"]).decode())["kind"] == "shifted"
    doc = json.loads((out / "train.json").read_text())
    assert 0.0 <= doc["acc_f_train"] <= 1.0
    assert doc["flow_time"] == pytest.approx(12 * 0.5)


def test_perturb_writes_adv_bundle(tmp_path):
    out = tmp_path / "run"
    assert main(["perturb", *SMALL, "--outdir", str(out)]) == 0
    with np.load(out / "adv.npz") as z:
        r = z["r"]
        assert r.shape == (20, 6)
        kept = z["kept"]
        norms = np.linalg.norm(r[kept], axis=1)
        assert np.allclose(norms, 0.3, rtol=1e-12)


def test_phi_reports_json_and_respects_mc(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["phi", "--d", "6", "--gamma", "0.1", "--pairs", "3",
                 "--seed", "5", "--mc-samples", "4000", "--outdir", str(out)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["pairs"]) == 3
    for row in doc["pairs"]:
        assert row["bound_lo"] <= row["phi"] <= row["bound_hi"]
        assert abs(row["phi"] - row["mc"]) <= 6 * row["mc_stderr"]


def test_sweep_csv_format(tmp_path):
    out = tmp_path / "run"
    code = main(["sweep", *SMALL, "--axis", "m", "--values", "8,16",
                 "--seeds-per-point", "1", "--format", "csv", "--outdir", str(out)])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    assert len(lines) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert sorted(man["artifacts"]) == ["sweep.csv"]


def test_sweep_svg_renders_alongside_csv(tmp_path):
    out = tmp_path / "run"
    code = main(["sweep", *SMALL, "--axis", "m", "--values", "8",
                 "--seeds-per-point", "1", "--format", "svg", "--outdir", str(out)])
    assert code == 0
    assert (out / "sweep.csv").exists()
    assert (out / "sweep.svg").read_bytes().startswith(b"<?xml")
    man = json.loads((out / "manifest.json").read_text())
    assert sorted(man["artifacts"]) == ["sweep.csv", "sweep.svg"]


def test_replay_is_byte_identical_and_detects_tampering(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["sweep", *SMALL, "--axis", "m", "--values", "8",
                 "--seeds-per-point", "1", "--format", "svg",
                 "--outdir", str(out)]) == 0
    capsys.readouterr()

    assert main(["replay", str(out / "manifest.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["match"] is True
    for name in ("sweep.csv", "sweep.svg"):
        assert (out / "replay" / name).read_bytes() == (out / name).read_bytes()

    man = json.loads((out / "manifest.json").read_text())
    man["artifacts"]["sweep.csv"] = "0" * 64
    tampered = tmp_path / "tampered.json"
    tampered.write_text(json.dumps(man))
    assert main(["replay", str(tampered), "--outdir", str(tmp_path / "r2")]) == 2
    rep = json.loads(capsys.readouterr().out)
    assert rep["mismatches"] == ["sweep.csv"]


def test_verify_pl_emits_conditions_and_result(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["verify-pl", *SMALL, "--n-probes", "4", "--outdir", str(out)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_probes"] == 4
    assert 0.0 <= doc["acc_g_clean"] <= 1.0
    lines = (out / "conditions.csv").read_text().splitlines()
    assert lines[0] == ",".join(CONDITION_COLUMNS)
    assert len(lines) == 5


def test_verify_direction_writes_verdict(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["verify-direction", *SMALL, "--axis", "m", "--values", "8,32",
                 "--seeds-per-point", "2", "--format", "csv", "--outdir", str(out)])
    assert code in (0, 1)  # the verdict decides, not a crash
    doc = json.loads((out / "direction.json").read_text())
    assert len(doc["median_cosine"]) == 2
    assert (code == 0) == doc["non_decreasing"]


def test_map_grid_and_svg(tmp_path):
    out = tmp_path / "run"
    code = main(["map", *SMALL, "--grid-resolution", "5", "--outdir", str(out)])
    assert code == 0
    lines = (out / "map.csv").read_text().splitlines()
    assert len(lines) == 26
    assert (out / "map.svg").exists()


def test_lemma_check_json_verdict(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["lemma-check", "--delta", "0.05", "--trials", "512", "--m", "64",
                 "--hoeffding-n", "16", "--seed", "3", "--outdir", str(out)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["all_passed"] is True
    assert [c["lemma_id"] for c in doc["checks"]] == [
        "gaussian_max", "subexp", "small_count", "hoeffding",
    ]
    assert (out / "lemma_check.json").exists()


def test_config_file_with_flag_override(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "n = 20\nd = 6\nm = 8\nsteps_f = 10\nsteps_g = 10\n"
        "step_size_f = 0.5\nstep_size_g = 0.5\neps = 0.3\nn_test = 20\n"
    )
    out = tmp_path / "run"
    code = main(["sweep", "--config", str(cfg_file), "--m", "10", "--axis", "N",
                 "--values", "20", "--seeds-per-point", "1", "--format", "csv",
                 "--outdir", str(out)])
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert "m = 10" in man["config"]
    assert "n = 20" in man["config"]


def test_env_var_sets_default_outdir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PERTLAB_OUTDIR", str(tmp_path / "envout"))
    assert main(["gen-data", "--n", "8", "--d", "3"]) == 0
    assert (tmp_path / "envout" / "dataset.bin").exists()
