"""Figure rendering must be byte-deterministic or replay cannot work."""

import pytest

from pertlab.experiments import ExperimentConfig, cosine_study, emit, prediction_map, sweep


def _cfg(**kw):
    base = dict(
        dataset="shifted",
        n=30,
        d=8,
        m=16,
        gamma=0.0,
        loss="identity",
        steps_f=20,
        steps_g=20,
        step_size_f=0.5,
        step_size_g=0.5,
        scenario="a",
        eps=0.3,
        n_test=40,
        seed_data=11,
        seed_net_f=12,
        seed_net_g=13,
        seed_targets=14,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_sweep_svg_byte_identical(tmp_path):
    tab = sweep(_cfg(), "m", [8, 16], 2)
    p1 = emit(tab, "svg", tmp_path / "a.svg")
    p2 = emit(tab, "svg", tmp_path / "b.svg")
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    assert b1.startswith(b"<?xml")
    assert b"</svg>" in b1


def test_cosine_table_with_nan_columns_renders(tmp_path):
    tab = cosine_study(_cfg(), "m", [8, 16])
    p1 = emit(tab, "svg", tmp_path / "a.svg")
    p2 = emit(tab, "svg", tmp_path / "b.svg")
    assert p1.read_bytes() == p2.read_bytes()


def test_map_svg_byte_identical(tmp_path):
    mp = prediction_map(_cfg(n=40), grid_resolution=7)
    p1 = emit(mp, "svg", tmp_path / "a.svg")
    p2 = emit(mp, "svg", tmp_path / "b.svg")
    assert p1.read_bytes() == p2.read_bytes()


def test_render_rejects_non_figure_objects(tmp_path):
    with pytest.raises(TypeError):
        emit("not a table", "svg", tmp_path / "x.svg")
