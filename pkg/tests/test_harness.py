from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sacc.annotation import read_scene
from sacc.exceptions import FitDivergedError
from sacc.harness import (
    CountReport,
    ExperimentConfig,
    cmd_count_ops,
    cmd_fit,
    cmd_sweep,
    cmd_synth,
    fit_scene,
    generate_scenes,
    load_config,
    parse_config,
    read_manifest,
    sweep_configs,
    worker_count,
)

SMALL = dict(num_scenes=3, width=16, height=16, count_min=3, count_max=6, iterations=60)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_config_types_and_overrides():
    cfg = parse_config("""
        # experiment
        seed = 4
        alpha = 2.5
        derive_beta1 = no
        rank = none
        jitter = 1e-4
        alpha_grid = 1, 2, 4
        loss = l2
    """, seed=9, loss=None)
    assert cfg.seed == 9 and cfg.alpha == 2.5 and cfg.derive_beta1 is False
    assert cfg.rank is None and cfg.jitter == 1e-4
    assert cfg.alpha_grid == (1.0, 2.0, 4.0) and cfg.loss == "l2"


def test_parse_config_errors():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("nope = 1")
    with pytest.raises(ValueError, match="key = value"):
        parse_config("seed 1")
    with pytest.raises(ValueError, match="bad value"):
        parse_config("iterations = many")
    with pytest.raises(ValueError):
        parse_config("loss = huber")
    with pytest.raises(ValueError):
        parse_config("mass_threshold = 1.0")


def test_load_config_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("num_scenes = 2\nwidth = 12\n")
    cfg = load_config(path, seed=3)
    assert (cfg.num_scenes, cfg.width, cfg.seed) == (2, 12, 3)
    assert load_config() == ExperimentConfig()


def test_generate_scenes_count_range_and_determinism():
    cfg = ExperimentConfig(num_scenes=5, count_min=50, count_max=50, width=40, height=40)
    scenes = generate_scenes(cfg)
    assert all(s.count == 50 for s in scenes)
    assert scenes == generate_scenes(cfg)
    # scene i does not depend on how many scenes are generated
    assert generate_scenes(cfg.replace(num_scenes=2))[1] == scenes[1]


def test_pooled_head_sizes_positively_skewed():
    scenes = generate_scenes(ExperimentConfig(num_scenes=100, count_min=20, count_max=20))
    sizes = np.concatenate([s.head_sizes for s in scenes])
    centred = sizes - sizes.mean()
    skew = np.mean(centred ** 3) / np.mean(centred ** 2) ** 1.5
    assert skew > 0


def test_worker_count(monkeypatch):
    monkeypatch.delenv("SACC_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("SACC_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("SACC_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()


@given(pairs=st.lists(st.tuples(st.integers(0, 100), st.floats(0, 200)), min_size=1,
                      max_size=30))
def test_count_report_mae_below_rmse(pairs):
    report = CountReport(tuple(t for t, _ in pairs), tuple(p for _, p in pairs))
    assert report.mae <= math.sqrt(report.mse) * (1 + 1e-12) + 1e-300
    assert report.mae == pytest.approx(np.mean(np.abs([p - t for t, p in pairs])), rel=1e-12)


def test_count_report_validation():
    with pytest.raises(ValueError):
        CountReport((1,), (-0.5,))
    with pytest.raises(ValueError):
        CountReport((), ())
    with pytest.raises(ValueError):
        CountReport((1, 2), (1.0,))


@pytest.mark.parametrize("loss", ["scale_aware", "l2"])
def test_fit_noise_free_scenes(loss):
    cfg = ExperimentConfig(num_scenes=3, noise_alpha=0.0, margin=6.0, loss=loss)
    for scene in generate_scenes(cfg):
        fit = fit_scene(scene, cfg)
        assert abs(fit.predicted_count - scene.count) <= 0.5
        totals = [b.total for b in fit.trace]
        assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_fit_empty_scene():
    cfg = ExperimentConfig(num_scenes=1, count_min=0, count_max=0, iterations=20)
    fit = fit_scene(generate_scenes(cfg)[0], cfg)
    assert fit.true_count == 0 and fit.predicted_count == pytest.approx(0.0, abs=1e-12)


def test_cmd_synth_and_manifest(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    paths = cmd_synth(cfg, tmp_path)
    rows = _rows(tmp_path / "manifest.csv")
    assert [int(r["scene_id"]) for r in rows] == [0, 1, 2]
    for path, row, scene in zip(paths, rows, generate_scenes(cfg)):
        assert read_scene(path) == scene
        assert int(row["count"]) == scene.count
    assert read_manifest(tmp_path) == generate_scenes(cfg)


def test_cmd_fit_outputs(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    report = cmd_fit(cfg, tmp_path, threads=2)
    rows = _rows(tmp_path / "report.csv")
    assert len(rows) == 3
    errors = [float(r["abs_error"]) for r in rows]
    summary = _rows(tmp_path / "summary.csv")[0]
    assert float(summary["mae"]) == pytest.approx(math.fsum(errors) / 3, rel=1e-12)
    assert float(summary["mse"]) == pytest.approx(math.fsum(e * e for e in errors) / 3,
                                                  rel=1e-12)
    assert float(summary["mae"]) == report.mae
    trace = _rows(tmp_path / "traces" / "scene_0000.csv")
    assert set(trace[0]) == {"step", "scale", "nll", "reg", "total"}
    totals = [float(r["total"]) for r in trace if r["scale"] == "all"]
    assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_cmd_fit_thread_count_does_not_change_output(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    cmd_fit(cfg, tmp_path / "one", threads=1)
    cmd_fit(cfg, tmp_path / "three", threads=3)
    for name in ("report.csv", "summary.csv", "traces/scene_0002.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "three" / name).read_bytes()


def test_sweep_single_point_matches_fit(tmp_path):
    cfg = ExperimentConfig(**SMALL, alpha_grid=(8.0,))
    rows = cmd_sweep(cfg, tmp_path)
    report = cmd_fit(cfg, tmp_path)
    assert len(rows) == 1 and rows[0][2] == report.mae and rows[0][3] == report.mse


def test_sweep_row_count(tmp_path):
    cfg = ExperimentConfig(**dict(SMALL, num_scenes=1, iterations=10),
                           alpha_grid=(2.0, 8.0, 32.0), beta_grid=(4.0, 8.0))
    assert len(sweep_configs(cfg)) == 6
    cmd_sweep(cfg, tmp_path)
    rows = _rows(tmp_path / "sweep.csv")
    assert len(rows) == 6
    assert [(float(r["alpha"]), float(r["beta1"])) for r in rows[:2]] == [(2.0, 4.0), (2.0, 8.0)]


def test_cmd_count_ops(tmp_path):
    graph = tmp_path / "g.cfg"
    graph.write_text("c1 conv 3 1 3 64\n")
    result = cmd_count_ops(ExperimentConfig(), tmp_path, graph)
    assert (result.params, result.macs) == (1792, 86_704_128)
    rows = _rows(tmp_path / "ops.csv")
    assert rows[-1]["name"] == "total" and int(rows[-1]["params"]) == 1792


def test_divergence_propagates(monkeypatch):
    import sacc.harness as harness

    def boom(*args, **kwargs):
        raise FitDivergedError("stuck", [])

    monkeypatch.setattr(harness, "fit_blocks", boom)
    cfg = ExperimentConfig(**SMALL)
    with pytest.raises(FitDivergedError):
        fit_scene(generate_scenes(cfg)[0], cfg)
