"""Experiment runner behind the ``sacc`` command line.

Every command is a pure function of the configuration and seed: scenes are
drawn from per-scene seed sequences, per-scene work runs single-threaded,
and rows are written in scene order whatever order workers finish in.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import check_int, check_scalar
from .annotation import (
    AnnotatedScene,
    HeadSizeDistribution,
    ScaleParams,
    build_scale_params,
    read_scene,
    sample_scene,
    write_scene,
)
from .density import render_density
from .fitting import fit_blocks, l2_blocks, scale_aware_blocks
from .fusion import analyze_graph, default_graph_path, read_graph_config
from .loss import LossBreakdown, ScaleAwareObjective, precompute_terms

LOSSES = ("scale_aware", "l2")
THREADS_ENV = "SACC_THREADS"


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional(convert):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else convert(text)
    return parse


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of an experiment. ``noise_alpha`` generates the data; ``alpha`` is the model's."""

    seed: int = 0
    num_scenes: int = 10
    width: int = 32
    height: int = 32
    count_min: int = 16
    count_max: int = 16
    margin: float = 0.0
    size_location: float = math.log(8.0)
    size_scale: float = 0.5
    size_bin_width: float = 0.25
    noise_alpha: float = 8.0
    alpha: float = 8.0
    derive_beta1: bool = True
    beta1: float = 8.0
    num_scales: int = 3
    scale_alpha: bool = True
    mass_threshold: float = 0.8
    rank: int | None = None
    jitter: float | None = None
    rel_jitter: float = 1e-6
    reg_weight: float = 1.0
    loss: str = "scale_aware"
    step: float = 1.0
    iterations: int = 500
    backtrack: float = 0.5
    max_backtracks: int = 50
    alpha_grid: tuple = (2.0, 4.0, 8.0, 16.0, 32.0)
    beta_grid: tuple = ()
    graph: str = ""
    input_channels: int = 3
    input_width: int = 224
    input_height: int = 224

    def __post_init__(self):
        check_int(self.num_scenes, "num_scenes", min_val=1)
        check_int(self.width, "width", min_val=1)
        check_int(self.height, "height", min_val=1)
        check_int(self.count_min, "count_min", min_val=0)
        check_int(self.count_max, "count_max", min_val=self.count_min)
        check_scalar(self.margin, "margin", min_val=0)
        check_scalar(self.size_scale, "size_scale", min_val=0, include_min=False)
        check_scalar(self.size_bin_width, "size_bin_width", min_val=0, include_min=False)
        check_scalar(self.noise_alpha, "noise_alpha", min_val=0)
        check_scalar(self.alpha, "alpha", min_val=0, include_min=False)
        check_scalar(self.beta1, "beta1", min_val=0, include_min=False)
        check_int(self.num_scales, "num_scales", min_val=1)
        check_scalar(self.mass_threshold, "mass_threshold", min_val=0, max_val=1,
                     include_min=False, include_max=False)
        if self.rank is not None:
            check_int(self.rank, "rank", min_val=1)
        if self.jitter is not None:
            check_scalar(self.jitter, "jitter", min_val=0, include_min=False)
        check_scalar(self.rel_jitter, "rel_jitter", min_val=0, include_min=False)
        check_scalar(self.reg_weight, "reg_weight", min_val=0)
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        check_scalar(self.step, "step", min_val=0, include_min=False)
        check_int(self.iterations, "iterations", min_val=1)
        check_scalar(self.backtrack, "backtrack", min_val=0, max_val=1, include_min=False,
                     include_max=False)
        check_int(self.max_backtracks, "max_backtracks", min_val=0)
        for a in self.alpha_grid:
            check_scalar(a, "alpha_grid value", min_val=0, include_min=False)
        for b in self.beta_grid:
            check_scalar(b, "beta_grid value", min_val=0, include_min=False)
        if not self.alpha_grid:
            raise ValueError("alpha_grid must not be empty")
        for name in ("input_channels", "input_width", "input_height"):
            check_int(getattr(self, name), name, min_val=1)

    def head_sizes(self) -> HeadSizeDistribution:
        return HeadSizeDistribution.lognormal(self.size_location, self.size_scale,
                                              self.size_bin_width)

    def scale_params(self) -> ScaleParams:
        beta1 = None if self.derive_beta1 else self.beta1
        return build_scale_params(self.head_sizes(), self.num_scales, self.alpha, beta1=beta1,
                                  scale_alpha=self.scale_alpha)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_CONVERTERS: dict[str, Callable[[str], object]] = {
    "rank": _parse_optional(int),
    "jitter": _parse_optional(float),
    "alpha_grid": _parse_floats,
    "beta_grid": _parse_floats,
    "loss": str.strip,
    "graph": str.strip,
}
for _f in dataclasses.fields(ExperimentConfig):
    if _f.name not in _CONVERTERS:
        _CONVERTERS[_f.name] = {int: int, float: float, bool: _parse_bool}[type(_f.default)]


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path=None, **overrides) -> ExperimentConfig:
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, **overrides)


# ------------------------------------------------------------------ scenes


def generate_scenes(config: ExperimentConfig) -> list[AnnotatedScene]:
    """Scene ``i`` draws from ``SeedSequence([seed, i])``, independent of the other scenes."""
    dist = config.head_sizes()
    scenes = []
    for i in range(config.num_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        count = int(rng.integers(config.count_min, config.count_max + 1))
        scene_seed = int(rng.integers(2 ** 32))
        scenes.append(sample_scene(config.width, config.height, count, dist, config.noise_alpha,
                                   scene_seed, margin=config.margin))
    return scenes


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _ordered_map(func, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


# ------------------------------------------------------------------ fitting


@dataclass(frozen=True, eq=False)
class SceneFit:
    true_count: int
    predicted_count: float
    pixel_clipped_count: float
    trace: list = field(repr=False)


def fit_scene(scene: AnnotatedScene, config: ExperimentConfig,
              params: ScaleParams | None = None) -> SceneFit:
    """Fit per-scale predictions from zeros under ``config.loss`` and read off the count.

    The count is the summed fitted maps, clipped at zero. ``pixel_clipped_count``
    instead clips every pixel first. ``params`` overrides the config's scales.
    """
    params = config.scale_params() if params is None else params
    if config.loss == "scale_aware":
        grids = params.grids(scene.width, scene.height)
        terms = precompute_terms(scene, params, grids, mass_threshold=config.mass_threshold,
                                 rank=config.rank, jitter=config.jitter,
                                 rel_jitter=config.rel_jitter)
        objective = ScaleAwareObjective(scene, params, terms, grids, reg_weight=config.reg_weight)
        blocks = scale_aware_blocks(objective)
    else:
        target = render_density(scene, params, 1).values
        blocks = l2_blocks([target])
    result = fit_blocks(blocks, iterations=config.iterations, step=config.step,
                        shrink=config.backtrack, max_backtracks=config.max_backtracks)
    raw = math.fsum(float(v.sum()) for v in result.values)
    clipped = math.fsum(float(np.clip(v, 0.0, None).sum()) for v in result.values)
    return SceneFit(scene.count, max(raw, 0.0), clipped, result.trace)


@dataclass(frozen=True)
class CountReport:
    true_counts: tuple
    predicted_counts: tuple

    def __post_init__(self):
        if len(self.true_counts) != len(self.predicted_counts):
            raise ValueError("true and predicted counts differ in length")
        if not self.true_counts:
            raise ValueError("a count report needs at least one scene")
        if any(p < 0 for p in self.predicted_counts):
            raise ValueError("predicted counts must be >= 0")

    @property
    def abs_errors(self) -> tuple:
        return tuple(abs(p - t) for t, p in zip(self.true_counts, self.predicted_counts))

    @property
    def mae(self) -> float:
        return math.fsum(self.abs_errors) / len(self.abs_errors)

    @property
    def mse(self) -> float:
        return math.fsum(e * e for e in self.abs_errors) / len(self.abs_errors)


def fit_scenes(scenes: Sequence[AnnotatedScene], config: ExperimentConfig,
               threads=1) -> list[SceneFit]:
    return _ordered_map(lambda sc: fit_scene(sc, config), scenes, threads)


def report_from_fits(fits: Sequence[SceneFit]) -> CountReport:
    return CountReport(tuple(f.true_count for f in fits),
                       tuple(f.predicted_count for f in fits))


# ------------------------------------------------------------------ output


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def trace_rows(trace: Sequence[LossBreakdown]):
    for step, b in enumerate(trace):
        for s, (nll, reg) in enumerate(zip(b.per_scale_nll, b.per_scale_reg), start=1):
            yield step, s, nll, reg, nll + reg
        yield step, "all", math.fsum(b.per_scale_nll), math.fsum(b.per_scale_reg), b.total


def _scene_name(i: int) -> str:
    return f"scene_{i:04d}"


# ------------------------------------------------------------------ commands


def cmd_synth(config: ExperimentConfig, out_dir) -> list[Path]:
    """Write seeded scenes and ``manifest.csv``; returns the scene paths."""
    out_dir = Path(out_dir)
    scene_dir = out_dir / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    paths, rows = [], []
    for i, scene in enumerate(generate_scenes(config)):
        path = scene_dir / f"{_scene_name(i)}.txt"
        write_scene(scene, path)
        paths.append(path)
        rows.append((i, f"scenes/{path.name}", scene.count, scene.width, scene.height))
    write_csv(out_dir / "manifest.csv", ("scene_id", "file", "count", "width", "height"), rows)
    return paths


def read_manifest(directory) -> list[AnnotatedScene]:
    directory = Path(directory)
    with open(directory / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [read_scene(directory / row["file"]) for row in rows]


def cmd_fit(config: ExperimentConfig, out_dir, scenes=None, threads=None) -> CountReport:
    """Fit every scene; write ``report.csv``, ``summary.csv`` and one trace CSV per scene."""
    out_dir = Path(out_dir)
    scenes = generate_scenes(config) if scenes is None else list(scenes)
    threads = worker_count() if threads is None else threads
    with threadpool_limits(limits=1):
        fits = fit_scenes(scenes, config, threads)
    report = report_from_fits(fits)
    write_csv(out_dir / "report.csv",
              ("scene_id", "true_count", "predicted_count", "abs_error", "pixel_clipped_count"),
              [(i, f.true_count, f.predicted_count, err, f.pixel_clipped_count)
               for i, (f, err) in enumerate(zip(fits, report.abs_errors))])
    write_csv(out_dir / "summary.csv", ("loss", "num_scenes", "mae", "mse"),
              [(config.loss, len(fits), report.mae, report.mse)])
    for i, f in enumerate(fits):
        write_csv(out_dir / "traces" / f"{_scene_name(i)}.csv",
                  ("step", "scale", "nll", "reg", "total"), trace_rows(f.trace))
    return report


def sweep_configs(config: ExperimentConfig) -> list[ExperimentConfig]:
    """One config per (alpha, beta1) grid point, alpha-major."""
    if config.beta_grid:
        betas = [dict(derive_beta1=False, beta1=b) for b in config.beta_grid]
    else:
        betas = [{}]
    return [config.replace(alpha=a, **b) for a in config.alpha_grid for b in betas]


def cmd_sweep(config: ExperimentConfig, out_dir, scenes=None, threads=None) -> list[tuple]:
    """MAE/MSE per grid point on one shared scene set; writes ``sweep.csv``."""
    scenes = generate_scenes(config) if scenes is None else list(scenes)
    threads = worker_count() if threads is None else threads
    grid = sweep_configs(config)
    jobs = [(g, sc) for g in grid for sc in scenes]
    with threadpool_limits(limits=1):
        fits = _ordered_map(lambda job: fit_scene(job[1], job[0]), jobs, threads)
    rows = []
    for k, g in enumerate(grid):
        report = report_from_fits(fits[k * len(scenes):(k + 1) * len(scenes)])
        rows.append((g.alpha, g.scale_params().betas[0], report.mae, report.mse))
    write_csv(Path(out_dir) / "sweep.csv", ("alpha", "beta1", "mae", "mse"), rows)
    return rows


def cmd_count_ops(config: ExperimentConfig, out_dir, graph_path=None):
    """Per-layer shapes, parameters and MACs of a layer table; writes ``ops.csv``."""
    path = graph_path or config.graph or default_graph_path()
    graph = read_graph_config(path)
    dims = (config.input_channels, config.input_width, config.input_height)
    result = analyze_graph(graph, dims)
    rows = [(r.name, r.kind, r.channels, r.width, r.height, str(r.scale_tag), r.params, r.macs)
            for r in result.layers]
    rows.append(("total", "", "", "", "", "", result.params, result.macs))
    write_csv(Path(out_dir) / "ops.csv",
              ("name", "kind", "channels", "width", "height", "scale", "params", "macs"), rows)
    return result


def cmd_verify(config: ExperimentConfig, out_dir, stream=None) -> int:
    """Run the oracle checks; writes ``verify.csv``, prints a table, returns an exit status."""
    from .verify import run_checks

    stream = sys.stdout if stream is None else stream
    with threadpool_limits(limits=1):
        results = run_checks(seed=config.seed)
    write_csv(Path(out_dir) / "verify.csv", ("check", "tolerance", "value", "passed"),
              [(r.name, r.tolerance, r.value, "yes" if r.passed else "no") for r in results])
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        stream.write(f"{r.name:<{width}}  {status}  value={r.value:.6g}  "
                     f"tolerance={r.tolerance}\n")
    return 0 if all(r.passed for r in results) else 1
