from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sacc.annotation import (
    AnnotatedScene,
    Annotation,
    HeadSizeDistribution,
    ScaleParams,
    build_scale_params,
    format_scene,
    parse_scene,
    read_scene,
    rescale_annotations,
    sample_scene,
    write_scene,
)
from sacc.exceptions import DegenerateDistributionError


def test_build_scale_params_halves_from_mean():
    dist = HeadSizeDistribution(sizes=[6.3, 8.3, 10.3], probs=[0.25, 0.5, 0.25])
    params = build_scale_params(dist, 3, 8.0)
    assert dist.mean() == pytest.approx(8.3)
    assert params.betas == pytest.approx((8.3, 4.15, 2.075))
    assert params.alpha == 8.0


def test_build_scale_params_point_mass_single_scale():
    params = build_scale_params(HeadSizeDistribution.point(7.0), 1, 8.0)
    assert params.betas == (7.0,)
    assert params.weights == (1.0,)


def test_build_scale_params_lognormal_weights_match_lookup():
    dist = HeadSizeDistribution.lognormal(math.log(8.0), 0.5)
    params = build_scale_params(dist, 3, 8.0)
    raw = []
    for s in range(1, 4):
        beta = params.betas[3 - s]
        idx = np.argmin(np.abs(dist.sizes - beta))
        raw.append(dist.probs[idx])
    raw = np.array(raw)
    assert sum(params.weights) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(params.weights, raw / raw.sum(), rtol=1e-12)


def test_build_scale_params_degenerate():
    dist = HeadSizeDistribution.point(100.0, bin_width=0.5)
    with pytest.raises(DegenerateDistributionError, match="degenerate head-size distribution"):
        build_scale_params(dist, 2, 8.0, beta1=3.0)


def test_build_scale_params_rejects_bad_inputs():
    dist = HeadSizeDistribution.lognormal()
    with pytest.raises(ValueError):
        build_scale_params(dist, 0, 8.0)
    with pytest.raises(ValueError):
        build_scale_params(dist, 3, 0.0)


@given(location=st.floats(1.0, 3.0), scale=st.floats(0.1, 0.8), num_scales=st.integers(1, 4),
       alpha=st.floats(0.1, 50.0))
def test_scale_params_invariants(location, scale, num_scales, alpha):
    dist = HeadSizeDistribution.lognormal(location, scale, bin_width=0.25)
    try:
        params = build_scale_params(dist, num_scales, alpha)
    except DegenerateDistributionError:
        return
    assert params.alpha > 0
    assert all(b > 0 for b in params.betas)
    assert all(w >= 0 for w in params.weights)
    assert abs(sum(params.weights) - 1.0) <= 1e-9
    for a, b in zip(params.betas, params.betas[1:]):
        assert b == pytest.approx(a / 2, rel=1e-15)


def test_distribution_validation():
    with pytest.raises(ValueError):
        HeadSizeDistribution(sizes=[1.0, 2.0], probs=[0.5, 0.6])
    with pytest.raises(ValueError):
        HeadSizeDistribution(sizes=[2.0, 1.0], probs=[0.5, 0.5])
    dist = HeadSizeDistribution.lognormal()
    assert abs(dist.probs.sum() - 1.0) <= 1e-9


def test_lognormal_samples_positively_skewed():
    dist = HeadSizeDistribution.lognormal()
    assert dist.mean() > dist.median()
    sizes = dist.sample(np.random.default_rng(0), 20_000)
    assert sizes.mean() > np.median(sizes)


def test_sample_scene_zero_noise():
    scene = sample_scene(32, 24, 20, HeadSizeDistribution.lognormal(), 0.0, seed=1)
    np.testing.assert_array_equal(scene.noisy_pos, scene.true_pos)


def test_sample_scene_deterministic():
    dist = HeadSizeDistribution.lognormal()
    a = sample_scene(32, 32, 30, dist, 8.0, seed=5)
    b = sample_scene(32, 32, 30, dist, 8.0, seed=5)
    assert a == b
    assert format_scene(a) == format_scene(b)


def test_sample_scene_empty():
    scene = sample_scene(8, 8, 0, HeadSizeDistribution.lognormal(), 8.0, seed=0)
    assert scene.count == 0
    assert scene.true_pos.shape == (0, 2)


def test_sample_scene_noise_variance():
    n = 10_000
    scene = sample_scene(64, 64, n, HeadSizeDistribution.lognormal(), 8.0, seed=3)
    eps = scene.noisy_pos - scene.true_pos
    var = eps.var(axis=0, ddof=1)
    # sample variance of a normal has standard error sigma^2 sqrt(2 / (n - 1))
    se = 8.0 * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - 8.0) <= 3 * se)


def test_sample_scene_noise_unbiased():
    n = 100_000
    scene = sample_scene(64, 64, n, HeadSizeDistribution.lognormal(), 8.0, seed=4)
    eps = scene.noisy_pos - scene.true_pos
    assert np.all(np.abs(eps.mean(axis=0)) <= 3 * math.sqrt(8.0 / n))


def test_sample_scene_positions_inside():
    scene = sample_scene(10, 20, 500, HeadSizeDistribution.lognormal(), 8.0, seed=2, margin=2.0)
    assert np.all(scene.true_pos[:, 0] >= 2.0) and np.all(scene.true_pos[:, 0] < 8.0)
    assert np.all(scene.true_pos[:, 1] >= 2.0) and np.all(scene.true_pos[:, 1] < 18.0)


def test_scene_rejects_outside_positions():
    with pytest.raises(ValueError):
        AnnotatedScene(4, 4, [[4.0, 1.0]], [[4.0, 1.0]], [8.0])
    with pytest.raises(ValueError):
        AnnotatedScene(4, 4, [[1.0, 1.0]], [[1.0, 1.0]], [0.0])


def test_scene_from_annotations_round_trip():
    anns = [Annotation((1.0, 2.0), (1.5, 2.5), 8.0), Annotation((3.0, 0.5), (2.0, 1.0), 6.0)]
    scene = AnnotatedScene.from_annotations(5, 5, anns)
    assert scene.annotations == anns


def test_rescale_examples():
    scene = AnnotatedScene(128, 64, [[64.0, 32.0], [10.0, 10.0]], [[64.0, 32.0], [10.0, 10.0]],
                           [8.0, 8.0])
    np.testing.assert_array_equal(rescale_annotations(scene, 1, 2.0), scene.noisy_pos)
    assert tuple(rescale_annotations(scene, 2, 2.0)[0]) == (32.0, 16.0)
    assert tuple(rescale_annotations(scene, 3, 2.0)[1]) == (2.5, 2.5)
    # the scene itself is untouched
    assert tuple(scene.noisy_pos[0]) == (64.0, 32.0)


@given(x=st.floats(0, 99.9, allow_subnormal=False), y=st.floats(0, 99.9, allow_subnormal=False),
       s=st.integers(1, 6), factor=st.sampled_from([1.5, 2.0, 3.0]))
def test_rescale_composes(x, y, s, factor):
    scene = AnnotatedScene(100, 100, [[x, y]], [[x, y]], [8.0])
    direct = rescale_annotations(scene, s, factor)
    stepwise = scene.noisy_pos.copy()
    for _ in range(s - 1):
        stepwise = stepwise / factor
    np.testing.assert_allclose(direct, stepwise, rtol=1e-14, atol=0)


def test_scene_text_round_trip(tmp_path):
    scene = sample_scene(40, 30, 25, HeadSizeDistribution.lognormal(), 8.0, seed=11)
    path = tmp_path / "scene.txt"
    write_scene(scene, path)
    back = read_scene(path)
    assert back == scene
    assert path.read_text().splitlines()[0] == "40 30 25"


def test_parse_scene_errors():
    with pytest.raises(ValueError, match="header"):
        parse_scene("1 2\n")
    with pytest.raises(ValueError, match="declares"):
        parse_scene("4 4 2\n1 1 1 1 8\n")


def test_scale_params_alpha_schedule():
    params = ScaleParams.halving(8.0, 8.0, num_scales=3)
    assert [params.alpha_at(s) for s in (1, 2, 3)] == [8.0, 2.0, 0.5]
    flat = ScaleParams.halving(8.0, 8.0, num_scales=3, scale_alpha=False)
    assert [flat.alpha_at(s) for s in (1, 2, 3)] == [8.0, 8.0, 8.0]
    assert params.grids(33, 16) == [(33, 16), (17, 8), (9, 4)]
    with pytest.raises(ValueError):
        params.beta_at(4)
