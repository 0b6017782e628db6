import math

import numpy as np
import pytest

from fedload.dp import (
    AdaptiveClip,
    ClipState,
    DPConfig,
    DPError,
    FixedClip,
    UndefinedEffectiveNoiseError,
    adaptive_clip_update,
    add_server_noise,
    clip_trajectory_rows,
    effective_noise,
    flat_clip,
    noise_sigma,
    sensitivity,
)
from fedload.net.params import ParamLayout, ParamVector


def vec(values):
    arr = np.asarray(values, dtype=float)
    return ParamVector(arr, ParamLayout((("w", (arr.size,)),)))


# --- flat clipping ------------------------------------------------------


def test_clip_zero_vector():
    out, clipped = flat_clip(vec([0.0, 0.0, 0.0]), 1.0)
    assert not clipped
    assert np.array_equal(out.values, np.zeros(3))


def test_clip_forced_scaling():
    v = vec([0.6, 0.0])
    out, clipped = flat_clip(v, 0.3)
    assert clipped
    assert out.norm() == pytest.approx(0.3, rel=1e-12)
    np.testing.assert_allclose(out.values, [0.3, 0.0])


def test_clip_inside_ball_untouched():
    v = vec([0.1, 0.1, 0.1])
    out, clipped = flat_clip(v, 0.3)
    assert not clipped
    assert np.array_equal(out.values, v.values)


def test_clip_rejects_nonfinite_and_bad_bound():
    with pytest.raises(DPError):
        flat_clip(vec([np.inf, 0.0]), 1.0)
    with pytest.raises(DPError):
        flat_clip(vec([1.0]), 0.0)


def test_clip_randomized_suite():
    # norm bound, idempotence, direction preservation
    rng = np.random.default_rng(0)
    for _ in range(2000):
        dim = int(rng.integers(1, 20))
        v = vec(rng.normal(0, rng.uniform(0.01, 5.0), dim))
        bound = float(rng.uniform(0.05, 2.0))
        out, clipped = flat_clip(v, bound)
        assert out.norm() <= bound * (1 + 1e-12)
        again, _ = flat_clip(out, bound)
        np.testing.assert_allclose(again.values, out.values, rtol=1e-12, atol=0)
        norm = v.norm()
        if norm > 0:
            scale = out.norm() / norm
            np.testing.assert_allclose(out.values, scale * v.values, rtol=1e-9, atol=1e-15)
            assert scale >= 0
        assert clipped == (norm > bound)


# --- sensitivity and noise ----------------------------------------------


def test_sensitivity_paper_point():
    assert sensitivity(0.3, 0.1, 100) == pytest.approx(0.03)


def test_sensitivity_single_participant():
    assert sensitivity(0.3, 1.0, 1) == pytest.approx(0.3)


def test_sensitivity_linearity():
    assert sensitivity(0.6, 0.1, 100) == pytest.approx(2 * sensitivity(0.3, 0.1, 100))
    with pytest.raises(DPError):
        sensitivity(0.3, 0.001, 100)


def test_noise_sigma_table_points():
    assert noise_sigma(0.5, 0.03) == pytest.approx(0.015)
    assert noise_sigma(0.1, 0.03) == pytest.approx(0.003)


def test_zero_sigma_leaves_aggregate_unchanged():
    v = vec([0.25, -0.5])
    out = add_server_noise(v, 0.0, seed=1)
    assert out is v


def test_noise_deterministic_per_seed():
    v = vec(np.zeros(64))
    a = add_server_noise(v, 0.1, seed=3, round_index=2)
    b = add_server_noise(v, 0.1, seed=3, round_index=2)
    c = add_server_noise(v, 0.1, seed=3, round_index=3)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert np.std(a.values) == pytest.approx(0.1, rel=0.5)


# --- adaptive clipping --------------------------------------------------


def test_adaptive_no_move_at_target():
    state = ClipState(0.2)
    # half of the updates clipped -> unclipped fraction = target quantile
    out = adaptive_clip_update(state, [True, False], sigma_b=0.0, eta_c=0.2, target_quantile=0.5, seed=0)
    assert out.clip_norm == pytest.approx(0.2)


def test_adaptive_forced_step():
    state = ClipState(1.0)
    out = adaptive_clip_update(state, [False] * 4, sigma_b=0.0, eta_c=0.2, target_quantile=0.5, seed=0)
    assert out.clip_norm == pytest.approx(math.exp(-0.1))


def test_adaptive_tracks_lognormal_median():
    # norms drawn from a fixed lognormal; the clip should settle at the median
    rng = np.random.default_rng(12)
    state = ClipState(0.1)
    draws = []
    for _ in range(500):
        norms = rng.lognormal(mean=math.log(0.2), sigma=0.5, size=20)
        draws.extend(norms)
        flags = [n > state.clip_norm for n in norms]
        state = adaptive_clip_update(state, flags, sigma_b=0.0, eta_c=0.2, target_quantile=0.5, seed=0)
    empirical_median = float(np.median(draws))
    assert abs(state.clip_norm - empirical_median) <= 0.1 * empirical_median


def test_adaptive_stays_positive_with_bounded_steps():
    state = ClipState(0.5)
    eta, gamma = 0.3, 0.4
    factor = math.exp(eta * max(1 - gamma, gamma))
    rng = np.random.default_rng(4)
    for _ in range(200):
        flags = list(rng.uniform(size=5) < 0.5)
        new = adaptive_clip_update(state, flags, 0.0, eta, gamma, seed=0)
        assert new.clip_norm > 0
        ratio = new.clip_norm / state.clip_norm
        assert 1.0 / factor - 1e-12 <= ratio <= factor + 1e-12
        state = new


def test_adaptive_noise_enters_estimate():
    state = ClipState(0.2)
    quiet = adaptive_clip_update(state, [False] * 10, 0.0, 0.2, 0.5, seed=1)
    noisy = adaptive_clip_update(state, [False] * 10, 5.0, 0.2, 0.5, seed=1)
    assert noisy.clip_norm != quiet.clip_norm
    assert noisy.history[0][2] != quiet.history[0][2]


def test_trajectory_rows():
    state = ClipState(0.1)
    for _ in range(3):
        state = adaptive_clip_update(state, [False], 0.0, 0.2, 0.5, seed=0)
    rows = clip_trajectory_rows(state)
    assert [r for r, _ in rows] == [0, 1, 2]
    assert all(c > 0 for _, c in rows)


def test_adaptive_requires_participants():
    with pytest.raises(DPError):
        adaptive_clip_update(ClipState(0.1), [], 0.0, 0.2, 0.5, seed=0)


# --- effective noise ----------------------------------------------------


def test_effective_noise_large_sigma_b_limit():
    assert effective_noise(0.3, 1e9) == pytest.approx(0.3, rel=1e-9)


def test_effective_noise_stated_formula():
    assert effective_noise(0.2, 0.5) == pytest.approx((25.0 - 1.0) ** -0.5)


def test_effective_noise_undefined_at_boundary():
    with pytest.raises(UndefinedEffectiveNoiseError):
        effective_noise(1.0, 0.5)


def test_effective_noise_exceeds_nominal():
    for z in [0.1, 0.4, 0.9]:
        assert effective_noise(z, 0.5) >= z


# --- config validation --------------------------------------------------


def test_config_validation():
    with pytest.raises(DPError):
        DPConfig(noise_scale=-0.1)
    with pytest.raises(DPError):
        DPConfig(noise_scale=0.1, delta=1.5)
    with pytest.raises(DPError):
        FixedClip(0.0)
    with pytest.raises(DPError):
        AdaptiveClip(target_quantile=1.2)
    cfg = DPConfig(noise_scale=0.5, clip=AdaptiveClip())
    assert cfg.adaptive
