from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from recdistill.datagen import (
    STREAM_HOLDOUT,
    STREAM_TRAIN,
    GeneratorConfig,
    SamplingConfig,
    apply_sampling,
    generate_events,
    make_sample_ids,
    oracle_posterior,
    read_events,
    true_logit,
    weights_at,
    write_events,
)
from recdistill.errors import ConfigError


def _three_sigma(n, p):
    return 3.0 * np.sqrt(n * p * (1 - p))


def test_same_inputs_give_identical_events():
    cfg = GeneratorConfig(nonlinear_scale=1.0, nonlinear_units=8, drift_rate=1e-3)
    a = generate_events(cfg, 17, 256)
    b = generate_events(cfg, 17, 256)
    for field in ("sample_id", "features", "label", "source", "true_posterior"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))


def test_streams_and_steps_are_independent_draws():
    cfg = GeneratorConfig()
    a = generate_events(cfg, 3, 64, STREAM_TRAIN)
    b = generate_events(cfg, 3, 64, STREAM_HOLDOUT)
    c = generate_events(cfg, 4, 64, STREAM_TRAIN)
    assert not np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)
    ids = np.concatenate([a.sample_id, b.sample_id, c.sample_id])
    assert len(np.unique(ids)) == len(ids)


def test_sample_ids_pack_stream_step_index():
    ids = make_sample_ids(2, 5, 3)
    np.testing.assert_array_equal(ids & (2**24 - 1), [0, 1, 2])
    assert np.all((ids >> 24) & (2**28 - 1) == 5)
    assert np.all(ids >> 52 == 2)


def test_no_drift_weights_constant():
    cfg = GeneratorConfig(drift_rate=0.0)
    np.testing.assert_array_equal(weights_at(cfg, 0), weights_at(cfg, 10**6))
    x = np.random.default_rng(0).normal(size=(10, cfg.feature_dim))
    np.testing.assert_array_equal(true_logit(cfg, 0, x), true_logit(cfg, 10**6, x))


def test_drift_starts_at_configured_step():
    cfg = GeneratorConfig(drift_rate=1e-3, drift_start_step=100)
    x = np.random.default_rng(0).normal(size=(10, cfg.feature_dim))
    np.testing.assert_array_equal(true_logit(cfg, 0, x), true_logit(cfg, 100, x))
    assert not np.allclose(true_logit(cfg, 100, x), true_logit(cfg, 600, x))


def test_drift_preserves_weight_norm_without_noise():
    cfg = GeneratorConfig(drift_rate=1e-3, noise_std=0.0)
    assert np.linalg.norm(weights_at(cfg, 5000)) == pytest.approx(np.linalg.norm(weights_at(cfg, 0)))


def test_zero_weights_hit_target_rate():
    cfg = GeneratorConfig(feature_dim=1, base_weights=(0.0,), positive_rate_target=0.5)
    n = 100_000
    events = generate_events(cfg, 0, n)
    assert abs(events.label.sum() - n * 0.5) <= _three_sigma(n, 0.5)
    np.testing.assert_allclose(events.true_posterior, 0.5, atol=1e-12)


@pytest.mark.parametrize("scale", [0.0, 2.0])
def test_intercept_matches_target_rate(scale):
    cfg = GeneratorConfig(positive_rate_target=0.1, nonlinear_scale=scale, nonlinear_units=16)
    events = generate_events(cfg, 0, 100_000, STREAM_HOLDOUT)
    assert events.true_posterior.mean() == pytest.approx(0.1, abs=0.005)


def test_posterior_is_sigmoid_of_true_logit():
    cfg = GeneratorConfig(nonlinear_scale=1.5, nonlinear_units=12)
    events = generate_events(cfg, 9, 50)
    np.testing.assert_allclose(events.true_posterior, expit(true_logit(cfg, 9, events.features)), rtol=1e-15)


def test_oracle_posterior_passthrough():
    events = generate_events(GeneratorConfig(), 0, 10)
    assert oracle_posterior(events[3]) == events.true_posterior[3]


def test_label_mean_matches_posterior_mean():
    cfg = GeneratorConfig(positive_rate_target=0.2)
    events = generate_events(cfg, 0, 100_000)
    p = events.true_posterior
    spread = 3.0 * np.sqrt(np.sum(p * (1 - p)))
    assert abs(events.label.sum() - p.sum()) <= spread


def test_post_drift_posterior_differs():
    cfg = GeneratorConfig(drift_rate=1e-3)
    x = generate_events(cfg, 0, 20).features
    assert not np.allclose(true_logit(cfg, 0, x), true_logit(cfg, 2000, x))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(feature_dim=0),
        dict(base_weights=(1.0, 2.0)),
        dict(traffic_sources=(("a", 0.5), ("b", 0.4))),
        dict(positive_rate_target=1.0),
        dict(nonlinear_units=-1),
        dict(drift_start_step=-1),
    ],
)
def test_generator_config_validation(kwargs):
    with pytest.raises(ConfigError):
        GeneratorConfig(**kwargs)


def test_identity_sampling_keeps_everything():
    cfg = GeneratorConfig()
    events = generate_events(cfg, 0, 1000)
    out = apply_sampling(events, SamplingConfig.uniform(1.0, cfg.source_tags), "ctr", 0)
    assert len(out.kept) == 1000
    assert out.dropped_negative_count == 0 and out.dropped_positive_count == 0


def test_negative_keep_rate_binomial():
    cfg = GeneratorConfig(positive_rate_target=1e-9)
    events = generate_events(cfg, 0, 1_000_000)
    negatives = int((events.label == 0).sum())
    out = apply_sampling(events, SamplingConfig.uniform(10.0, cfg.source_tags), "ctr", 1)
    assert abs(out.kept_negative_count - negatives / 10) <= _three_sigma(negatives, 0.1)


def test_per_source_positive_keep_rates():
    cfg = GeneratorConfig(positive_rate_target=0.5, traffic_sources=(("organic", 0.5), ("ads", 0.5)))
    events = generate_events(cfg, 0, 200_000)
    sampling = SamplingConfig(r_s=1.0, p_x_by_source={("ctr", "organic"): 0.5, ("ctr", "ads"): 1.0})
    out = apply_sampling(events, sampling, "ctr", 2)
    for tag, rate in (("organic", 0.5), ("ads", 1.0)):
        src = events.source == cfg.source_tags.index(tag)
        pos = src & (events.label == 1)
        kept = int((out.kept_mask & pos).sum())
        assert abs(kept - rate * pos.sum()) <= _three_sigma(int(pos.sum()), rate) + 1e-9


def test_kept_negatives_share_feature_distribution():
    cfg = GeneratorConfig()
    events = generate_events(cfg, 0, 200_000)
    out = apply_sampling(events, SamplingConfig.uniform(5.0, cfg.source_tags), "ctr", 3)
    neg = events.label == 0
    kept = out.kept_mask & neg
    x_all, x_kept = events.features[neg], events.features[kept]
    z = (x_kept.mean(0) - x_all.mean(0)) / (x_all.std(0) * np.sqrt(1 / len(x_kept) - 1 / len(x_all)))
    assert np.all(np.abs(z) < 4.0)


def test_missing_p_x_entry_is_config_error():
    events = generate_events(GeneratorConfig(), 0, 10)
    with pytest.raises(ConfigError):
        apply_sampling(events, SamplingConfig(r_s=2.0), "ctr", 0)


def test_sampling_config_validation():
    with pytest.raises(ConfigError):
        SamplingConfig(r_s=0.5)
    with pytest.raises(ConfigError):
        SamplingConfig(p_x_by_source={("ctr", "a"): 0.0})


def test_event_dump_round_trip(tmp_path):
    cfg = GeneratorConfig(feature_dim=4)
    events = generate_events(cfg, 2, 25)
    path = tmp_path / "events.txt"
    write_events(path, events)
    back = read_events(path, cfg.source_tags)
    np.testing.assert_array_equal(back.sample_id, events.sample_id)
    np.testing.assert_array_equal(back.label, events.label)
    np.testing.assert_array_equal(back.source, events.source)
    np.testing.assert_allclose(back.features, events.features, rtol=1e-8)
    first = path.read_text().splitlines()[0].split(",")
    assert len(first) == 5 + 4
