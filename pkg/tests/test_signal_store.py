from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recdistill.datagen import GeneratorConfig, generate_events
from recdistill.errors import ConfigError, DuplicateSignalError, SignalParseError
from recdistill.signal_store import (
    MISSING,
    DistillSignal,
    JoinConfig,
    SignalStore,
    fanout_readers,
    join_batch,
    join_stream,
    materialize,
    quantize_logit,
    replay,
)


def _events(step=5, n=8):
    return generate_events(GeneratorConfig(feature_dim=3), step, n)


def _store_for(events, lag=0, version=0, emit=None):
    store = SignalStore(lag)
    logits = np.linspace(-1, 1, len(events))
    store.append_batch(events.sample_id, version, logits, events.step if emit is None else emit)
    return store


def test_append_then_lookup_with_zero_lag():
    store = SignalStore(0)
    store.append(DistillSignal(42, 0, 0.5, 10))
    assert store.lookup(42, 10) == DistillSignal(42, 0, 0.5, 10)


def test_lag_contract():
    store = SignalStore(3)
    store.append(DistillSignal(1, 0, 0.25, 10))
    assert store.lookup(1, 12) is None
    assert store.lookup(1, 13) is not None


def test_duplicate_rejected_and_store_unchanged():
    store = SignalStore()
    store.append(DistillSignal(1, 0, 0.25, 10))
    before = store.columns()
    with pytest.raises(DuplicateSignalError):
        store.append(DistillSignal(1, 0, 9.0, 11))
    with pytest.raises(DuplicateSignalError):
        store.append_batch([2, 2], 0, [0.0, 1.0], 11)
    assert len(store) == 1
    for a, b in zip(before, store.columns()):
        np.testing.assert_array_equal(a, b)
    assert store.high_water_mark == 10


def test_newer_version_wins_lookup():
    store = SignalStore()
    store.append(DistillSignal(7, 0, 0.1, 1))
    store.append(DistillSignal(7, 1, 0.2, 2))
    assert store.lookup(7, 5).teacher_version == 1


def test_high_water_mark_is_monotone():
    store = SignalStore()
    store.append_batch([1, 2], 0, [0.0, 0.0], 5)
    store.append_batch([3], 0, [0.0], 3)
    assert store.high_water_mark == 5


def test_many_appends_keep_index_consistent():
    store = SignalStore()
    rng = np.random.default_rng(0)
    ids = rng.permutation(5000)
    for chunk in np.array_split(ids, 97):
        store.append_batch(chunk, 0, chunk * 0.5, 0)
    pos = store.find(ids)
    np.testing.assert_array_equal(store.columns()[0][pos], ids)
    assert np.all(store.find([10**9]) == -1)


def test_join_same_step_zero_lag():
    events = _events()
    joined = join_stream(_store_for(events, lag=0), events, JoinConfig(availability_lag=0))
    assert all(s.signal is not MISSING and s.retries_used == 0 for s in joined)
    assert [s.signal.sample_id for s in joined] == list(events.sample_id)


def test_join_uses_all_retries_at_lag_equal_budget():
    events = _events()
    cfg = JoinConfig(availability_lag=3, max_retries=3, retry_delay=1)
    joined = join_stream(_store_for(events, lag=3), events, cfg)
    assert all(s.retries_used == 3 for s in joined)
    assert all(s.join_step == s.signal.emit_step + 3 for s in joined)


def test_join_exhaustion_skip_distill_keeps_event():
    events = _events()
    cfg = JoinConfig(availability_lag=10, max_retries=3, retry_delay=1)
    joined = join_stream(_store_for(events, lag=10), events, cfg)
    assert len(joined) == len(events)
    assert all(s.signal is MISSING for s in joined)


def test_join_exhaustion_drop_sample_removes_event():
    events = _events()
    cfg = JoinConfig(availability_lag=10, max_retries=3, missing_policy="drop_sample")
    assert len(join_batch(_store_for(events, lag=10), events, cfg)) == 0


def test_join_without_any_signal_is_missing():
    events = _events()
    joined = join_batch(SignalStore(), events, JoinConfig())
    assert not joined.has_signal.any()


def test_join_rejects_unordered_events():
    events = _events(n=4)
    events.step[:] = [3, 2, 1, 0]
    with pytest.raises(ValueError):
        join_stream(SignalStore(), events, JoinConfig())


@settings(max_examples=60, deadline=None)
@given(lag=st.integers(0, 20), retries=st.integers(0, 6), delay=st.integers(1, 4))
def test_visibility_threshold_is_sharp(lag, retries, delay):
    events = _events(n=5)
    cfg = JoinConfig(availability_lag=lag, max_retries=retries, retry_delay=delay)
    joined = join_batch(_store_for(events, lag=lag), events, cfg)
    if lag <= retries * delay:
        assert joined.has_signal.all()
        assert np.all(joined.join_step >= joined.emit_step + lag)
    else:
        assert not joined.has_signal.any()


@pytest.mark.parametrize(
    "kwargs",
    [dict(availability_lag=-1), dict(max_retries=-1), dict(retry_delay=0), dict(missing_policy="ignore")],
)
def test_join_config_validation(kwargs):
    with pytest.raises(ConfigError):
        JoinConfig(**kwargs)


def test_cursors_are_independent():
    store = SignalStore()
    store.append_batch(np.arange(10), 0, np.arange(10.0), 0)
    a, b = fanout_readers(store, 2)
    first = a.read()
    assert len(first) == 10 and a.read() == []
    assert b.read() == first


def test_cursor_stops_at_invisible_record():
    store = SignalStore(2)
    store.append_batch([1, 2], 0, [0.0, 0.0], [0, 5])
    cur = store.cursor()
    assert [r.sample_id for r in cur.read(at_step=3)] == [1]
    assert [r.sample_id for r in cur.read(at_step=7)] == [2]


def _key(sample):
    return (sample.event.sample_id, sample.signal, sample.retries_used, sample.join_step)


def test_fanout_three_students_get_identical_streams():
    events = _events(n=32)
    store = _store_for(events, lag=1)
    cfg = JoinConfig(availability_lag=1, max_retries=2)
    streams = [[_key(s) for s in join_stream(store, events, cfg)] for _ in fanout_readers(store, 3)]
    assert streams[0] == streams[1] == streams[2]
    assert all(sig is not MISSING for _, sig, _, _ in streams[0])


def test_fanout_needs_a_reader():
    with pytest.raises(ValueError):
        fanout_readers(SignalStore(), 0)


def test_quantize_is_text_stable():
    x = np.random.default_rng(0).normal(0, 3, 1000)
    q = quantize_logit(x)
    np.testing.assert_array_equal(q, [float(f"{v:.9g}") for v in q])


def test_materialize_empty_range(tmp_path):
    store = SignalStore()
    store.append_batch([1, 2], 0, [0.5, 0.25], 3)
    path = materialize(store, (2, 2), tmp_path / "empty.txt")
    assert path.read_text() == ""
    assert len(replay(path)) == 0


def test_materialize_replay_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    store = SignalStore()
    for step in range(10):
        ids = np.arange(step * 100, step * 100 + 100)
        store.append_batch(ids, step // 3, quantize_logit(rng.normal(0, 2, 100)), step)
    back = replay(materialize(store, (0, 10), tmp_path / "signals.txt"))
    assert back.records() == store.records()
    assert back == store


def test_materialize_selects_step_range(tmp_path):
    store = SignalStore()
    for step in range(6):
        store.append_batch([step], 0, [0.5], step)
    back = replay(materialize(store, (2, 4), tmp_path / "part.txt"))
    assert [r.emit_step for r in back.records()] == [2, 3]


def test_replay_truncated_file_names_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1,0,0.5,3\n2,0,0.25,3\n3,0,0.1")
    with pytest.raises(SignalParseError) as info:
        replay(path)
    assert info.value.line_number == 3


def test_replay_malformed_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1,0,0.5,3\n2,0,abc,3\n")
    with pytest.raises(SignalParseError) as info:
        replay(path)
    assert info.value.line_number == 2


def test_replay_is_deterministic(tmp_path):
    store = SignalStore()
    store.append_batch(np.arange(50), 1, np.linspace(-2, 2, 50), 4)
    path = materialize(store, (0, 5), tmp_path / "s.txt")
    assert replay(path) == replay(path)
