"""Append-only store of teacher logits and the streaming join that consumes it.

The store is a single-writer log. Records are kept in growable column arrays
(append order) plus a small set of sorted index runs that are merged
LSM-style, so batch lookups stay vectorised. A record emitted at step ``e`` is
invisible to readers before ``e + availability_lag``.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DuplicateSignalError, SignalParseError

STORE_DIR_ENV = "RECDISTILL_STORE_DIR"

MISSING_POLICIES = ("skip_distill", "drop_sample")


@dataclass(frozen=True)
class DistillSignal:
    sample_id: int
    teacher_version: int
    t1_logit: float
    emit_step: int


def quantize_logit(x):
    """Round to 9 significant digits so the text format is lossless."""
    x = np.asarray(x, dtype=np.float64)
    out = np.array([float(f"{v:.9g}") for v in x.ravel()]).reshape(x.shape)
    return out if out.ndim else float(out)


class _Run:
    __slots__ = ("ids", "versions", "pos")

    def __init__(self, ids, versions, pos):
        order = np.lexsort((versions, ids))
        self.ids = ids[order]
        self.versions = versions[order]
        self.pos = pos[order]

    def __len__(self):
        return self.ids.shape[0]

    def contains(self, ids, versions) -> np.ndarray:
        lo = np.searchsorted(self.ids, ids, side="left")
        hi = np.searchsorted(self.ids, ids, side="right")
        hit = np.zeros(ids.shape[0], dtype=bool)
        for k in np.nonzero(hi > lo)[0]:
            hit[k] = np.any(self.versions[lo[k] : hi[k]] == versions[k])
        return hit


class SignalStore:
    def __init__(self, availability_lag: int = 0):
        if availability_lag < 0:
            raise ConfigError("availability_lag must be >= 0")
        self.availability_lag = int(availability_lag)
        self._size = 0
        self._ids = np.empty(1024, dtype=np.int64)
        self._versions = np.empty(1024, dtype=np.int64)
        self._logits = np.empty(1024, dtype=np.float64)
        self._emit = np.empty(1024, dtype=np.int64)
        self._runs: list[_Run] = []
        self.high_water_mark: Optional[int] = None

    def __len__(self) -> int:
        return self._size

    # -- writing -----------------------------------------------------------

    def _grow(self, extra: int) -> None:
        need = self._size + extra
        cap = self._ids.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_ids", "_versions", "_logits", "_emit"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[: self._size] = old[: self._size]
            setattr(self, name, new)

    def append_batch(self, sample_ids, teacher_version, t1_logits, emit_step) -> "SignalStore":
        ids = np.atleast_1d(np.asarray(sample_ids, dtype=np.int64))
        n = ids.shape[0]
        versions = np.broadcast_to(np.asarray(teacher_version, dtype=np.int64), (n,)).copy()
        logits = np.broadcast_to(np.asarray(t1_logits, dtype=np.float64), (n,)).copy()
        emit = np.broadcast_to(np.asarray(emit_step, dtype=np.int64), (n,)).copy()
        if n == 0:
            return self
        if not np.all(np.isfinite(logits)):
            raise ValueError("teacher logits must be finite")
        pairs = np.stack([ids, versions], axis=1)
        if np.unique(pairs, axis=0).shape[0] != n:
            raise DuplicateSignalError("duplicate (sample_id, teacher_version) within batch")
        for run in self._runs:
            hit = run.contains(ids, versions)
            if hit.any():
                k = int(np.argmax(hit))
                raise DuplicateSignalError(
                    f"signal ({int(ids[k])}, {int(versions[k])}) already in store"
                )
        self._grow(n)
        s = slice(self._size, self._size + n)
        self._ids[s] = ids
        self._versions[s] = versions
        self._logits[s] = logits
        self._emit[s] = emit
        self._runs.append(_Run(ids, versions, np.arange(self._size, self._size + n)))
        self._size += n
        top = int(emit.max())
        self.high_water_mark = top if self.high_water_mark is None else max(self.high_water_mark, top)
        self._compact()
        return self

    def append(self, signal: DistillSignal) -> "SignalStore":
        return self.append_batch(
            [signal.sample_id], signal.teacher_version, signal.t1_logit, signal.emit_step
        )

    def _compact(self) -> None:
        while len(self._runs) >= 2 and 2 * len(self._runs[-1]) >= len(self._runs[-2]):
            b = self._runs.pop()
            a = self._runs.pop()
            self._runs.append(
                _Run(
                    np.concatenate([a.ids, b.ids]),
                    np.concatenate([a.versions, b.versions]),
                    np.concatenate([a.pos, b.pos]),
                )
            )

    # -- reading -----------------------------------------------------------

    def record(self, pos: int) -> DistillSignal:
        if not 0 <= pos < self._size:
            raise IndexError(pos)
        return DistillSignal(
            int(self._ids[pos]), int(self._versions[pos]), float(self._logits[pos]), int(self._emit[pos])
        )

    def records(self, start: int = 0, stop: Optional[int] = None) -> list[DistillSignal]:
        stop = self._size if stop is None else min(stop, self._size)
        return [self.record(i) for i in range(start, stop)]

    def columns(self, start: int = 0, stop: Optional[int] = None):
        stop = self._size if stop is None else min(stop, self._size)
        s = slice(start, stop)
        return (
            self._ids[s].copy(),
            self._versions[s].copy(),
            self._logits[s].copy(),
            self._emit[s].copy(),
        )

    def visible_at(self, pos: int, step: int, lag: Optional[int] = None) -> bool:
        lag = self.availability_lag if lag is None else lag
        return int(self._emit[pos]) + lag <= step

    def find(self, sample_ids) -> np.ndarray:
        """Position of the newest-version record for each id, or -1."""
        ids = np.atleast_1d(np.asarray(sample_ids, dtype=np.int64))
        best = np.full(ids.shape[0], -1, dtype=np.int64)
        best_ver = np.full(ids.shape[0], np.iinfo(np.int64).min, dtype=np.int64)
        for run in self._runs:
            lo = np.searchsorted(run.ids, ids, side="left")
            hi = np.searchsorted(run.ids, ids, side="right")
            has = hi > lo
            if not has.any():
                continue
            # sorted by (id, version): the newest version sits at hi - 1
            last = np.where(has, hi - 1, 0)
            ver = run.versions[last]
            better = has & (ver > best_ver)
            best[better] = run.pos[last][better]
            best_ver[better] = ver[better]
        return best

    def lookup(self, sample_id: int, at_step: int, lag: Optional[int] = None) -> Optional[DistillSignal]:
        """Newest signal for ``sample_id`` that is visible at ``at_step``, else None."""
        pos = int(self.find([sample_id])[0])
        if pos < 0 or not self.visible_at(pos, at_step, lag):
            return None
        return self.record(pos)

    def cursor(self) -> "StoreCursor":
        return StoreCursor(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalStore) or len(self) != len(other):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))


class StoreCursor:
    """Independent read position over a store's append order."""

    def __init__(self, store: SignalStore):
        self._store = store
        self.position = 0

    def read(self, limit: Optional[int] = None, at_step: Optional[int] = None) -> list[DistillSignal]:
        """Records from the current position; stops at the first one not yet visible."""
        end = len(self._store)
        if limit is not None:
            end = min(end, self.position + limit)
        out = []
        while self.position < end:
            if at_step is not None and not self._store.visible_at(self.position, at_step):
                break
            out.append(self._store.record(self.position))
            self.position += 1
        return out

    def __iter__(self) -> Iterator[DistillSignal]:
        while self.position < len(self._store):
            yield self._store.record(self.position)
            self.position += 1


def fanout_readers(store: SignalStore, n: int) -> list[StoreCursor]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [StoreCursor(store) for _ in range(n)]


@dataclass(frozen=True)
class JoinConfig:
    availability_lag: int = 2
    max_retries: int = 3
    retry_delay: int = 1
    missing_policy: str = "skip_distill"

    def __post_init__(self):
        if self.availability_lag < 0:
            raise ConfigError("availability_lag must be >= 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.retry_delay < 1:
            raise ConfigError("retry_delay must be >= 1")
        if self.missing_policy not in MISSING_POLICIES:
            raise ConfigError(f"missing_policy must be one of {MISSING_POLICIES}")


class Missing:
    """Marker for an event whose signal never became visible."""

    def __repr__(self):
        return "Missing"

    def __bool__(self):
        return False


MISSING = Missing()


@dataclass
class JoinedSample:
    event: object
    signal: object
    retries_used: int
    join_step: int


@dataclass
class JoinedBatch:
    """Columnar join result aligned with ``events``."""

    events: object
    has_signal: np.ndarray
    t1_logit: np.ndarray
    teacher_version: np.ndarray
    emit_step: np.ndarray
    retries_used: np.ndarray
    join_step: np.ndarray

    def __len__(self):
        return int(self.has_signal.shape[0])

    def subset(self, index) -> "JoinedBatch":
        return JoinedBatch(
            self.events.subset(index),
            self.has_signal[index],
            self.t1_logit[index],
            self.teacher_version[index],
            self.emit_step[index],
            self.retries_used[index],
            self.join_step[index],
        )

    def samples(self) -> list[JoinedSample]:
        out = []
        for i in range(len(self)):
            sig = (
                DistillSignal(
                    int(self.events.sample_id[i]),
                    int(self.teacher_version[i]),
                    float(self.t1_logit[i]),
                    int(self.emit_step[i]),
                )
                if self.has_signal[i]
                else MISSING
            )
            out.append(JoinedSample(self.events[i], sig, int(self.retries_used[i]), int(self.join_step[i])))
        return out


def join_batch(store: SignalStore, events, cfg: JoinConfig, clock: Optional[int] = None) -> JoinedBatch:
    """Join events with their signals under the lag/retry contract.

    The first probe for an event happens at ``max(event.step, clock)``; each
    retry advances the probe time by ``retry_delay``. A signal emitted at ``e``
    is found on the first probe at or after ``e + availability_lag``. Events
    whose signal is still invisible after ``max_retries`` retries come back
    with ``has_signal`` False, or are removed under ``drop_sample``.
    """
    n = len(events)
    steps = np.asarray(events.step, dtype=np.int64)
    start = steps if clock is None else np.maximum(steps, clock)
    pos = store.find(events.sample_id) if n else np.zeros(0, dtype=np.int64)
    present = pos >= 0
    safe = np.where(present, pos, 0)
    emit = np.where(present, store._emit[safe] if n else safe, -1)
    wait = emit + cfg.availability_lag - start
    retries = np.where(wait <= 0, 0, -(-wait // cfg.retry_delay))
    joined = present & (retries <= cfg.max_retries)
    retries = np.where(joined, retries, cfg.max_retries)
    out = JoinedBatch(
        events,
        joined,
        np.where(joined, store._logits[safe] if n else 0.0, np.nan),
        np.where(joined, store._versions[safe] if n else 0, -1),
        np.where(joined, emit, -1),
        retries.astype(np.int64),
        start + retries * cfg.retry_delay,
    )
    if cfg.missing_policy == "drop_sample":
        out = out.subset(joined)
    return out


def join_stream(store: SignalStore, events, cfg: JoinConfig, clock: Optional[int] = None) -> list[JoinedSample]:
    """Per-event view of :func:`join_batch`, in event order."""
    steps = np.asarray(events.step)
    if np.any(np.diff(steps) < 0):
        raise ValueError("events must be ordered by step")
    return join_batch(store, events, cfg, clock).samples()


# -- materialisation ---------------------------------------------------------


def _atomic_write(path: Path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.writelines(lines)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def materialize(store: SignalStore, step_range, path) -> Path:
    """Write records with ``lo <= emit_step < hi`` as ``sample_id,teacher_version,t1_logit,emit_step``."""
    lo, hi = step_range
    if store.high_water_mark is not None and lo > store.high_water_mark + 1:
        raise ValueError(f"range start {lo} beyond high-water mark {store.high_water_mark}")
    ids, versions, logits, emit = store.columns()
    sel = (emit >= lo) & (emit < hi)
    lines = [
        f"{int(i)},{int(v)},{float(x):.9g},{int(e)}\n"
        for i, v, x, e in zip(ids[sel], versions[sel], logits[sel], emit[sel])
    ]
    _atomic_write(Path(path), lines)
    return Path(path)


def replay(path, availability_lag: int = 0) -> SignalStore:
    store = SignalStore(availability_lag)
    text = Path(path).read_text()
    if text and not text.endswith("\n"):
        bad = text.count("\n") + 1
        raise SignalParseError(path, bad, "truncated record (no line terminator)")
    ids, versions, logits, emit = [], [], [], []
    for number, line in enumerate(text.splitlines(), start=1):
        parts = line.split(",")
        if len(parts) != 4:
            raise SignalParseError(path, number, f"expected 4 fields, got {len(parts)}")
        try:
            ids.append(int(parts[0]))
            versions.append(int(parts[1]))
            logit = float(parts[2])
            emit.append(int(parts[3]))
        except ValueError as exc:
            raise SignalParseError(path, number, str(exc)) from None
        if not np.isfinite(logit):
            raise SignalParseError(path, number, "non-finite logit")
        logits.append(logit)
    if ids:
        store.append_batch(ids, versions, logits, emit)
    return store


def default_store_dir() -> Path:
    return Path(os.environ.get(STORE_DIR_ENV, "signal_store"))
