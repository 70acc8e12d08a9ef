"""Walk through the lag-aware join between the event stream and the signal store.

Signals become visible ``availability_lag`` steps after emission. The join
retries up to ``max_retries`` times, ``retry_delay`` steps apart, so a signal
is found exactly when lag <= max_retries * retry_delay.
"""

from __future__ import annotations

import numpy as np

from recdistill.datagen import STREAM_TRAIN, GeneratorConfig, generate_events
from recdistill.signal_store import JoinConfig, SignalStore, join_batch, quantize_logit

events = generate_events(GeneratorConfig(feature_dim=4), 0, 6, STREAM_TRAIN)
logits = quantize_logit(np.linspace(-1.5, 1.5, 6))

for lag in range(5):
    store = SignalStore(lag)
    store.append_batch(events.sample_id, 0, logits, 0)
    cfg = JoinConfig(availability_lag=lag, max_retries=3, retry_delay=1)
    joined = join_batch(store, events, cfg, clock=0)
    found = int(joined.has_signal.sum())
    retries = sorted(set(joined.retries_used[joined.has_signal].tolist())) if found else []
    print(f"lag={lag}  budget=3  joined {found}/6  retries used {retries}")
