"""Pure-Python store-and-forward kernel (fallback for ``_pipeline``)."""

from __future__ import annotations

import numpy as np

NS_PER_S = 1_000_000_000


def hop_arrivals(ready, sizes, prop_ns, free_at, sched_t, sched_r):
    """Per-packet arrival times after one FIFO link hop.

    Packet ``i`` starts serializing at ``max(ready[i], link free)`` at the
    rate in force at that instant (``sched_t``/``sched_r`` are the link's
    rate breakpoints, first entry at time 0). Serialization time is rounded
    up to whole nanoseconds. Returns ``(arrivals, free_at)`` where
    ``free_at`` is when the last packet left the sender's interface.
    """
    ready_l = ready.tolist()
    sizes_l = sizes.tolist()
    st = sched_t.tolist()
    sr = sched_r.tolist()
    m = len(st)
    j = 0
    out = [0] * len(ready_l)
    for i, r in enumerate(ready_l):
        start = r if r > free_at else free_at
        while j + 1 < m and st[j + 1] <= start:
            j += 1
        rate = sr[j]
        free_at = start + (sizes_l[i] * 8 * NS_PER_S + rate - 1) // rate
        out[i] = free_at + prop_ns
    return np.array(out, dtype=np.int64), int(free_at)
