"""Hot inner loops, JIT-compiled with numba and mirrored in pure numpy.

The active backend is selected once at import time:

* default: numba if importable,
* ``DEFAULTABLE_NUMBA=0`` (or ``false``/``no``) forces the numpy fallback.

Both implementations stay importable (``numpy_impl`` / ``numba_impl``) so
they can be cross-checked in tests and timed against each other in
``benchmarks/bench_kernels.py``.  Every kernel is deterministic and
single-threaded; parallel callers reduce per-batch results in a fixed order.
"""

from __future__ import annotations

import math
import os
import types

import numpy as np

__all__ = [
    "backend",
    "bucket_stats",
    "bucket_stats_compensated",
    "window_first_trigger",
    "shift_collisions",
    "spread_multiplicity",
    "hazard_scan",
    "numpy_impl",
    "numba_impl",
]


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_bucket_stats(ids, values, n_buckets):
    """Per-bucket (sum, sum of squares, count) of ``values`` grouped by ``ids``.

    ids: int64 (m,), entries in [0, n_buckets); negative ids are skipped.
    """
    keep = ids >= 0
    ids = ids[keep]
    values = values[keep]
    sums = np.bincount(ids, weights=values, minlength=n_buckets)
    sumsq = np.bincount(ids, weights=values * values, minlength=n_buckets)
    counts = np.bincount(ids, minlength=n_buckets).astype(np.int64)
    return sums, sumsq, counts


def _np_bucket_stats_compensated(ids, values, n_buckets):
    # Exact per-bucket summation via math.fsum; slow but bit-stable.
    sums = np.zeros(n_buckets)
    sumsq = np.zeros(n_buckets)
    counts = np.zeros(n_buckets, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    ids_s = ids[order]
    vals_s = values[order]
    start = np.searchsorted(ids_s, 0, side="left")
    edges = np.searchsorted(ids_s, np.arange(n_buckets + 1), side="left")
    for b in range(n_buckets):
        lo, hi = max(edges[b], start), edges[b + 1]
        if hi > lo:
            chunk = vals_s[lo:hi]
            sums[b] = math.fsum(chunk)
            sumsq[b] = math.fsum(chunk * chunk)
            counts[b] = hi - lo
    return sums, sumsq, counts


def _np_window_first_trigger(counts, k, threshold, n_nodes):
    """First node u in [0, n_nodes] whose centred 2k-cell window count
    reaches ``threshold``; -1 when no node does.

    counts: int64 (p, n_cells) events per grid cell, n_cells >= n_nodes + k.
    The window at node u covers cells [u-k, u+k-1] clipped to the array.
    """
    p, n_cells = counts.shape
    cum = np.zeros((p, n_cells + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cum[:, 1:])
    u = np.arange(n_nodes + 1)
    lo = np.maximum(u - k, 0)
    hi = np.minimum(u + k, n_cells)
    win = cum[:, hi] - cum[:, lo]
    hit = win >= threshold
    first = np.argmax(hit, axis=1)
    first[~hit[np.arange(p), first]] = -1
    return first.astype(np.int64)


def _np_shift_collisions(flags, occupied, n_keep):
    """Push flags off occupied cells into the next free cell to the right.

    Chained flags stay distinct (unit jumps); flags carried past the end of
    the row are dropped. flags, occupied: bool (p, n_cells); returns bool
    (p, n_keep). Only rows with an actual collision pay the sequential scan.
    """
    p, n = flags.shape
    out = flags[:, :n_keep].copy()
    bad = np.nonzero((flags & occupied).any(axis=1))[0]
    for r in bad:
        frow, orow = flags[r], occupied[r]
        out[r] = False
        carry = 0
        for i in range(n):
            tot = carry + (1 if frow[i] else 0)
            if orow[i]:
                carry = tot
            elif tot >= 1:
                if i < n_keep:
                    out[r, i] = True
                carry = tot - 1
            else:
                carry = 0
    return out


def _np_spread_multiplicity(counts):
    """Flatten per-cell event counts to at-most-one-per-cell indicators.

    Surplus events are carried into the next free cell; any surplus left at
    the right edge is backfilled into free cells scanning leftwards. Event
    totals are preserved unless a whole row saturates.
    """
    counts = counts.astype(np.int64)
    p, n = counts.shape
    flags = counts >= 1
    surplus_rows = np.nonzero(counts.max(axis=1) > 1)[0]
    for r in surplus_rows:
        carry = 0
        row = counts[r]
        frow = np.zeros(n, dtype=bool)
        for i in range(n):
            tot = row[i] + carry
            if tot >= 1:
                frow[i] = True
                carry = tot - 1
            else:
                carry = 0
        if carry > 0:
            for i in range(n - 1, -1, -1):
                if not frow[i]:
                    frow[i] = True
                    carry -= 1
                    if carry == 0:
                        break
        flags[r] = frow
    return flags


def _np_hazard_scan(states, events, valid, n_states):
    """Counts of (observations, events) per integer state on valid nodes.

    states: int64 (p, m); events, valid: bool (p, m).
    """
    obs = np.zeros(n_states, dtype=np.int64)
    hits = np.zeros(n_states, dtype=np.int64)
    for s in range(n_states):
        mask = valid & (states == s)
        obs[s] = int(mask.sum())
        hits[s] = int((mask & events).sum())
    return obs, hits


numpy_impl = types.SimpleNamespace(
    bucket_stats=_np_bucket_stats,
    bucket_stats_compensated=_np_bucket_stats_compensated,
    window_first_trigger=_np_window_first_trigger,
    shift_collisions=_np_shift_collisions,
    spread_multiplicity=_np_spread_multiplicity,
    hazard_scan=_np_hazard_scan,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def nb_bucket_stats(ids, values, n_buckets):
        sums = np.zeros(n_buckets)
        sumsq = np.zeros(n_buckets)
        counts = np.zeros(n_buckets, dtype=np.int64)
        for i in range(ids.shape[0]):
            b = ids[i]
            if b < 0:
                continue
            v = values[i]
            sums[b] += v
            sumsq[b] += v * v
            counts[b] += 1
        return sums, sumsq, counts

    @njit(cache=True)
    def nb_bucket_stats_compensated(ids, values, n_buckets):
        # Kahan-compensated accumulation per bucket.
        sums = np.zeros(n_buckets)
        sumsq = np.zeros(n_buckets)
        c1 = np.zeros(n_buckets)
        c2 = np.zeros(n_buckets)
        counts = np.zeros(n_buckets, dtype=np.int64)
        for i in range(ids.shape[0]):
            b = ids[i]
            if b < 0:
                continue
            v = values[i]
            y = v - c1[b]
            t = sums[b] + y
            c1[b] = (t - sums[b]) - y
            sums[b] = t
            v2 = v * v
            y2 = v2 - c2[b]
            t2 = sumsq[b] + y2
            c2[b] = (t2 - sumsq[b]) - y2
            sumsq[b] = t2
            counts[b] += 1
        return sums, sumsq, counts

    @njit(cache=True)
    def nb_window_first_trigger(counts, k, threshold, n_nodes):
        p, n_cells = counts.shape
        out = np.full(p, -1, dtype=np.int64)
        for r in range(p):
            win = 0
            for c in range(min(k, n_cells)):
                win += counts[r, c]
            if win >= threshold:
                out[r] = 0
                continue
            for u in range(1, n_nodes + 1):
                hi = u + k - 1
                lo = u - k - 1
                if hi < n_cells:
                    win += counts[r, hi]
                if lo >= 0:
                    win -= counts[r, lo]
                if win >= threshold:
                    out[r] = u
                    break
        return out

    @njit(cache=True)
    def nb_shift_collisions(flags, occupied, n_keep):
        p, n = flags.shape
        out = np.zeros((p, n_keep), dtype=np.bool_)
        for r in range(p):
            carry = 0
            for i in range(n):
                tot = carry + (1 if flags[r, i] else 0)
                if occupied[r, i]:
                    carry = tot
                elif tot >= 1:
                    if i < n_keep:
                        out[r, i] = True
                    carry = tot - 1
                else:
                    carry = 0
        return out

    @njit(cache=True)
    def nb_spread_multiplicity(counts):
        p, n = counts.shape
        flags = np.zeros((p, n), dtype=np.bool_)
        for r in range(p):
            carry = 0
            for i in range(n):
                tot = counts[r, i] + carry
                if tot >= 1:
                    flags[r, i] = True
                    carry = tot - 1
                else:
                    carry = 0
            if carry > 0:
                for i in range(n - 1, -1, -1):
                    if not flags[r, i]:
                        flags[r, i] = True
                        carry -= 1
                        if carry == 0:
                            break
        return flags

    @njit(cache=True)
    def nb_hazard_scan(states, events, valid, n_states):
        obs = np.zeros(n_states, dtype=np.int64)
        hits = np.zeros(n_states, dtype=np.int64)
        p, m = states.shape
        for r in range(p):
            for i in range(m):
                if not valid[r, i]:
                    continue
                s = states[r, i]
                if 0 <= s < n_states:
                    obs[s] += 1
                    if events[r, i]:
                        hits[s] += 1
        return obs, hits

    return types.SimpleNamespace(
        bucket_stats=nb_bucket_stats,
        bucket_stats_compensated=nb_bucket_stats_compensated,
        window_first_trigger=nb_window_first_trigger,
        shift_collisions=nb_shift_collisions,
        spread_multiplicity=nb_spread_multiplicity,
        hazard_scan=nb_hazard_scan,
    )


def _numba_enabled() -> bool:
    flag = os.environ.get("DEFAULTABLE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


numba_impl = None
if _numba_enabled():
    try:
        numba_impl = _build_numba_impl()
    except ImportError:
        numba_impl = None

_active = numba_impl if numba_impl is not None else numpy_impl


def backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if _active is numba_impl and numba_impl is not None else "numpy"


bucket_stats = _active.bucket_stats
bucket_stats_compensated = _active.bucket_stats_compensated
window_first_trigger = _active.window_first_trigger
shift_collisions = _active.shift_collisions
spread_multiplicity = _active.spread_multiplicity
hazard_scan = _active.hazard_scan
