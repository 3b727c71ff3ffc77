"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version computing bit-identical results. The numba path is used unless
numba is missing or ``TALBOTQKD_DISABLE_NUMBA`` is set to a non-empty value
other than ``0``. Both implementations stay importable as
:data:`numba_impl` and :data:`numpy_impl` so they can be compared directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    njit = None

_disabled = os.environ.get("TALBOTQKD_DISABLE_NUMBA", "") not in ("", "0")
HAVE_NUMBA = njit is not None
BACKEND = "numba" if HAVE_NUMBA and not _disabled else "numpy"

__all__ = [
    "BACKEND",
    "HAVE_NUMBA",
    "numpy_impl",
    "numba_impl",
    "classify_x",
    "classify_z",
    "sample_inverse_cdf",
    "first_arrival",
    "first_event_per_frame",
    "fold_histogram",
]


# -- pure numpy ---------------------------------------------------------------


def _classify_x_np(t, c0, period, slot_symbol, lo, hi):
    d = slot_symbol.size
    width = period / d
    x = t - c0 + 0.5 * width
    ph = x - period * np.floor(x / period)
    j = np.minimum(np.floor(ph / width).astype(np.int64), d - 1)
    ok = (t >= lo) & (t < hi)
    return np.where(ok, slot_symbol[j], -1)


def _classify_z_np(t, d, tau):
    fin = np.isfinite(t)
    m = np.floor(np.where(fin, t, -tau) / tau + 0.5).astype(np.int64)
    ok = (m >= 0) & (m < d) & fin
    return np.where(ok, m, -1)


def _sample_inverse_cdf_np(cdf, table, u, t0, dt):
    out = np.full(u.size, np.nan)
    for k in np.unique(table):
        sel = table == k
        c = cdf[k]
        uk = u[sel]
        idx = np.searchsorted(c, uk, side="right") - 1
        inside = (idx >= 0) & (idx < c.size - 1)
        idx_c = np.clip(idx, 0, c.size - 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = (uk - c[idx_c]) / (c[idx_c + 1] - c[idx_c])
        out[sel] = np.where(inside, t0 + (idx_c + frac - 0.5) * dt, np.nan)
    return out


def _first_arrival_np(counts, times):
    n = counts.size
    out = np.full(n, np.inf)
    has = counts > 0
    if times.size:
        clean = np.where(np.isnan(times), np.inf, times)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        out[has] = np.minimum.reduceat(clean, starts[has])
    return out


def _first_event_per_frame_np(ts, frame_ps, start):
    frames = (ts - start) // frame_ps
    first = np.ones(ts.size, dtype=np.bool_)
    first[1:] = frames[1:] != frames[:-1]
    return frames[first], np.flatnonzero(first).astype(np.int64)


def _fold_histogram_np(ts, frame_ps, bin_ps, nbins):
    idx = (ts % frame_ps) // bin_ps
    return np.bincount(idx, minlength=nbins).astype(np.int64)


numpy_impl = SimpleNamespace(
    classify_x=_classify_x_np,
    classify_z=_classify_z_np,
    sample_inverse_cdf=_sample_inverse_cdf_np,
    first_arrival=_first_arrival_np,
    first_event_per_frame=_first_event_per_frame_np,
    fold_histogram=_fold_histogram_np,
)


# -- numba --------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _classify_x_nb(t, c0, period, slot_symbol, lo, hi):
        d = slot_symbol.size
        width = period / d
        out = np.empty(t.size, dtype=np.int64)
        for i in range(t.size):
            ti = t[i]
            if ti >= lo and ti < hi:
                x = ti - c0 + 0.5 * width
                ph = x - period * np.floor(x / period)
                j = np.int64(np.floor(ph / width))
                if j > d - 1:
                    j = d - 1
                out[i] = slot_symbol[j]
            else:
                out[i] = -1
        return out

    @njit(cache=True)
    def _classify_z_nb(t, d, tau):
        out = np.empty(t.size, dtype=np.int64)
        for i in range(t.size):
            ti = t[i]
            if np.isfinite(ti):
                m = np.int64(np.floor(ti / tau + 0.5))
                out[i] = m if (m >= 0 and m < d) else -1
            else:
                out[i] = -1
        return out

    @njit(cache=True)
    def _sample_inverse_cdf_nb(cdf, table, u, t0, dt):
        out = np.empty(u.size)
        ncdf = cdf.shape[1]
        for i in range(u.size):
            c = cdf[table[i]]
            idx = np.searchsorted(c, u[i], side="right") - 1
            if idx < 0 or idx >= ncdf - 1:
                out[i] = np.nan
            else:
                frac = (u[i] - c[idx]) / (c[idx + 1] - c[idx])
                out[i] = t0 + (idx + frac - 0.5) * dt
        return out

    @njit(cache=True)
    def _first_arrival_nb(counts, times):
        out = np.empty(counts.size)
        pos = 0
        for i in range(counts.size):
            best = np.inf
            for k in range(pos, pos + counts[i]):
                tk = times[k]
                if tk < best:  # NaN never compares smaller
                    best = tk
            out[i] = best
            pos += counts[i]
        return out

    @njit(cache=True)
    def _first_event_per_frame_nb(ts, frame_ps, start):
        frames = np.empty(ts.size, dtype=np.int64)
        index = np.empty(ts.size, dtype=np.int64)
        n = 0
        last = np.int64(0)
        for i in range(ts.size):
            f = (ts[i] - start) // frame_ps
            if n == 0 or f != last:
                frames[n] = f
                index[n] = i
                last = f
                n += 1
        return frames[:n], index[:n]

    @njit(cache=True)
    def _fold_histogram_nb(ts, frame_ps, bin_ps, nbins):
        out = np.zeros(nbins, dtype=np.int64)
        for i in range(ts.size):
            out[(ts[i] % frame_ps) // bin_ps] += 1
        return out

    numba_impl = SimpleNamespace(
        classify_x=_classify_x_nb,
        classify_z=_classify_z_nb,
        sample_inverse_cdf=_sample_inverse_cdf_nb,
        first_arrival=_first_arrival_nb,
        first_event_per_frame=_first_event_per_frame_nb,
        fold_histogram=_fold_histogram_nb,
    )
else:  # pragma: no cover
    numba_impl = None

_impl = numba_impl if BACKEND == "numba" else numpy_impl


# -- dispatch -----------------------------------------------------------------


def classify_x(t, c0: float, period: float, slot_symbol, lo: float, hi: float) -> np.ndarray:
    """Slot decoding of arrival times ``t``; -1 outside ``[lo, hi)``."""
    return _impl.classify_x(
        np.ascontiguousarray(t, dtype=np.float64), float(c0), float(period),
        np.ascontiguousarray(slot_symbol, dtype=np.int64), float(lo), float(hi),
    )


def classify_z(t, d: int, tau: float) -> np.ndarray:
    """Time-bin index of arrival times ``t`` (bin m centred at m*tau); -1 outside."""
    return _impl.classify_z(np.ascontiguousarray(t, dtype=np.float64), int(d), float(tau))


def sample_inverse_cdf(cdf, table, u, t0: float, dt: float) -> np.ndarray:
    """Draw times from tabulated CDFs by piecewise-linear inversion.

    ``cdf[k]`` is nondecreasing with ``cdf[k][0] == 0`` and may end below 1;
    uniforms falling beyond its last value give NaN (probability mass lost
    outside the tabulated range).
    """
    return _impl.sample_inverse_cdf(
        np.ascontiguousarray(cdf, dtype=np.float64), np.ascontiguousarray(table, dtype=np.int64),
        np.ascontiguousarray(u, dtype=np.float64), float(t0), float(dt),
    )


def first_arrival(counts, times) -> np.ndarray:
    """Minimum of each consecutive group of ``times`` (group sizes ``counts``); inf if empty."""
    return _impl.first_arrival(
        np.ascontiguousarray(counts, dtype=np.int64), np.ascontiguousarray(times, dtype=np.float64)
    )


def first_event_per_frame(ts, frame_ps: int, start: int = 0):
    """Frame number and array index of the first event of each occupied frame.

    Frames are counted from ``start`` (events before it get negative frame
    numbers). ``ts`` must be sorted.
    """
    return _impl.first_event_per_frame(np.ascontiguousarray(ts, dtype=np.int64), int(frame_ps), int(start))


def fold_histogram(ts, frame_ps: int, bin_ps: int) -> np.ndarray:
    nbins = -(-int(frame_ps) // int(bin_ps))
    return _impl.fold_histogram(np.ascontiguousarray(ts, dtype=np.int64), int(frame_ps), int(bin_ps), nbins)
