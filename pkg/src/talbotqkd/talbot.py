"""Dispersive propagation and temporal Talbot decoding of control-basis states.

A train of ``d`` pulses spaced by ``tau`` that passes through group delay
dispersion ``beta2 = s * tau**2 / (2*pi)`` re-images itself; the position of
the self-image inside each period encodes the relative phases of the pulses,
so ``|f_n>`` states are told apart by arrival time alone.

Conventions
-----------
Time in ps, angular frequency in rad/ps. Fields are synthesised as
``E(t) = sum_w E(w) exp(+i w t)`` (numpy's ``ifft``), and dispersion multiplies
the spectrum by ``exp(-i beta2 w**2 / 2)``. With this choice frequency ``w``
arrives at ``t = beta2 * w`` and the self-image of ``|f_n>`` sits at
``-n * tau / d`` (mod tau) relative to that of ``|f_0>``, i.e. it moves
towards later times for decreasing ``n``. Window calibration absorbs the
labelling, so nothing downstream depends on the direction.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .states import (
    PulseParams,
    SampledWaveform,
    default_grid,
    dft_basis_vector,
    synthesize_waveform,
    time_basis_vector,
)

__all__ = [
    "GddSpec",
    "ArrivalPdf",
    "DecisionWindows",
    "CalibrationError",
    "GridOverflowError",
    "talbot_separation",
    "matched_pulse_params",
    "propagate_gdd",
    "arrival_pdf",
    "apply_jitter",
    "acceptance_interval",
    "state_pdfs",
    "calibrate_windows",
    "x_basis_confusion",
    "x_basis_response",
    "ConfusionResult",
    "detection_error_rate",
    "error_rate_sweep",
]

SPEED_OF_LIGHT_NM_PER_PS = 299792.458
MAX_GRID_SAMPLES = 1 << 22
EDGE_LEAK_TOL = 1e-6
ACCEPTANCE_COVERAGE = 0.999


class CalibrationError(RuntimeError):
    """Decision windows cannot be derived (usually tau does not match the GDD)."""


class GridOverflowError(RuntimeError):
    """Dispersed field does not fit into the largest allowed grid."""


@dataclass(frozen=True)
class GddSpec:
    """Group delay dispersion of the control-basis arm.

    ``beta2`` is in ps^2. ``bandpass`` is an optional ``(center_nm, width_nm)``
    ideal rectangular spectral mask applied before dispersion, relative to an
    optical carrier at ``carrier_nm``.
    """

    beta2: float
    s: int = 1
    bandpass: tuple[float, float] | None = None
    carrier_nm: float = 1560.0

    def __post_init__(self):
        if self.beta2 < 0:
            raise ValueError("beta2 must be nonnegative")
        if int(self.s) != self.s or self.s < 1:
            raise ValueError("Talbot integer s must be >= 1")
        if self.bandpass is not None:
            center, width = self.bandpass
            if width <= 0 or center <= 0:
                raise ValueError("bandpass needs positive center and width")
            object.__setattr__(self, "bandpass", (float(center), float(width)))


@dataclass(frozen=True, eq=False)
class ArrivalPdf:
    """Normalised time-of-arrival density sampled on ``t0 + dt * arange(n)``."""

    t0: float
    dt: float
    density: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.density, dtype=float)
        if p.ndim != 1 or np.any(p < 0):
            raise ValueError("density must be a nonnegative 1-D array")
        p.setflags(write=False)
        object.__setattr__(self, "density", p)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.density.size)

    @property
    def total(self) -> float:
        return float(self.density.sum() * self.dt)

    def mass_between(self, lo: float, hi: float) -> float:
        t = self.t
        return float(self.density[(t >= lo) & (t < hi)].sum() * self.dt)

    def mean(self) -> float:
        return float(np.sum(self.t * self.density) * self.dt / self.total)

    def std(self) -> float:
        mu = self.mean()
        return float(np.sqrt(np.sum((self.t - mu) ** 2 * self.density) * self.dt / self.total))


@dataclass(frozen=True, eq=False)
class DecisionWindows:
    """Control-basis decision rule.

    Window for symbol ``n`` is the band of width ``period / d`` centred at
    ``offsets[n]`` (mod ``period``); the windows tile each period. Events
    outside ``acceptance = (lo, hi)`` are no-detections. Times are on the
    waveform axis, where pulse 0 of the prepared train is centred at 0.
    """

    period: float
    offsets: np.ndarray
    acceptance: tuple[float, float]

    def __post_init__(self):
        off = np.mod(np.asarray(self.offsets, dtype=float), self.period)
        d = off.size
        if d < 2:
            raise ValueError("need at least two windows")
        width = self.period / d
        slots = np.mod(np.rint((off - off[0]) / width), d).astype(np.int64)
        resid = np.abs(((off - off[0]) / width - np.rint((off - off[0]) / width)))
        if np.any(resid > 1e-6) or np.unique(slots).size != d:
            raise ValueError("window offsets do not form a disjoint tiling of the period")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)
        lo, hi = self.acceptance
        if not hi > lo:
            raise ValueError("empty acceptance span")
        object.__setattr__(self, "acceptance", (float(lo), float(hi)))
        slot_symbol = np.empty(d, dtype=np.int64)
        slot_symbol[slots] = np.arange(d)
        slot_symbol.setflags(write=False)
        object.__setattr__(self, "_slot_symbol", slot_symbol)

    @property
    def d(self) -> int:
        return self.offsets.size

    @property
    def acceptance_span(self) -> float:
        return self.acceptance[1] - self.acceptance[0]

    @property
    def slot_symbol(self) -> np.ndarray:
        """Symbol decoded in slot ``j``, slots counted from ``offsets[0]``."""
        return self._slot_symbol

    def classify(self, t) -> np.ndarray:
        """Decoded symbol for each arrival time; -1 outside the acceptance span."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return kernels.classify_x(
            t, self.offsets[0], self.period, self.slot_symbol, self.acceptance[0], self.acceptance[1]
        )

    def shifted(self, delta: float) -> "DecisionWindows":
        lo, hi = self.acceptance
        return DecisionWindows(self.period, self.offsets + delta, (lo + delta, hi + delta))


def talbot_separation(beta2: float, s: int = 1) -> float:
    """Pulse separation satisfying the temporal Talbot condition, ``sqrt(2*pi*beta2/s)``."""
    if beta2 <= 0:
        raise ValueError("beta2 must be positive")
    if int(s) != s or s < 1:
        raise ValueError("Talbot integer s must be >= 1")
    return float(np.sqrt(2.0 * np.pi * beta2 / s))


def matched_pulse_params(d: int, g: GddSpec, **kwargs) -> PulseParams:
    """Pulse train whose separation meets the Talbot condition for ``g``."""
    return PulseParams(d=d, separation=talbot_separation(g.beta2, g.s), **kwargs)


# -- propagation --------------------------------------------------------------


def _spectral_mask(omega: np.ndarray, g: GddSpec) -> np.ndarray | None:
    if g.bandpass is None:
        return None
    center, width = g.bandpass
    c = SPEED_OF_LIGHT_NM_PER_PS
    nu0 = c / g.carrier_nm
    nu = nu0 + omega / (2.0 * np.pi)
    nu_lo = c / (center + 0.5 * width)
    nu_hi = c / (center - 0.5 * width)
    return ((nu >= nu_lo) & (nu <= nu_hi)).astype(float)


def _propagate_fields(fields: np.ndarray, t0: float, dt: float, g: GddSpec,
                      max_samples: int = MAX_GRID_SAMPLES) -> tuple[float, np.ndarray]:
    """Disperse each row of ``fields``; returns the (possibly extended) grid start and rows."""
    n0 = fields.shape[1]
    n = 1 << int(np.ceil(np.log2(n0)))
    while True:
        if n > max_samples:
            raise GridOverflowError(
                f"dispersed field needs more than {max_samples} samples "
                f"({max_samples * dt:.0f} ps at dt={dt} ps)"
            )
        pad_lo = (n - n0) // 2
        buf = np.zeros((fields.shape[0], n), dtype=complex)
        buf[:, pad_lo:pad_lo + n0] = fields
        omega = 2.0 * np.pi * np.fft.fftfreq(n, dt)
        transfer = np.exp(-0.5j * g.beta2 * omega**2)
        mask = _spectral_mask(omega, g)
        if mask is not None:
            transfer = transfer * mask
        out = np.fft.ifft(np.fft.fft(buf, axis=1) * transfer, axis=1)
        power = np.abs(out) ** 2
        guard = max(n // 16, 1)
        edge = power[:, :guard].sum(axis=1) + power[:, -guard:].sum(axis=1)
        total = power.sum(axis=1)
        if np.all(edge <= EDGE_LEAK_TOL * np.maximum(total, 1e-300)):
            return t0 - pad_lo * dt, out
        n *= 2


def propagate_gdd(w: SampledWaveform, g: GddSpec, max_samples: int = MAX_GRID_SAMPLES) -> SampledWaveform:
    """Apply the dispersion (and optional bandpass) of ``g`` to ``w``.

    The grid is grown by factors of two, up to ``max_samples``, until less
    than 1e-6 of the output energy sits in the outer sixteenths of the grid.
    """
    if g.beta2 == 0 and g.bandpass is None:
        return SampledWaveform(w.t0, w.dt, w.samples.copy(), w.params)
    t0, out = _propagate_fields(w.samples[None, :], w.t0, w.dt, g, max_samples)
    return SampledWaveform(t0, w.dt, out[0], w.params)


def arrival_pdf(w: SampledWaveform) -> ArrivalPdf:
    """Normalised ``|E(t)|^2``."""
    power = np.abs(w.samples) ** 2
    energy = power.sum() * w.dt
    if not energy > 0:
        raise ValueError("waveform carries no energy")
    return ArrivalPdf(w.t0, w.dt, power / energy)


def _gaussian_smooth(density: np.ndarray, dt: float, sigma: float) -> np.ndarray:
    n0 = density.size
    pad = int(np.ceil(10.0 * sigma / dt))
    n = 1 << int(np.ceil(np.log2(n0 + 2 * pad)))
    buf = np.zeros(n)
    buf[pad:pad + n0] = density
    omega = 2.0 * np.pi * np.fft.rfftfreq(n, dt)
    out = np.fft.irfft(np.fft.rfft(buf) * np.exp(-0.5 * (omega * sigma) ** 2), n)
    return out, pad


def apply_jitter(p: ArrivalPdf, sigma_rms: float) -> ArrivalPdf:
    """Convolve with a zero-mean gaussian of standard deviation ``sigma_rms`` ps."""
    if sigma_rms < 0:
        raise ValueError("jitter must be nonnegative")
    if sigma_rms == 0:
        return p
    out, pad = _gaussian_smooth(p.density, p.dt, sigma_rms)
    out = np.clip(out, 0.0, None)
    out *= p.density.sum() / out.sum()
    return ArrivalPdf(p.t0 - pad * p.dt, p.dt, out)


def acceptance_interval(pdfs, coverage: float = ACCEPTANCE_COVERAGE) -> tuple[float, float]:
    """Central interval holding ``coverage`` of the summed mass of ``pdfs``.

    All densities must share one grid.
    """
    pdfs = list(pdfs)
    total = np.sum([q.density for q in pdfs], axis=0)
    cdf = np.cumsum(total)
    cdf /= cdf[-1]
    tail = 0.5 * (1.0 - coverage)
    t = pdfs[0].t
    lo = t[np.searchsorted(cdf, tail)]
    hi = t[min(np.searchsorted(cdf, 1.0 - tail), t.size - 1)] + pdfs[0].dt
    return float(lo), float(hi)


# -- control-basis decoding ----------------------------------------------------


@functools.lru_cache(maxsize=64)
def _state_pdfs_cached(p: PulseParams, g: GddSpec, basis: str, dt: float):
    grid = default_grid(p, dt=dt)
    make = dft_basis_vector if basis == "X" else time_basis_vector
    fields = np.array([synthesize_waveform(make(p.d, k), p, grid).samples for k in range(p.d)])
    if g.beta2 == 0 and g.bandpass is None:
        t0, out = grid.t0, fields
    else:
        t0, out = _propagate_fields(fields, grid.t0, dt, g)
    power = np.abs(out) ** 2
    power /= power.sum(axis=1, keepdims=True) * dt
    return tuple(ArrivalPdf(t0, dt, row) for row in power)


def state_pdfs(p: PulseParams, g: GddSpec, basis: str = "X", dt: float = 0.5) -> tuple[ArrivalPdf, ...]:
    """Noiseless arrival densities of all ``d`` states of ``basis`` after the arm ``g``.

    Pass ``GddSpec(0.0)`` for the dispersion-free key-basis arm. All
    returned densities share one grid.
    """
    if basis not in ("X", "Z"):
        raise ValueError("basis must be 'X' or 'Z'")
    return _state_pdfs_cached(p, g, basis, float(dt))


def _fold(pdf: ArrivalPdf, period: float, nbins: int, lo: float, hi: float) -> np.ndarray:
    t = pdf.t
    sel = (t >= lo) & (t < hi)
    idx = np.floor(np.mod(t[sel], period) / period * nbins).astype(np.int64) % nbins
    return np.bincount(idx, weights=pdf.density[sel], minlength=nbins) * pdf.dt


def _band_mass(folded: np.ndarray, width_bins: int) -> np.ndarray:
    """Mass of the circular band starting at each bin."""
    ext = np.concatenate([folded, folded[:width_bins]])
    c = np.concatenate([[0.0], np.cumsum(ext)])
    return c[width_bins:width_bins + folded.size] - c[:folded.size]


def _check_talbot(p: PulseParams, g: GddSpec, rtol: float = 0.01) -> None:
    if g.beta2 <= 0:
        raise CalibrationError("no dispersion in the control arm; Talbot decoding impossible")
    expected = talbot_separation(g.beta2, g.s)
    if abs(p.separation - expected) > rtol * expected:
        raise CalibrationError(
            f"pulse separation {p.separation:.2f} ps violates the Talbot condition "
            f"(expected {expected:.2f} ps for beta2={g.beta2} ps^2, s={g.s})"
        )


def calibrate_windows(p: PulseParams, g: GddSpec, strict: bool = True, dt: float = 0.5,
                      slots_per_window: int = 128) -> DecisionWindows:
    """Derive decision windows from the noiseless ``|f_n>`` densities.

    Each state's best band of width ``period/d`` (mod period) is located; the
    bands must land in distinct slots of one tiling, whose common phase is
    then fitted to maximise the total correctly-decoded mass. ``strict=False``
    skips the Talbot-condition and consistency checks and just returns the
    best tiling under either cyclic labelling, which is what a receiver
    would do with a mismatched separation.
    """
    if strict:
        _check_talbot(p, g)
    elif g.beta2 <= 0:
        raise CalibrationError("no dispersion in the control arm; Talbot decoding impossible")
    d = p.d
    pdfs = state_pdfs(p, g, "X", dt)
    acceptance = acceptance_interval(pdfs)
    period = 2.0 * np.pi * g.beta2 / p.separation  # fringe period, equal to tau when matched
    nb = d * slots_per_window
    bands = np.array([_band_mass(_fold(q, period, nb, *acceptance), slots_per_window) for q in pdfs])

    if strict:
        best = np.argmax(bands, axis=1)
        rel = np.mod(np.rint((best - best[0]) / slots_per_window), d).astype(np.int64)
        if np.unique(rel).size != d:
            raise CalibrationError("ambiguous calibration: two states decode into the same window")
        candidates = [rel]
    else:
        k = np.arange(d)
        candidates = [k, np.mod(-k, d)]

    best_total, best_start, best_rel = -1.0, 0, candidates[0]
    for rel in candidates:
        total = np.zeros(nb)
        for n in range(d):
            total += np.roll(bands[n], -rel[n] * slots_per_window)
        start = int(np.argmax(total))
        if total[start] > best_total:
            best_total, best_start, best_rel = total[start], start, rel

    width = period / d
    start_phase = best_start * period / nb
    offsets = start_phase + 0.5 * width + best_rel * width
    windows = DecisionWindows(period, offsets, acceptance)

    if strict:
        for n in range(d):
            slot_mass = [
                bands[n][(best_start + j * slots_per_window) % nb] for j in range(d)
            ]
            if int(np.argmax(slot_mass)) != best_rel[n]:
                raise CalibrationError(
                    f"ambiguous calibration: state {n} is not decoded in its own window"
                )
    return windows


@dataclass(frozen=True, eq=False)
class ConfusionResult:
    matrix: np.ndarray
    accepted: np.ndarray
    windows: DecisionWindows

    @property
    def error_rate(self) -> float:
        return detection_error_rate(self.matrix)


def x_basis_response(p: PulseParams, g: GddSpec, sigma_rms: float,
                     windows: DecisionWindows | None = None, dt: float = 0.5) -> ConfusionResult:
    """Confusion matrix plus per-state accepted probability under detector jitter."""
    if windows is None:
        windows = calibrate_windows(p, g, dt=dt)
    d = p.d
    mat = np.zeros((d, d))
    accepted = np.zeros(d)
    for n, q in enumerate(state_pdfs(p, g, "X", dt)):
        qj = apply_jitter(q, sigma_rms)
        sym = windows.classify(qj.t)
        mass = np.bincount(sym[sym >= 0], weights=qj.density[sym >= 0], minlength=d) * qj.dt
        accepted[n] = mass.sum()
        mat[n] = mass / accepted[n]
    return ConfusionResult(mat, accepted, windows)


def x_basis_confusion(p: PulseParams, g: GddSpec, sigma_rms: float,
                      windows: DecisionWindows | None = None, dt: float = 0.5) -> np.ndarray:
    """Row ``n``: probability of decoding each symbol given ``|f_n>`` was sent and accepted."""
    return x_basis_response(p, g, sigma_rms, windows, dt).matrix


def detection_error_rate(confusion: np.ndarray) -> float:
    return float(1.0 - np.mean(np.diag(confusion)))


def error_rate_sweep(dims, jitters, g: GddSpec, **pulse_kwargs) -> list[tuple[int, float, float]]:
    """``(d, sigma_ps, error_rate)`` for every combination, Talbot-matched pulses."""
    rows = []
    for d in dims:
        p = matched_pulse_params(int(d), g, **pulse_kwargs)
        windows = calibrate_windows(p, g)
        for sigma in jitters:
            rows.append((int(d), float(sigma), x_basis_response(p, g, sigma, windows).error_rate))
    return rows

