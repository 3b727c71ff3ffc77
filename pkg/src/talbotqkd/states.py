"""Time-bin qudit states and their sampled optical waveforms.

The key basis is the set of time bins ``|t_m>``; the control basis is its
discrete Fourier transform

    |f_n> = d**-0.5 * sum_m exp(-2j*pi*n*m/d) |t_m>

with the negative exponent kept as the phase convention throughout the
package. Waveforms place the centre of pulse ``m`` at ``t = m * separation``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy.special import erf

__all__ = [
    "PulseParams",
    "QuditVector",
    "GridSpec",
    "SampledWaveform",
    "time_basis_vector",
    "dft_basis_vector",
    "dft_matrix",
    "overlap_probability",
    "pulse_envelope",
    "default_grid",
    "synthesize_waveform",
    "write_waveform_csv",
    "read_waveform_csv",
    "write_waveform_binary",
    "read_waveform_binary",
]

SHAPES = ("rectangular", "gaussian")
WAVEFORM_MAGIC = b"TQKDWAV1"
_FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class PulseParams:
    """Pulse-train geometry of a prepared symbol.

    Parameters
    ----------
    d : int
        Dimension (number of time bins), at least 2.
    pulse_width : float
        Pulse duration in ps. Full width for rectangular pulses, intensity
        FWHM for gaussian ones.
    separation : float
        Bin separation in ps.
    shape : {"rectangular", "gaussian"}
    edge_fraction : float
        Rectangular pulses only: the edges are smoothed by a gaussian of
        standard deviation ``edge_fraction * pulse_width``. ``0`` gives hard
        edges.
    """

    d: int
    pulse_width: float = 46.0
    separation: float = 284.0
    shape: str = "rectangular"
    edge_fraction: float = 0.2

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"dimension must be an integer >= 2, got {self.d}")
        if not 0 < self.pulse_width < self.separation:
            raise ValueError(
                f"need 0 < pulse_width < separation, got {self.pulse_width} and {self.separation}"
            )
        if self.shape not in SHAPES:
            raise ValueError(f"unknown pulse shape {self.shape!r}; expected one of {SHAPES}")
        if self.edge_fraction < 0:
            raise ValueError("edge_fraction must be nonnegative")

    @property
    def extent(self) -> float:
        """Half-width beyond which the pulse amplitude is negligible (ps)."""
        if self.shape == "gaussian":
            return 8.0 * self.pulse_width * _FWHM_TO_SIGMA
        return 0.5 * self.pulse_width + 8.0 * self.edge_fraction * self.pulse_width


@dataclass(frozen=True, eq=False)
class QuditVector:
    """Normalised amplitude vector of a d-level state."""

    amplitudes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("amplitudes must be a 1-D vector of length >= 2")
        norm = np.vdot(a, a).real
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"state is not normalised (|a|^2 = {norm!r})")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)

    @property
    def d(self) -> int:
        return self.amplitudes.size

    def __eq__(self, other):
        if not isinstance(other, QuditVector):
            return NotImplemented
        return self.d == other.d and np.array_equal(self.amplitudes, other.amplitudes)

    def __hash__(self):
        return hash(self.amplitudes.tobytes())


@dataclass(frozen=True)
class GridSpec:
    """Uniform time grid ``t0 + dt * arange(n)`` in ps."""

    t0: float
    dt: float
    n: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("grid spacing must be positive")
        if self.n < 2:
            raise ValueError("grid needs at least two samples")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.n - 1)


@dataclass(frozen=True, eq=False)
class SampledWaveform:
    """Complex field amplitude on a uniform grid, normalised so sum|a|^2 dt = 1."""

    t0: float
    dt: float
    samples: np.ndarray
    params: PulseParams | None = field(default=None)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("grid spacing must be positive")
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.t0, self.dt, self.samples.size)

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2) * self.dt)


def _check_index(d: int, k: int) -> None:
    if int(d) != d or d < 2:
        raise ValueError(f"dimension must be an integer >= 2, got {d}")
    if not 0 <= k < d:
        raise IndexError(f"basis index {k} out of range for d={d}")


def time_basis_vector(d: int, m: int) -> QuditVector:
    """Return ``|t_m>``."""
    _check_index(d, m)
    a = np.zeros(d, dtype=complex)
    a[m] = 1.0
    return QuditVector(a)


def dft_basis_vector(d: int, n: int) -> QuditVector:
    """Return ``|f_n>``, with amplitudes ``exp(-2j*pi*n*m/d) / sqrt(d)``."""
    _check_index(d, n)
    m = np.arange(d)
    # reduce n*m mod d first so large d keeps full phase accuracy
    return QuditVector(np.exp(-2j * np.pi * ((n * m) % d) / d) / np.sqrt(d))


def dft_matrix(d: int) -> np.ndarray:
    """Matrix whose row n holds the amplitudes of ``|f_n>``."""
    return np.array([dft_basis_vector(d, n).amplitudes for n in range(d)])


def overlap_probability(a: QuditVector, b: QuditVector) -> float:
    """Return ``|<a|b>|^2``."""
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    p = abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2
    return float(min(max(p, 0.0), 1.0))


def pulse_envelope(t: np.ndarray, p: PulseParams) -> np.ndarray:
    """Real field envelope of a single pulse centred at t = 0 (unnormalised)."""
    t = np.asarray(t, dtype=float)
    w = p.pulse_width
    if p.shape == "gaussian":
        sigma = w * _FWHM_TO_SIGMA  # of the intensity
        return np.exp(-(t**2) / (4.0 * sigma**2))
    if p.edge_fraction == 0:
        return ((t >= -0.5 * w) & (t < 0.5 * w)).astype(float)
    s = np.sqrt(2.0) * p.edge_fraction * w
    return 0.5 * (erf((t + 0.5 * w) / s) - erf((t - 0.5 * w) / s))


def default_grid(p: PulseParams, dt: float = 0.5, margin: float = 1000.0) -> GridSpec:
    """Grid covering the whole train plus ``margin`` ps on each side.

    The grid length is rounded up to a power of two, which keeps later FFTs fast.
    """
    lo = -p.extent - margin
    hi = (p.d - 1) * p.separation + p.extent + margin
    n = 1 << int(np.ceil(np.log2((hi - lo) / dt + 1)))
    return GridSpec(lo, dt, n)


def synthesize_waveform(v: QuditVector, p: PulseParams, grid: GridSpec | None = None) -> SampledWaveform:
    """Sample ``sum_m v[m] * pulse(t - m*tau)`` on ``grid`` with unit energy."""
    if v.d != p.d:
        raise ValueError(f"state dimension {v.d} does not match pulse train d={p.d}")
    if grid is None:
        grid = default_grid(p)
    lo = -p.extent
    hi = (p.d - 1) * p.separation + p.extent
    if grid.t0 > lo or grid.t_end < hi:
        raise ValueError(
            f"grid [{grid.t0}, {grid.t_end}] ps does not cover the pulse train [{lo}, {hi}] ps"
        )
    t = grid.t
    field_ = np.zeros(grid.n, dtype=complex)
    for m, a in enumerate(v.amplitudes):
        if a != 0:
            field_ += a * pulse_envelope(t - m * p.separation, p)
    energy = np.sum(np.abs(field_) ** 2) * grid.dt
    return SampledWaveform(grid.t0, grid.dt, field_ / np.sqrt(energy), p)


# -- serialisation ----------------------------------------------------------


def write_waveform_csv(w: SampledWaveform, path) -> None:
    data = np.column_stack([w.t, w.samples.real, w.samples.imag])
    np.savetxt(path, data, delimiter=",", header="t_ps,re,im", comments="", fmt="%.17g")


def _from_columns(t: np.ndarray, re: np.ndarray, im: np.ndarray) -> SampledWaveform:
    if t.size < 2:
        raise ValueError("waveform file holds fewer than two samples")
    dt = (t[-1] - t[0]) / (t.size - 1)
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=1e-9):
        raise ValueError("waveform time axis is not uniform")
    return SampledWaveform(float(t[0]), float(dt), re + 1j * im)


def read_waveform_csv(path) -> SampledWaveform:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return _from_columns(data[:, 0], data[:, 1], data[:, 2])


def write_waveform_binary(w: SampledWaveform, path) -> None:
    """Write the compact format: 16-byte header then little-endian (t, re, im) f64 triples."""
    body = np.column_stack([w.t, w.samples.real, w.samples.imag]).astype("<f8")
    header = WAVEFORM_MAGIC + struct.pack("<I", w.samples.size) + b"\0" * 4
    with _open_binary(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def read_waveform_binary(path) -> SampledWaveform:
    with _open_binary(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != WAVEFORM_MAGIC:
        raise ValueError("not a waveform file (bad magic)")
    (count,) = struct.unpack("<I", raw[8:12])
    body = np.frombuffer(raw, dtype="<f8", offset=16)
    if body.size != 3 * count:
        raise ValueError(f"header announces {count} samples, file holds {body.size // 3}")
    body = body.reshape(count, 3)
    return _from_columns(body[:, 0], body[:, 1], body[:, 2])


def _open_binary(path, mode) -> BinaryIO:
    if isinstance(path, (str, Path)):
        return open(path, mode)
    if isinstance(path, io.IOBase):
        return _NoClose(path)
    raise TypeError(f"cannot open {path!r}")


class _NoClose:
    def __init__(self, fh):
        self.fh = fh

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        return False
