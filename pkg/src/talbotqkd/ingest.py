"""Time-tag parsing, round classification and the bundled measurement tables.

Event streams hold ``(channel, timestamp_ps)`` pairs. Channel 0 is the
key-basis (time-bin) detector arm and channel 1 the dispersive control arm.
Each protocol round occupies one frame of ``frame_ps`` picoseconds; inside a
frame, the prepared pulse ``m`` is centred at ``origin_ps + m * tau``.

Two on-disk formats are supported:

* CSV with columns ``channel,t_ps`` (header optional);
* binary: the 8-byte magic ``TQKDTAG1`` followed by packed little-endian
  records of one ``u8`` channel and one ``u64`` timestamp.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kernels
from .keyrate import DecoyTallies
from .talbot import CalibrationError, DecisionWindows

__all__ = [
    "Z_CHANNEL",
    "X_CHANNEL",
    "TimeTagEvent",
    "TimeTags",
    "TimeTagFormatError",
    "RoundReference",
    "FrameLayout",
    "TallyCounts",
    "FixtureRow",
    "parse_timetags",
    "read_timetags",
    "write_timetags",
    "histogram",
    "decode_rounds",
    "fit_offset",
    "classify_and_tally",
    "load_fixtures",
]

Z_CHANNEL = 0
X_CHANNEL = 1
TAG_MAGIC = b"TQKDTAG1"
_TAG_DTYPE = np.dtype([("channel", "u1"), ("t", "<u8")])


class TimeTagFormatError(ValueError):
    """Malformed or out-of-order time-tag input."""


@dataclass(frozen=True)
class TimeTagEvent:
    channel: int
    timestamp: int


@dataclass(frozen=True, eq=False)
class TimeTags:
    """Detection events sorted by timestamp (ties keep input order)."""

    channel: np.ndarray
    timestamp: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channel, dtype=np.uint8)
        ts = np.asarray(self.timestamp, dtype=np.int64)
        if ch.shape != ts.shape or ch.ndim != 1:
            raise ValueError("channel and timestamp must be 1-D arrays of equal length")
        if ts.size and np.any(np.diff(ts) < 0):
            raise ValueError("events must be sorted by timestamp")
        ch.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "channel", ch)
        object.__setattr__(self, "timestamp", ts)

    def __len__(self) -> int:
        return int(self.timestamp.size)

    def __iter__(self) -> Iterator[TimeTagEvent]:
        for c, t in zip(self.channel.tolist(), self.timestamp.tolist()):
            yield TimeTagEvent(c, t)

    def __eq__(self, other):
        if not isinstance(other, TimeTags):
            return NotImplemented
        return np.array_equal(self.channel, other.channel) and np.array_equal(self.timestamp, other.timestamp)

    @classmethod
    def empty(cls) -> "TimeTags":
        return cls(np.zeros(0, np.uint8), np.zeros(0, np.int64))

    @classmethod
    def from_unsorted(cls, channel, timestamp) -> "TimeTags":
        ts = np.asarray(timestamp, dtype=np.int64)
        order = np.argsort(ts, kind="stable")
        return cls(np.asarray(channel)[order], ts[order])


def _validate_order(ch: np.ndarray, ts: np.ndarray) -> None:
    for c in np.unique(ch):
        idx = np.flatnonzero(ch == c)
        bad = np.flatnonzero(np.diff(ts[idx]) < 0)
        if bad.size:
            i = int(idx[bad[0] + 1])
            raise TimeTagFormatError(
                f"timestamp regression on channel {int(c)} at event index {i} "
                f"({int(ts[i])} ps after {int(ts[idx[bad[0]]])} ps)"
            )


def _parse_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    ch, ts = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = [p.strip() for p in s.split(",")]
        if lineno == 1 and parts[0].lower() == "channel":
            continue
        try:
            if len(parts) != 2:
                raise ValueError
            c, t = int(parts[0]), int(parts[1])
        except ValueError:
            raise TimeTagFormatError(f"line {lineno}: expected 'channel,t_ps' integers, got {s!r}") from None
        if not 0 <= c <= 255 or t < 0:
            raise TimeTagFormatError(f"line {lineno}: channel must be 0-255 and t_ps nonnegative")
        ch.append(c)
        ts.append(t)
    return np.array(ch, dtype=np.uint8), np.array(ts, dtype=np.int64)


def _parse_binary(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    body = raw[len(TAG_MAGIC):]
    if len(body) % _TAG_DTYPE.itemsize:
        raise TimeTagFormatError(
            f"binary payload of {len(body)} bytes is not a whole number of {_TAG_DTYPE.itemsize}-byte records"
        )
    rec = np.frombuffer(body, dtype=_TAG_DTYPE)
    if rec.size and rec["t"].max() > np.iinfo(np.int64).max:
        raise TimeTagFormatError("timestamp exceeds the signed 64-bit range")
    return rec["channel"].copy(), rec["t"].astype(np.int64)


def parse_timetags(stream) -> TimeTags:
    """Parse CSV or binary time tags from bytes, text or a file-like object.

    Events must be nondecreasing in time on each channel; the result is
    merged into a single time-ordered stream.
    """
    data = stream.read() if hasattr(stream, "read") else stream
    if isinstance(data, str):
        ch, ts = _parse_csv(data)
    elif data[: len(TAG_MAGIC)] == TAG_MAGIC:
        ch, ts = _parse_binary(bytes(data))
    else:
        try:
            text = bytes(data).decode("ascii")
        except UnicodeDecodeError:
            raise TimeTagFormatError("input is neither CSV text nor a TQKDTAG1 binary stream") from None
        ch, ts = _parse_csv(text)
    _validate_order(ch, ts)
    return TimeTags.from_unsorted(ch, ts)


def read_timetags(path) -> TimeTags:
    with open(path, "rb") as fh:
        return parse_timetags(fh)


def write_timetags(tags: TimeTags, path, fmt: str = "binary") -> None:
    """Write ``tags`` as ``"csv"`` or ``"binary"`` to a path or binary file object."""
    if fmt == "binary":
        rec = np.empty(len(tags), dtype=_TAG_DTYPE)
        rec["channel"] = tags.channel
        rec["t"] = tags.timestamp
        payload = TAG_MAGIC + rec.tobytes()
    elif fmt == "csv":
        buf = io.StringIO()
        buf.write("channel,t_ps\n")
        for c, t in zip(tags.channel.tolist(), tags.timestamp.tolist()):
            buf.write(f"{c},{t}\n")
        payload = buf.getvalue().encode("ascii")
    else:
        raise ValueError(f"unknown time-tag format {fmt!r}")
    if hasattr(path, "write"):
        path.write(payload)
    else:
        Path(path).write_bytes(payload)


def histogram(tags: TimeTags, bin_ps: int, frame_ps: int, channel: int | None = None) -> np.ndarray:
    """Counts of timestamps folded modulo ``frame_ps`` into ``bin_ps``-wide bins."""
    if bin_ps < 1:
        raise ValueError("bin width must be at least 1 ps")
    if frame_ps <= 0:
        raise ValueError("frame must be positive")
    ts = tags.timestamp if channel is None else tags.timestamp[tags.channel == channel]
    return kernels.fold_histogram(ts, frame_ps, bin_ps)


# -- round bookkeeping -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoundReference:
    """What was prepared and which arm measured it, one entry per frame.

    Bases are coded 0 for the key basis (Z) and 1 for the control basis (X).
    """

    alice_basis: np.ndarray
    alice_symbol: np.ndarray
    intensity: np.ndarray
    bob_basis: np.ndarray

    _FIELDS = ("alice_basis", "alice_symbol", "intensity", "bob_basis")

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, f), dtype=np.int64) for f in self._FIELDS]
        n = arrays[0].size
        if any(a.ndim != 1 or a.size != n for a in arrays):
            raise ValueError("reference fields must be 1-D arrays of equal length")
        for f, a in zip(self._FIELDS, arrays):
            a.setflags(write=False)
            object.__setattr__(self, f, a)

    def __len__(self) -> int:
        return int(self.alice_basis.size)

    def __eq__(self, other):
        if not isinstance(other, RoundReference):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self._FIELDS)

    def slice(self, start: int, stop: int) -> "RoundReference":
        return RoundReference(*(getattr(self, f)[start:stop] for f in self._FIELDS))

    @staticmethod
    def concat(parts) -> "RoundReference":
        parts = list(parts)
        return RoundReference(*(np.concatenate([getattr(p, f) for p in parts]) for f in RoundReference._FIELDS))

    def write_csv(self, path) -> None:
        data = np.column_stack([np.arange(len(self))] + [getattr(self, f) for f in self._FIELDS])
        np.savetxt(path, data, fmt="%d", delimiter=",", header="round," + ",".join(self._FIELDS), comments="")

    @classmethod
    def read_csv(cls, path) -> "RoundReference":
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if data.shape[1] != 5:
            raise ValueError("reference CSV needs columns round, alice_basis, alice_symbol, intensity, bob_basis")
        if not np.array_equal(data[:, 0], np.arange(data.shape[0])):
            raise ValueError("reference rounds must be listed in order starting at 0")
        return cls(*(data[:, k] for k in range(1, 5)))


@dataclass(frozen=True, eq=False)
class FrameLayout:
    """Timing geometry shared by the simulator and the analysis.

    Parameters
    ----------
    d : int
    tau : float
        Time-bin separation in ps.
    frame_ps : int
        Frame length; round ``k`` occupies ``[start_ps + k*frame_ps, start_ps + (k+1)*frame_ps)``.
    origin_ps : int
        In-frame time of the centre of pulse 0.
    windows : DecisionWindows
        Control-basis decision rule on the waveform axis (pulse 0 at 0).
    start_ps : int
    """

    d: int
    tau: float
    frame_ps: int
    origin_ps: int
    windows: DecisionWindows
    start_ps: int = 0

    def __post_init__(self):
        if self.frame_ps <= 0:
            raise ValueError("frame must be positive")
        if self.windows.d != self.d:
            raise ValueError("decision windows do not match the dimension")

    def waveform_time(self, in_frame_ps: np.ndarray, offset_ps: float = 0.0) -> np.ndarray:
        """Centre of each 1 ps tag bin on the waveform axis."""
        return in_frame_ps.astype(np.float64) + 0.5 - self.origin_ps - offset_ps

    def classify(self, channel: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Symbol per event from the arm it was detected in; -1 if rejected."""
        out = np.full(t.size, -1, dtype=np.int64)
        z = channel == Z_CHANNEL
        x = channel == X_CHANNEL
        if np.any(z):
            out[z] = kernels.classify_z(t[z], self.d, self.tau)
        if np.any(x):
            out[x] = self.windows.classify(t[x])
        return out


@dataclass(frozen=True, eq=False)
class TallyCounts:
    """Sifted round, detection and error counts indexed ``[basis, intensity]``."""

    d: int
    mu: tuple[float, float, float]
    sent: np.ndarray
    detected: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        for f in ("sent", "detected", "errors"):
            a = np.asarray(getattr(self, f), dtype=np.int64).reshape(2, 3)
            a.setflags(write=False)
            object.__setattr__(self, f, a)
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))

    @classmethod
    def zeros(cls, d: int, mu) -> "TallyCounts":
        z = np.zeros((2, 3), dtype=np.int64)
        return cls(d, mu, z, z, z)

    def merge(self, other: "TallyCounts") -> "TallyCounts":
        if other.d != self.d or other.mu != self.mu:
            raise ValueError("cannot merge tallies of different settings")
        return TallyCounts(self.d, self.mu, self.sent + other.sent, self.detected + other.detected,
                           self.errors + other.errors)

    def __eq__(self, other):
        if not isinstance(other, TallyCounts):
            return NotImplemented
        return (self.d == other.d and self.mu == other.mu and np.array_equal(self.sent, other.sent)
                and np.array_equal(self.detected, other.detected) and np.array_equal(self.errors, other.errors))

    @property
    def gain(self) -> np.ndarray:
        return np.divide(self.detected, self.sent, out=np.zeros((2, 3)), where=self.sent > 0)

    @property
    def qber(self) -> np.ndarray:
        return np.divide(self.errors, self.detected, out=np.zeros((2, 3)), where=self.detected > 0)

    @property
    def tallies(self) -> DecoyTallies:
        g, q = self.gain, self.qber
        return DecoyTallies(self.d, self.mu, tuple(g[1]), tuple(q[1]), tuple(g[0]), tuple(q[0]))


def decode_rounds(tags: TimeTags, n_rounds: int, layout: FrameLayout,
                  offset_ps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Outcome and timestamp of the earliest accepted event of every round.

    Rounds without an accepted event get outcome -1 and timestamp -1.
    Events outside ``[start, start + n_rounds * frame)`` are ignored.
    """
    outcome = np.full(n_rounds, -1, dtype=np.int64)
    stamp = np.full(n_rounds, -1, dtype=np.int64)
    rel = tags.timestamp - layout.start_ps
    inside = (rel >= 0) & (rel < n_rounds * layout.frame_ps)
    ts = tags.timestamp[inside]
    ch = tags.channel[inside]
    if ts.size == 0:
        return outcome, stamp
    frame = (ts - layout.start_ps) // layout.frame_ps
    t = layout.waveform_time(ts - layout.start_ps - frame * layout.frame_ps, offset_ps)
    sym = layout.classify(ch, t)
    ok = sym >= 0
    frames, first = kernels.first_event_per_frame(ts[ok], layout.frame_ps, layout.start_ps)
    outcome[frames] = sym[ok][first]
    stamp[frames] = ts[ok][first]
    return outcome, stamp


def _tally(outcome: np.ndarray, ref: RoundReference, d: int, mu) -> TallyCounts:
    sifted = ref.alice_basis == ref.bob_basis
    det = sifted & (outcome >= 0)
    err = det & (outcome != ref.alice_symbol)
    idx = ref.alice_basis * 3 + ref.intensity
    count = lambda m: np.bincount(idx[m], minlength=6)[:6]  # noqa: E731
    return TallyCounts(d, mu, count(sifted), count(det), count(err))


def _pulse_template(width_ps: float, sigma_ps: float) -> np.ndarray:
    half = int(np.ceil(0.5 * width_ps + 4.0 * sigma_ps)) + 1
    x = np.arange(-half, half + 1, dtype=float)
    box = ((x >= -0.5 * width_ps) & (x < 0.5 * width_ps)).astype(float)
    if sigma_ps > 0:
        g = np.exp(-0.5 * (x / sigma_ps) ** 2)
        box = np.convolve(box, g / g.sum(), mode="same")
    return box / box.sum()


def fit_offset(tags: TimeTags, ref: RoundReference, layout: FrameLayout,
               pulse_width_ps: float = 46.0, sigma_ps: float = 15.0, min_events: int = 20) -> float:
    """Global timing offset from key-basis events of basis-matched rounds.

    The residual of each event against its expected bin centre is
    histogrammed at 1 ps over ``[-frame/2, frame/2)`` and correlated with the
    jittered pulse shape. The argmax locates the peak, and the centroid of the
    residuals within half a bin of it gives the offset.
    """
    n = len(ref)
    rel = tags.timestamp - layout.start_ps
    frame = rel // layout.frame_ps
    keep = (tags.channel == Z_CHANNEL) & (frame >= 0) & (frame < n)
    frame = frame[keep]
    zmatch = (ref.alice_basis[frame] == 0) & (ref.bob_basis[frame] == 0)
    frame = frame[zmatch]
    if frame.size < min_events:
        raise CalibrationError(f"only {frame.size} key-basis calibration events; need {min_events}")
    in_frame = rel[keep][zmatch] - frame * layout.frame_ps
    resid = in_frame + 0.5 - layout.origin_ps - ref.alice_symbol[frame] * layout.tau
    half = layout.frame_ps // 2
    resid = np.mod(resid + half, layout.frame_ps) - half
    counts = np.bincount(np.floor(resid).astype(np.int64) + half, minlength=layout.frame_ps)[: layout.frame_ps]
    tmpl = _pulse_template(pulse_width_ps, sigma_ps)
    # circular correlation, so offsets near +-frame/2 are handled too
    corr = np.real(np.fft.ifft(np.fft.fft(counts) * np.conj(np.fft.fft(tmpl, layout.frame_ps))))
    k = (int(np.argmax(corr)) + tmpl.size // 2) % layout.frame_ps
    coarse = float(k - half)
    near = np.abs(resid - coarse) < 0.5 * layout.tau
    if near.mean() < 0.5:
        raise CalibrationError("no stable timing offset: events do not cluster around the expected bins")
    # the correlation peak of a flat-topped pulse is broad; refine with the centroid
    return float(np.mean(resid[near]))


def classify_and_tally(tags: TimeTags, ref: RoundReference, layout: FrameLayout, mu,
                       calibration_rounds: int = 0, pulse_width_ps: float = 46.0,
                       sigma_ps: float = 15.0) -> TallyCounts:
    """Decode every round against ``ref`` and count gains and errors.

    The first ``calibration_rounds`` rounds only serve to fit a global timing
    offset, which is then removed from the remaining events; with 0 no offset
    is fitted.
    """
    n = len(ref)
    if calibration_rounds < 0 or calibration_rounds > n:
        raise ValueError("calibration_rounds out of range")
    offset = 0.0
    if calibration_rounds:
        end = layout.start_ps + calibration_rounds * layout.frame_ps
        cut = int(np.searchsorted(tags.timestamp, end))
        calib = TimeTags(tags.channel[:cut], tags.timestamp[:cut])
        offset = fit_offset(calib, ref.slice(0, calibration_rounds), layout, pulse_width_ps, sigma_ps)
    outcome, _ = decode_rounds(tags, n, layout, offset)
    keep = slice(calibration_rounds, n)
    return _tally(outcome[keep], ref.slice(calibration_rounds, n), layout.d, mu)


# -- bundled measurement tables -------------------------------------------------


@dataclass(frozen=True)
class FixtureRow:
    """One attenuation setting of a measurement table.

    QBERs are fractions (the tables list percent). Entries missing from the
    table are ``None``; for ``d`` not present, the dict has no key.
    """

    attenuation_db: float
    qber_x: dict
    qber_z: dict
    mu: dict


_TABLE_KIND = {"S1": "qber", "S2": "qber", "S3": "mu", "S4": "mu"}
_ROW_COUNTS = {"S1": 12, "S2": 8, "S3": 12, "S4": 8}


def _num(cell: str) -> float | None:
    cell = cell.strip()
    return None if cell in ("-", "") else float(cell)


def _read_table(name: str) -> list[dict]:
    if name not in _TABLE_KIND:
        raise ValueError(f"unknown table {name!r}; expected one of {sorted(_TABLE_KIND)}")
    text = resources.files("talbotqkd").joinpath("data", f"{name}.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    need = (["qber_x_d{d}_pct", "qber_z_d{d}_pct"] if _TABLE_KIND[name] == "qber"
            else ["mu1_d{d}", "mu2_d{d}", "mu3_d{d}"])
    cols = {"attenuation_db"} | {c.format(d=d) for c in need for d in (2, 4)}
    if not rows or set(rows[0]) != cols:
        raise ValueError(f"table {name} does not match the expected columns {sorted(cols)}")
    if len(rows) != _ROW_COUNTS[name]:
        raise ValueError(f"table {name} has {len(rows)} rows, expected {_ROW_COUNTS[name]}")
    return rows


def load_fixtures(*names: str) -> list[FixtureRow]:
    """Load one QBER table and/or one intensity table, joined on attenuation.

    ``load_fixtures("S1", "S3")`` gives the laboratory rows with both QBERs
    and intensities; a single name gives only that table's fields.
    """
    if not names:
        raise ValueError("name at least one table")
    merged: dict[float, dict] = {}
    for name in names:
        kind = _TABLE_KIND.get(name)
        for r in _read_table(name):
            att = float(r["attenuation_db"])
            if att < 0:
                raise ValueError(f"table {name}: negative attenuation {att}")
            entry = merged.setdefault(att, {"qber_x": {}, "qber_z": {}, "mu": {}})
            for d in (2, 4):
                if kind == "qber":
                    for b in ("x", "z"):
                        v = _num(r[f"qber_{b}_d{d}_pct"])
                        entry[f"qber_{b}"][d] = None if v is None else v / 100.0
                else:
                    mus = [_num(r[f"mu{j}_d{d}"]) for j in (1, 2, 3)]
                    if any(m is None for m in mus):
                        entry["mu"][d] = None
                    else:
                        if not mus[0] > mus[1] > mus[2]:
                            raise ValueError(f"table {name} at {att} dB: intensities not decreasing")
                        entry["mu"][d] = tuple(mus)
    return [FixtureRow(att, e["qber_x"], e["qber_z"], e["mu"]) for att, e in sorted(merged.items())]
