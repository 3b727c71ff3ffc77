"""Asymptotic two-decoy d-dimensional BB84 key rate.

Weak coherent pulses with intensities ``mu[0] > mu[1] > mu[2] >= 0`` (signal,
weak decoy, weakest decoy). Gains ``G`` and error rates ``Q`` per basis and
intensity are either measured or produced by :func:`model_gain_qber`. The
vacuum and single-photon yields and the single-photon phase error are
bounded with closed-form vacuum+weak decoy estimates; :func:`decoy_bounds_lp`
computes the same quantities as linear programs and serves as a cross-check.

The key rate per pulse is

    r = p_Z^2 * sum_j p_j * [ exp(-mu_j) Y0 log2 d
                              + exp(-mu_j) mu_j Y1 (log2 d - u(e1))
                              - G_Zj u(Q_Zj) ]

with ``u(x) = h(x) + x log2(d-1)`` below ``1 - 1/d`` and ``log2 d`` above.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import linprog
from scipy.stats import poisson

__all__ = [
    "DecoySettings",
    "ChannelModel",
    "DecoyTallies",
    "DecoyBounds",
    "IllConditionedError",
    "InfeasibleTalliesError",
    "binary_entropy",
    "u_func",
    "z_error_from_extinction",
    "model_gain_qber",
    "model_tallies",
    "true_yields",
    "decoy_bounds_analytic",
    "decoy_bounds_lp",
    "skr_bb84",
    "model_key_rate",
    "golden_section_max",
    "optimize_mu1",
    "keyrate_vs_loss",
    "write_tallies_csv",
    "read_tallies_csv",
]

BASES = ("X", "Z")


class IllConditionedError(ValueError):
    """Decoy intensities too close together for the closed-form bounds."""


class InfeasibleTalliesError(ValueError):
    """No set of photon-number yields reproduces the tallies."""


@dataclass(frozen=True)
class DecoySettings:
    """Intensities and their selection probabilities.

    ``p_mu = (1, 0, 0)`` and ``p_z = 1`` give the asymptotic rate where test
    rounds are negligible.
    """

    mu: tuple[float, float, float]
    p_mu: tuple[float, float, float] = (1.0, 0.0, 0.0)
    p_z: float = 1.0

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        p = tuple(float(x) for x in self.p_mu)
        if len(mu) != 3 or len(p) != 3:
            raise ValueError("need exactly three intensities and three probabilities")
        if not mu[0] > mu[1] > mu[2] >= 0:
            raise ValueError(f"intensities must satisfy mu1 > mu2 > mu3 >= 0, got {mu}")
        if any(x < 0 or x > 1 for x in p) or abs(sum(p) - 1) > 1e-9:
            raise ValueError(f"intensity probabilities must lie in [0, 1] and sum to 1, got {p}")
        if not 0 <= self.p_z <= 1:
            raise ValueError("p_z must lie in [0, 1]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "p_mu", p)

    def with_mu1(self, mu1: float) -> "DecoySettings":
        return replace(self, mu=(mu1, self.mu[1], self.mu[2]))


@dataclass(frozen=True)
class ChannelModel:
    """Loss, detection and noise parameters of the link.

    ``balance_attenuation_db`` is extra loss inserted in the key-basis arm to
    equalise the two detection efficiencies; it multiplies ``eta_z``.
    """

    d: int
    channel_loss_db: float = 0.0
    eta_x: float = 0.84
    eta_z: float = 0.81
    p_dc_x: float = 3.36e-7
    p_dc_z: float = 2.80e-7
    err_x: float = 0.2197
    err_z: float = 0.005
    balance_attenuation_db: float = 0.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError("dimension must be an integer >= 2")
        for name in ("eta_x", "eta_z"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("p_dc_x", "p_dc_z"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        top = 1.0 - 1.0 / self.d
        for name in ("err_x", "err_z"):
            v = getattr(self, name)
            if not 0 <= v <= top + 1e-12:
                raise ValueError(f"{name} must lie in [0, {top:.4f}], got {v}")
        if self.balance_attenuation_db < 0:
            raise ValueError("balancing attenuation must be nonnegative")

    def efficiency(self, basis: str) -> float:
        """End-to-end detection probability of one photon in ``basis``."""
        channel = 10.0 ** (-self.channel_loss_db / 10.0)
        if basis == "X":
            return self.eta_x * channel
        if basis == "Z":
            return self.eta_z * channel * 10.0 ** (-self.balance_attenuation_db / 10.0)
        raise ValueError(f"unknown basis {basis!r}")

    def dark(self, basis: str) -> float:
        return self.p_dc_x if basis == "X" else self.p_dc_z

    def error(self, basis: str) -> float:
        return self.err_x if basis == "X" else self.err_z


@dataclass(frozen=True)
class DecoyTallies:
    """Gain and QBER per basis and intensity index (0 = signal)."""

    d: int
    mu: tuple[float, float, float]
    gain_x: tuple[float, float, float]
    qber_x: tuple[float, float, float]
    gain_z: tuple[float, float, float]
    qber_z: tuple[float, float, float]

    def __post_init__(self):
        top = 1.0 - 1.0 / self.d
        for name in ("mu", "gain_x", "qber_x", "gain_z", "qber_z"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 3:
                raise ValueError(f"{name} needs three entries")
            object.__setattr__(self, name, vals)
        for name in ("gain_x", "gain_z"):
            if any(not 0 <= g <= 1 for g in getattr(self, name)):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        for name in ("qber_x", "qber_z"):
            if any(not 0 <= q <= top + 1e-12 for q in getattr(self, name)):
                raise ValueError(f"{name} entries must lie in [0, {top:.4f}]")

    def gain(self, basis: str) -> tuple[float, float, float]:
        return self.gain_x if basis == "X" else self.gain_z

    def qber(self, basis: str) -> tuple[float, float, float]:
        return self.qber_x if basis == "X" else self.qber_z


@dataclass(frozen=True)
class DecoyBounds:
    """Key-basis yield lower bounds and the control-basis single-photon error upper bound."""

    y0_lower: float
    y1_lower: float
    ex1_upper: float
    y1_lower_x: float = field(default=float("nan"))

    def __post_init__(self):
        if not 0 <= self.y0_lower <= 1 or not 0 <= self.y1_lower <= 1:
            raise ValueError("yield bounds must lie in [0, 1]")
        if not 0 <= self.ex1_upper <= 1:
            raise ValueError("error bound must lie in [0, 1]")


# -- entropy --------------------------------------------------------------


def binary_entropy(x: float) -> float:
    """``-x log2 x - (1-x) log2 (1-x)``, zero at both ends."""
    if not 0 <= x <= 1:
        raise ValueError(f"binary entropy needs x in [0, 1], got {x}")
    if x == 0 or x == 1:
        return 0.0
    return float(-x * math.log2(x) - (1 - x) * math.log2(1 - x))


def u_func(x: float, d: int) -> float:
    """Information leaked per error rate ``x`` in dimension ``d``, saturating at ``log2 d``."""
    if d < 2:
        raise ValueError("dimension must be >= 2")
    if not 0 <= x < 1:
        raise ValueError(f"u(x) needs x in [0, 1), got {x}")
    if x >= 1 - 1 / d:
        return math.log2(d)
    if x == 0:
        return 0.0
    return binary_entropy(x) + x * math.log2(d - 1)


def z_error_from_extinction(er_db: float) -> float:
    """Key-basis error from a modulator extinction ratio in dB: ``1 / (1 + 10**(ER/10))``."""
    if er_db < 0:
        raise ValueError("extinction ratio must be nonnegative")
    return 1.0 / (1.0 + 10.0 ** (er_db / 10.0))


# -- channel model --------------------------------------------------------------


def model_gain_qber(c: ChannelModel, s: DecoySettings, basis: str, j: int) -> tuple[float, float]:
    """Expected gain and QBER of intensity ``j`` in ``basis`` for a WCP source.

    A detection occurs unless every photon is lost and no dark count fires.
    Photon-triggered detections err with the basis' intrinsic error rate;
    dark-count-only detections land uniformly on the ``d`` outcomes.
    """
    mu = s.mu[j]
    eta = c.efficiency(basis)
    p_dc = c.dark(basis)
    vac = math.exp(-mu * eta)
    gain = 1.0 - (1.0 - p_dc) * vac
    if gain == 0:
        return 0.0, 0.0
    errors = c.error(basis) * (1.0 - vac) + (c.d - 1) / c.d * p_dc * vac
    qber = min(max(errors / gain, 0.0), 1.0 - 1.0 / c.d)
    return gain, qber


def model_tallies(c: ChannelModel, s: DecoySettings) -> DecoyTallies:
    gx, qx, gz, qz = [], [], [], []
    for j in range(3):
        g, q = model_gain_qber(c, s, "X", j)
        gx.append(g)
        qx.append(q)
        g, q = model_gain_qber(c, s, "Z", j)
        gz.append(g)
        qz.append(q)
    return DecoyTallies(c.d, s.mu, tuple(gx), tuple(qx), tuple(gz), tuple(qz))


def true_yields(c: ChannelModel, basis: str, n_max: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Photon-number yields ``Y_n`` and error rates ``e_n`` implied by the channel model."""
    eta = c.efficiency(basis)
    p_dc = c.dark(basis)
    n = np.arange(n_max + 1)
    lost = (1.0 - eta) ** n
    y = 1.0 - (1.0 - p_dc) * lost
    ey = c.error(basis) * (1.0 - lost) + (c.d - 1) / c.d * p_dc * lost
    return y, np.divide(ey, y, out=np.zeros_like(y), where=y > 0)


# -- decoy bounds ---------------------------------------------------------------


def _analytic_yields(gains, mu) -> tuple[float, float]:
    g1, g2, g3 = gains
    m1, m2, m3 = mu
    if m2 - m3 < 1e-15 * max(m2, 1e-300) or m2 == m3:
        raise IllConditionedError(f"decoy intensities mu2={m2} and mu3={m3} coincide")
    den = m1 * m2 - m1 * m3 - m2**2 + m3**2
    if abs(den) <= 1e-14 * m1 * m2:
        raise IllConditionedError("decoy intensities make the single-photon bound singular")
    y0 = max((m2 * g3 * math.exp(m3) - m3 * g2 * math.exp(m2)) / (m2 - m3), 0.0)
    y1 = m1 / den * (
        g2 * math.exp(m2) - g3 * math.exp(m3) - (m2**2 - m3**2) / m1**2 * (g1 * math.exp(m1) - y0)
    )
    return min(y0, 1.0), min(max(y1, 0.0), 1.0)


def decoy_bounds_analytic(t: DecoyTallies, s: DecoySettings) -> DecoyBounds:
    """Closed-form vacuum+weak decoy bounds.

    Yields come from key-basis tallies; the single-photon error bound uses
    the control-basis gains, error rates and its own single-photon yield bound.
    """
    m1, m2, m3 = s.mu
    if m2 == m3:
        raise IllConditionedError("mu2 == mu3")
    y0, y1 = _analytic_yields(t.gain_z, s.mu)
    _, y1x = _analytic_yields(t.gain_x, s.mu)
    gx, qx = t.gain_x, t.qber_x
    num = qx[1] * gx[1] * math.exp(m2) - qx[2] * gx[2] * math.exp(m3)
    if y1x <= 0:
        e1 = 1.0
    else:
        e1 = min(max(num / ((m2 - m3) * y1x), 0.0), 1.0)
    return DecoyBounds(y0, y1, e1, y1x)


def _poisson_rows(mu, n_cut):
    n = np.arange(n_cut + 1)
    p = poisson.pmf(n[None, :], np.asarray(mu, dtype=float)[:, None])
    tail = np.clip(1.0 - p.sum(axis=1), 0.0, None)
    return p, tail


def _yield_constraints(gains, mu, n_cut):
    """Interval constraints ``lo <= A @ Y <= hi`` reproducing the measured gains.

    Rows are rescaled for conditioning: the two weakest intensities are
    replaced by the weakest one and their difference divided by
    ``mu2 - mu3``, which exposes the single-photon yield at order one.
    """
    p, tail = _poisson_rows(mu, n_cut)
    g = np.asarray(gains, dtype=float)
    e = np.exp(np.asarray(mu, dtype=float))
    a = p * e[:, None]  # rows: mu^n / n!
    # a few ulps of slack so tallies on the boundary of the feasible set
    # (e.g. every yield equal to one) survive their own rounding
    ulps = 8.0 * np.finfo(float).eps * e
    lo = g * e - tail * e - ulps
    hi = g * e + ulps
    m2, m3 = mu[1], mu[2]
    diff = (a[1] - a[2]) / (m2 - m3)
    diff_lo = (lo[1] - hi[2]) / (m2 - m3)
    diff_hi = (hi[1] - lo[2]) / (m2 - m3)
    rows = np.vstack([a[0], diff, a[2]])
    return rows, np.array([lo[0], diff_lo, lo[2]]), np.array([hi[0], diff_hi, hi[2]])


_TIGHT = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _solve(c, a_ub, b_ub, bounds):
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs", options=_TIGHT)
    if res.status == 2:
        # noiseless tallies leave a feasible set only ulps wide, which the
        # tight tolerances can miss after scaling; confirm at the defaults
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleTalliesError("tallies are inconsistent with any set of photon-number yields")
    if not res.success:
        raise RuntimeError(f"LP solver failed: {res.message}")
    return res


def _lp_min_y1(gains, mu, n_cut):
    rows, lo, hi = _yield_constraints(gains, mu, n_cut)
    nv = n_cut + 1
    a_ub = np.vstack([rows, -rows])
    b_ub = np.concatenate([hi, -lo])
    obj = np.zeros(nv)
    obj[1] = 1.0
    res = _solve(obj, a_ub, b_ub, [(0.0, 1.0)] * nv)
    res0 = _solve(np.eye(nv)[0], a_ub, b_ub, [(0.0, 1.0)] * nv)
    return float(res0.fun), float(res.fun)


def _lp_max_error_yield(gains, qbers, mu, n_cut):
    """Largest single-photon error-weighted yield ``e1 * Y1`` consistent with the control tallies."""
    nv = n_cut + 1
    rows, lo, hi = _yield_constraints(gains, mu, n_cut)
    err_gains = np.asarray(gains) * np.asarray(qbers)
    erows, elo, ehi = _yield_constraints(err_gains, mu, n_cut)
    zeros = np.zeros_like(rows)
    # variables: Y_0..Y_n, W_0..W_n with 0 <= W_k <= Y_k
    a_ub = np.vstack([
        np.hstack([rows, zeros]), np.hstack([-rows, zeros]),
        np.hstack([zeros, erows]), np.hstack([zeros, -erows]),
        np.hstack([-np.eye(nv), np.eye(nv)]),
    ])
    b_ub = np.concatenate([hi, -lo, ehi, -elo, np.zeros(nv)])
    obj = np.zeros(2 * nv)
    obj[nv + 1] = -1.0
    res = _solve(obj, a_ub, b_ub, [(0.0, 1.0)] * (2 * nv))
    return float(-res.fun)


def decoy_bounds_lp(t: DecoyTallies, s: DecoySettings, n_cut: int = 20) -> DecoyBounds:
    """Decoy bounds as linear programs over yields ``Y_0..Y_n_cut`` in [0, 1].

    Each measured gain must equal the Poisson mixture of the yields up to the
    unresolved tail mass beyond ``n_cut``. ``Y1`` is minimised; the control
    basis error-weighted yield ``e1 Y1`` is maximised and divided by the
    minimal control-basis ``Y1``.
    """
    if n_cut < 5:
        raise ValueError("n_cut must be at least 5")
    if s.mu[1] == s.mu[2]:
        raise IllConditionedError("mu2 == mu3")
    y0, y1 = _lp_min_y1(t.gain_z, s.mu, n_cut)
    _, y1x = _lp_min_y1(t.gain_x, s.mu, n_cut)
    w1 = _lp_max_error_yield(t.gain_x, t.qber_x, s.mu, n_cut)
    e1 = 1.0 if y1x <= 0 else min(max(w1 / y1x, 0.0), 1.0)
    clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
    return DecoyBounds(clip(y0), clip(y1), e1, clip(y1x))


# -- key rate ---------------------------------------------------------------------


def skr_bb84(b: DecoyBounds, t: DecoyTallies, s: DecoySettings, d: int) -> float:
    """Secret key rate per pulse. Negative values are returned unclamped."""
    log_d = math.log2(d)
    e1 = min(b.ex1_upper, 1.0 - 1e-15)
    single = log_d - u_func(e1, d)
    r = 0.0
    for j in range(3):
        pj = s.p_mu[j]
        if pj == 0:
            continue
        mu = s.mu[j]
        q = min(t.qber_z[j], 1.0 - 1e-15)
        r += pj * (
            math.exp(-mu) * b.y0_lower * log_d
            + math.exp(-mu) * mu * b.y1_lower * single
            - t.gain_z[j] * u_func(q, d)
        )
    return s.p_z**2 * r


def model_key_rate(c: ChannelModel, s: DecoySettings,
                   bounds: Callable[[DecoyTallies, DecoySettings], DecoyBounds] = decoy_bounds_analytic) -> float:
    """Key rate of the channel model, with decoy bounds from ``bounds``."""
    t = model_tallies(c, s)
    return skr_bb84(bounds(t, s), t, s, c.d)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-4) -> tuple[float, float]:
    """Maximise a unimodal ``f`` on ``[lo, hi]`` to an interval of width ``tol``."""
    if not hi > lo:
        raise ValueError(f"empty search range [{lo}, {hi}]")
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    e = a + _INV_PHI * (b - a)
    fc, fe = f(c), f(e)
    while b - a > tol:
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + _INV_PHI * (b - a)
            fe = f(e)
    x = 0.5 * (a + b)
    return x, f(x)


def optimize_mu1(c: ChannelModel, s: DecoySettings, search: tuple[float, float] = (0.01, 1.5),
                 tol: float = 1e-4) -> tuple[float, float]:
    """Signal intensity maximising the model key rate, with the decoys held fixed."""
    lo, hi = search
    if not hi > lo:
        raise ValueError(f"empty search range {search}")
    if lo <= s.mu[1] or hi > 2.0:
        raise ValueError(f"search range must lie in (mu2, 2], got {search}")
    return golden_section_max(lambda m: model_key_rate(c, s.with_mu1(m)), lo, hi, tol)


def keyrate_vs_loss(c: ChannelModel, s: DecoySettings, losses: Iterable[float]) -> list[tuple[float, float]]:
    return [(float(L), model_key_rate(replace(c, channel_loss_db=float(L)), s)) for L in losses]


# -- csv --------------------------------------------------------------------------


def write_tallies_csv(t: DecoyTallies, fh=None) -> str:
    """Rows ``basis, mu, gain, qber``; returns the text and writes it to ``fh`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["basis", "mu", "gain", "qber", "d"])
    for basis in BASES:
        for j in range(3):
            w.writerow([basis, repr(t.mu[j]), repr(t.gain(basis)[j]), repr(t.qber(basis)[j]), t.d])
    text = buf.getvalue()
    if fh is not None:
        if hasattr(fh, "write"):
            fh.write(text)
        else:
            with open(fh, "w") as out:
                out.write(text)
    return text


def read_tallies_csv(source) -> DecoyTallies:
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    if len(rows) != 6 or set(rows[0]) < {"basis", "mu", "gain", "qber"}:
        raise ValueError("tallies CSV needs six rows with columns basis, mu, gain, qber")
    d = int(rows[0]["d"])
    per = {b: [r for r in rows if r["basis"] == b] for b in BASES}
    mu = tuple(float(r["mu"]) for r in per["X"])
    if tuple(float(r["mu"]) for r in per["Z"]) != mu:
        raise ValueError("X and Z rows list different intensities")
    return DecoyTallies(
        d, mu,
        tuple(float(r["gain"]) for r in per["X"]), tuple(float(r["qber"]) for r in per["X"]),
        tuple(float(r["gain"]) for r in per["Z"]), tuple(float(r["qber"]) for r in per["Z"]),
    )
