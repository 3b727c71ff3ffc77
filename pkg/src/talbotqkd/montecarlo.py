"""Round-by-round photon-counting simulation and the short-pulse attack.

Each round Alice picks a basis, a symbol and an intensity; Bob picks a
measurement arm. The photon number is Poisson, each photon survives with the
arm's end-to-end efficiency and receives an arrival time drawn from the
noiseless density of the prepared state in that arm, plus gaussian detector
jitter. Key-basis photons of basis-matched rounds are moved to a uniformly
chosen wrong bin with probability ``err_z`` (modulator leakage); control-basis
errors come only from the dispersion physics. Dark counts land uniformly in
the frame.

The simulator emits a time-tag stream plus the round reference and obtains
its tallies by running :func:`talbotqkd.ingest.classify_and_tally` on them,
so an exported log re-analysed later gives identical numbers.

Randomness is drawn outside the compiled kernels from one numpy
``Generator`` per chunk of rounds, seeded with ``SeedSequence(seed,
spawn_key=(chunk,))``. Results are bit-reproducible for a fixed seed and
chunk size.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import kernels
from .ingest import (
    X_CHANNEL,
    Z_CHANNEL,
    FrameLayout,
    RoundReference,
    TallyCounts,
    TimeTags,
    classify_and_tally,
    decode_rounds,
)
from .keyrate import ChannelModel, DecoySettings, DecoyTallies
from .states import PulseParams
from .talbot import (
    ArrivalPdf,
    DecisionWindows,
    GddSpec,
    apply_jitter,
    calibrate_windows,
    state_pdfs,
)

__all__ = [
    "ProtocolConfig",
    "RoundRecord",
    "MCResult",
    "AttackResult",
    "TallyCounts",
    "frame_layout",
    "run_protocol",
    "effective_channel",
    "short_pulse_attack",
]

FRAME_GUARD_PS = 5000.0
DEFAULT_CHUNK = 1 << 17


@dataclass(frozen=True)
class ProtocolConfig:
    """Everything needed to simulate a run.

    ``p_basis_z`` is the probability that Alice (and, independently, Bob)
    uses the key basis; ``intensity_probs`` selects among ``decoys.mu``.
    ``err_x`` of ``channel`` is not used: control-basis errors follow from
    ``pulses``, ``gdd`` and ``sigma_jitter``.
    """

    channel: ChannelModel
    decoys: DecoySettings
    pulses: PulseParams
    gdd: GddSpec
    sigma_jitter: float = 15.0
    rounds: int = 100_000
    seed: int = 0
    p_basis_z: float = 0.5
    intensity_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    frame_ps: int | None = None
    dead_time: bool = False
    chunk_rounds: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.rounds <= 0:
            raise ValueError("rounds must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.sigma_jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if not 0 <= self.p_basis_z <= 1:
            raise ValueError("p_basis_z must lie in [0, 1]")
        p = tuple(float(x) for x in self.intensity_probs)
        if len(p) != 3 or any(x < 0 for x in p) or abs(sum(p) - 1) > 1e-9:
            raise ValueError("intensity_probs must be three nonnegative numbers summing to 1")
        object.__setattr__(self, "intensity_probs", p)
        if self.channel.d != self.pulses.d:
            raise ValueError(f"channel dimension {self.channel.d} differs from pulse train d={self.pulses.d}")
        if self.frame_ps is not None and self.frame_ps <= 0:
            raise ValueError("frame must be positive")
        if self.chunk_rounds <= 0:
            raise ValueError("chunk_rounds must be positive")

    @property
    def d(self) -> int:
        return self.pulses.d


@dataclass(frozen=True)
class RoundRecord:
    """One logged round; bases are ``"Z"`` or ``"X"``, ``outcome`` is ``None`` without a detection."""

    round: int
    alice_basis: str
    alice_symbol: int
    intensity: int
    bob_basis: str
    outcome: int | None
    timestamp: int | None


@dataclass(frozen=True, eq=False)
class MCResult:
    counts: TallyCounts
    layout: FrameLayout
    reference: RoundReference | None = None
    events: TimeTags | None = None
    outcome: np.ndarray | None = field(default=None, repr=False)
    stamp: np.ndarray | None = field(default=None, repr=False)

    @property
    def tallies(self) -> DecoyTallies:
        return self.counts.tallies

    def records(self) -> Iterator[RoundRecord]:
        if self.reference is None:
            raise ValueError("run was not logged; pass log=True")
        r = self.reference
        names = ("Z", "X")
        for k in range(len(r)):
            o = int(self.outcome[k])
            yield RoundRecord(
                k, names[r.alice_basis[k]], int(r.alice_symbol[k]), int(r.intensity[k]),
                names[r.bob_basis[k]], None if o < 0 else o, None if o < 0 else int(self.stamp[k]),
            )


# -- geometry ---------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _windows(p: PulseParams, g: GddSpec) -> DecisionWindows:
    return calibrate_windows(p, g)


def frame_layout(cfg: ProtocolConfig) -> FrameLayout:
    """Frame geometry for ``cfg``; raises if the pulses and GDD are inconsistent.

    The default frame is ``d * tau`` plus a 5 ns guard, enlarged if needed so
    that the control-basis acceptance span fits with 500 ps to spare on each
    side. The pulse train is centred in the frame.
    """
    p = cfg.pulses
    w = _windows(p, cfg.gdd)
    lo, hi = w.acceptance
    train_mid = 0.5 * (p.d - 1) * p.separation
    if cfg.frame_ps is None:
        need = 2.0 * max(train_mid - lo, hi - train_mid) + 1000.0
        frame = int(math.ceil(max(p.d * p.separation + FRAME_GUARD_PS, need)))
    else:
        frame = int(cfg.frame_ps)
    origin = int(round(0.5 * frame - train_mid))
    if lo + origin < 0 or hi + origin > frame:
        raise ValueError(f"frame of {frame} ps cannot hold the control-basis acceptance span {hi - lo:.0f} ps")
    return FrameLayout(p.d, p.separation, frame, origin, w)


def _common_grid(groups):
    """Embed densities that share ``dt`` into one table of CDFs."""
    pdfs = [q for g in groups for q in g]
    dt = pdfs[0].dt
    t0 = min(q.t0 for q in pdfs)
    ends = [q.t0 + dt * q.density.size for q in pdfs]
    n = int(round((max(ends) - t0) / dt))
    table = np.zeros((len(pdfs), n + 1))
    for i, q in enumerate(pdfs):
        k = int(round((q.t0 - t0) / dt))
        mass = np.cumsum(q.density) * dt
        table[i, k + 1:k + 1 + mass.size] = mass
        table[i, k + 1 + mass.size:] = mass[-1]
    return table, t0, dt


@functools.lru_cache(maxsize=16)
def _cdf_tables(p: PulseParams, g: GddSpec):
    """Rows ``arm*2d + prep_basis*d + symbol``; arm/basis 0 = Z, 1 = X."""
    flat = GddSpec(0.0)
    groups = [
        state_pdfs(p, flat, "Z"), state_pdfs(p, flat, "X"),
        state_pdfs(p, g, "Z"), state_pdfs(p, g, "X"),
    ]
    return _common_grid(groups)


# -- simulation -------------------------------------------------------------------


def _simulate_chunk(cfg: ProtocolConfig, layout: FrameLayout, first_round: int, n: int,
                    rng: np.random.Generator) -> tuple[RoundReference, TimeTags]:
    d = cfg.d
    c = cfg.channel
    mu = np.asarray(cfg.decoys.mu)
    a_basis = (rng.random(n) >= cfg.p_basis_z).astype(np.int64)
    b_basis = (rng.random(n) >= cfg.p_basis_z).astype(np.int64)
    symbol = rng.integers(0, d, n)
    intensity = rng.choice(3, size=n, p=cfg.intensity_probs)
    eta = np.array([c.efficiency("Z"), c.efficiency("X")])
    n_photon = rng.poisson(mu[intensity])
    k = rng.binomial(n_photon, eta[b_basis])

    owner = np.repeat(np.arange(n), k)
    sym = symbol[owner]
    leak_ok = (a_basis[owner] == 0) & (b_basis[owner] == 0)
    leak = leak_ok & (rng.random(owner.size) < c.err_z)
    sym = np.where(leak, (sym + rng.integers(1, d, owner.size)) % d, sym)
    row = b_basis[owner] * 2 * d + a_basis[owner] * d + sym

    cdf, t0, dt = _cdf_tables(cfg.pulses, cfg.gdd)
    t = kernels.sample_inverse_cdf(cdf, row, rng.random(owner.size), t0, dt)
    if cfg.sigma_jitter > 0:
        t = t + cfg.sigma_jitter * rng.standard_normal(owner.size)

    p_dc = np.array([c.p_dc_z, c.p_dc_x])
    dark = np.flatnonzero(rng.random(n) < p_dc[b_basis])
    t_dark = rng.random(dark.size) * layout.frame_ps - layout.origin_ps

    who = np.concatenate([owner, dark])
    t_all = np.concatenate([t, t_dark])
    in_frame = np.floor(t_all + layout.origin_ps)
    keep = np.isfinite(in_frame) & (in_frame >= 0) & (in_frame < layout.frame_ps)
    who = who[keep]
    stamp = (layout.start_ps + (first_round + who) * layout.frame_ps + in_frame[keep].astype(np.int64))
    chan = np.where(b_basis[who] == 1, X_CHANNEL, Z_CHANNEL)
    order = np.argsort(stamp, kind="stable")
    stamp, chan, who = stamp[order], chan[order], who[order]
    if cfg.dead_time:
        # a click blinds the detector for the rest of the frame
        _, first = kernels.first_event_per_frame(stamp, layout.frame_ps, layout.start_ps)
        stamp, chan = stamp[first], chan[first]
    ref = RoundReference(a_basis, symbol, intensity, b_basis)
    return ref, TimeTags(chan, stamp)


def run_protocol(cfg: ProtocolConfig, log: bool = False) -> MCResult:
    """Simulate ``cfg.rounds`` rounds and tally sifted gains and QBERs.

    With ``log=True`` the result also carries the time-tag stream, the round
    reference and the per-round outcomes.
    """
    layout = frame_layout(cfg)
    counts = TallyCounts.zeros(cfg.d, cfg.decoys.mu)
    refs, tags = [], []
    n_chunks = -(-cfg.rounds // cfg.chunk_rounds)
    for i in range(n_chunks):
        start = i * cfg.chunk_rounds
        n = min(cfg.chunk_rounds, cfg.rounds - start)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(i,)))
        ref, ev = _simulate_chunk(cfg, layout, start, n, rng)
        local = replace(layout, start_ps=layout.start_ps + start * layout.frame_ps)
        counts = counts.merge(classify_and_tally(ev, ref, local, cfg.decoys.mu))
        if log:
            refs.append(ref)
            tags.append(ev)
    if not log:
        return MCResult(counts, layout)
    reference = RoundReference.concat(refs)
    events = TimeTags(np.concatenate([e.channel for e in tags]), np.concatenate([e.timestamp for e in tags]))
    outcome, stamp = decode_rounds(events, cfg.rounds, layout)
    return MCResult(counts, layout, reference, events, outcome, stamp)


def _accepted_fraction(pdfs, sigma: float, classify) -> tuple[float, np.ndarray]:
    """Mean accepted probability and the row-normalised confusion matrix."""
    d = len(pdfs)
    mat = np.zeros((d, d))
    acc = np.zeros(d)
    for n, q in enumerate(pdfs):
        qj = apply_jitter(q, sigma)
        sym = classify(qj.t)
        m = np.bincount(sym[sym >= 0], weights=qj.density[sym >= 0], minlength=d) * qj.dt
        acc[n] = m.sum()
        mat[n] = m / acc[n]
    return float(acc.mean()), mat


def effective_channel(cfg: ProtocolConfig) -> ChannelModel:
    """Channel model whose closed-form gains and QBERs the simulator should reproduce.

    Efficiencies are scaled by the accepted fraction of each arm, dark-count
    probabilities by the share of the frame in which a click can be decoded,
    and error rates are those of the decoding rule (with key-basis leakage).
    The channel loss is folded into the efficiencies.
    """
    layout = frame_layout(cfg)
    p, c = cfg.pulses, cfg.channel
    d = p.d
    acc_z, conf_z = _accepted_fraction(
        state_pdfs(p, GddSpec(0.0), "Z"), cfg.sigma_jitter, lambda t: kernels.classify_z(t, d, p.separation)
    )
    off_diag = (conf_z.sum(axis=0)[None, :] - conf_z) / (d - 1)
    conf_z = (1 - c.err_z) * conf_z + c.err_z * off_diag
    acc_x, conf_x = _accepted_fraction(state_pdfs(p, cfg.gdd, "X"), cfg.sigma_jitter, layout.windows.classify)
    frame = layout.frame_ps
    cover_z = min(d * p.separation, frame) / frame
    lo, hi = layout.windows.acceptance
    cover_x = (min(hi, frame - layout.origin_ps) - max(lo, -layout.origin_ps)) / frame
    return ChannelModel(
        d=d, channel_loss_db=0.0,
        eta_x=c.efficiency("X") * acc_x, eta_z=c.efficiency("Z") * acc_z,
        p_dc_x=c.p_dc_x * cover_x, p_dc_z=c.p_dc_z * cover_z,
        err_x=float(1 - np.mean(np.diag(conf_x))), err_z=float(1 - np.mean(np.diag(conf_z))),
    )


# -- short-pulse attack -----------------------------------------------------------


@dataclass(frozen=True)
class AttackResult:
    attack_width: float
    p_accept_z: float
    p_accept_x: float
    baseline_z: float
    baseline_x: float

    @property
    def ratio_z(self) -> float:
        return self.p_accept_z / self.baseline_z

    @property
    def ratio_x(self) -> float:
        return self.p_accept_x / self.baseline_x


def _acceptance(p: PulseParams, g_x: GddSpec, windows: DecisionWindows, sigma: float, dt: float) -> tuple[float, float]:
    """Mean probability that a time-bin pulse is accepted by each arm.

    Key arm: the pulse lands in its own bin. Control arm: it lands inside
    the acceptance span.
    """
    lo, hi = windows.acceptance
    tau = p.separation
    z = x = 0.0
    pz = state_pdfs(p, GddSpec(0.0), "Z", dt)
    px = state_pdfs(p, g_x, "Z", dt)
    for m in range(p.d):
        qz = apply_jitter(pz[m], sigma)
        z += qz.mass_between((m - 0.5) * tau, (m + 0.5) * tau)
        x += apply_jitter(px[m], sigma).mass_between(lo, hi)
    return z / p.d, x / p.d


def short_pulse_attack(cfg: ProtocolConfig, attack_width: float, ablate_dispersion: bool = False) -> AttackResult:
    """Acceptance of an intercept-resend attacker who sends pulses ``attack_width`` ps wide.

    Bob keeps the decision windows calibrated for the nominal pulses. With
    ``ablate_dispersion`` the control arm has no GDD (acceptance span
    unchanged), which removes the mechanism the check relies on.
    """
    p = cfg.pulses
    if not 0 < attack_width <= p.pulse_width:
        raise ValueError(f"attack width must lie in (0, {p.pulse_width}] ps")
    windows = frame_layout(cfg).windows
    g_x = GddSpec(0.0) if ablate_dispersion else cfg.gdd
    dt = min(0.5, attack_width / 20.0)
    attack = replace(p, pulse_width=float(attack_width))
    z0, x0 = _acceptance(p, g_x, windows, cfg.sigma_jitter, 0.5)
    z1, x1 = _acceptance(attack, g_x, windows, cfg.sigma_jitter, dt)
    return AttackResult(float(attack_width), z1, x1, z0, x0)
