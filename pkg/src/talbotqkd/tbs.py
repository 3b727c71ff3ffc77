"""Feasibility checks for a receiver with a tunable beam splitter.

The beam splitter switches between a low transmission ``eta_down``, an
intermediate ``eta_2`` and a high ``eta_up``. The protocol needs

1. ``eta_up > eta_down / (1 - eta_down)``,
2. ``eta_x / eta_z > (1 - sqrt(1 - eta_down / eta_up)) / eta_down``,
3. ``eta_down < eta_2 < eta_up``.

The full key rate of the scheme needs a phase-error bound that is not
implemented here; :func:`key_rate_with_phase_error` accepts one as a plug-in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from .keyrate import DecoyBounds, DecoySettings, DecoyTallies, skr_bb84

__all__ = [
    "TbsConfig",
    "ConstraintResult",
    "TbsReport",
    "eta2_recommended",
    "check_constraints",
    "balance_attenuation_db",
    "key_rate_with_phase_error",
]


def _in_open_unit(name: str, v: float) -> None:
    if not 0 < v < 1:
        raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class TbsConfig:
    """Beam-splitter transmissions and basis detection efficiencies.

    Only the range of each field is validated; whether the ordering and the
    protocol constraints hold is reported by :func:`check_constraints`.
    """

    eta_down: float
    eta_2: float
    eta_up: float
    eta_x: float
    eta_z: float

    def __post_init__(self):
        for name in ("eta_down", "eta_2", "eta_up"):
            _in_open_unit(name, getattr(self, name))
        for name in ("eta_x", "eta_z"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    @classmethod
    def from_path_losses(cls, eta_down: float, eta_2: float, eta_up: float,
                         x_path_db: float, z_path_db: float) -> "TbsConfig":
        """Efficiencies from the insertion losses of the two measurement arms."""
        return cls(eta_down, eta_2, eta_up, 10.0 ** (-x_path_db / 10.0), 10.0 ** (-z_path_db / 10.0))


@dataclass(frozen=True)
class ConstraintResult:
    name: str
    passed: bool
    margin: float
    lhs: float
    rhs: float


@dataclass(frozen=True)
class TbsReport:
    c1: ConstraintResult
    c2: ConstraintResult
    c3: ConstraintResult

    @property
    def all_passed(self) -> bool:
        return self.c1.passed and self.c2.passed and self.c3.passed

    def as_dict(self) -> dict:
        out = {"all_passed": self.all_passed}
        for r in (self.c1, self.c2, self.c3):
            out[r.name] = {"passed": r.passed, "margin": r.margin, "lhs": r.lhs, "rhs": r.rhs}
        return out


def eta2_recommended(eta_down: float, eta_up: float) -> float:
    """Near-optimal intermediate transmission ``(sqrt(eta_down) + sqrt(eta_up))**2 / 4``."""
    _in_open_unit("eta_down", eta_down)
    _in_open_unit("eta_up", eta_up)
    if eta_down > eta_up:
        raise ValueError(f"need eta_down <= eta_up, got {eta_down} > {eta_up}")
    return 0.25 * (math.sqrt(eta_down) + math.sqrt(eta_up)) ** 2


def check_constraints(c: TbsConfig) -> TbsReport:
    """Evaluate the three constraints; margins are ``lhs - rhs`` in linear units.

    For the ordering constraint the margin is the distance of ``eta_2`` to
    the nearer end of ``(eta_down, eta_up)``.
    """
    rhs1 = c.eta_down / (1.0 - c.eta_down)
    m1 = c.eta_up - rhs1
    ratio = c.eta_x / c.eta_z
    inner = 1.0 - c.eta_down / c.eta_up
    # for eta_down > eta_up the threshold is undefined; report it as unreachable
    rhs2 = (1.0 - math.sqrt(inner)) / c.eta_down if inner >= 0 else math.inf
    m2 = ratio - rhs2
    m3 = min(c.eta_2 - c.eta_down, c.eta_up - c.eta_2)
    near = c.eta_down if c.eta_2 - c.eta_down <= c.eta_up - c.eta_2 else c.eta_up
    return TbsReport(
        ConstraintResult("c1", m1 > 0, m1, c.eta_up, rhs1),
        ConstraintResult("c2", m2 > 0, m2, ratio, rhs2),
        ConstraintResult("c3", m3 > 0, m3, c.eta_2, near),
    )


def balance_attenuation_db(eta_x_path_db: float, eta_z_path_db: float) -> tuple[float, float]:
    """Attenuation to add to the key-basis arm and the imbalance before adding it.

    Returns ``(max(x - z, 0), x - z)``. A negative imbalance means the control
    arm is the lossier one; no attenuation is added to the key arm then.
    """
    diff = float(eta_x_path_db) - float(eta_z_path_db)
    return max(diff, 0.0), diff


PhaseErrorFn = Callable[[DecoyTallies, DecoySettings, TbsConfig], float]


def key_rate_with_phase_error(bounds: DecoyBounds, tallies: DecoyTallies, settings: DecoySettings,
                              config: TbsConfig, phase_error: PhaseErrorFn) -> float:
    """Key rate with the single-photon phase error taken from an external bound.

    ``phase_error`` receives the tallies, decoy settings and beam-splitter
    configuration and must return an upper bound in ``[0, 1]``; it replaces
    ``bounds.ex1_upper``.
    """
    e = float(phase_error(tallies, settings, config))
    if not 0 <= e <= 1:
        raise ValueError(f"phase error bound must lie in [0, 1], got {e}")
    b = DecoyBounds(bounds.y0_lower, bounds.y1_lower, e, bounds.y1_lower_x)
    return skr_bb84(b, tallies, settings, tallies.d)
