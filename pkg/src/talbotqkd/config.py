"""Declarative run configuration (TOML).

Every key carries its unit in the name. Unknown sections or keys are
rejected before anything is computed. A minimal document::

    seed = 7

    [channel]
    d = 4
    loss_db = 10.0

    [decoys]
    mu = [0.77, 2e-6, 1e-6]

Omitted keys fall back to the reference laboratory values in
:mod:`talbotqkd.defaults`. ``pulses.separation_ps`` defaults to the Talbot
separation of ``gdd``; ``decoys.mu`` defaults to the reference signal
intensity for the dimension with the reference decoys; ``channel.err_x``
defaults to the value simulated from the pulse and jitter settings.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import defaults as D
from .keyrate import ChannelModel, DecoySettings
from .montecarlo import ProtocolConfig
from .states import PulseParams
from .talbot import GddSpec, talbot_separation
from .tbs import TbsConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_override", "SCHEMA"]


class ConfigError(ValueError):
    """Invalid configuration document."""


_num = (int, float)
_opt = object()  # marker: key may be absent and has no default

SCHEMA: dict = {
    "seed": (int, 0),
    "pulses": {
        "width_ps": (_num, D.PULSE_WIDTH_PS),
        "separation_ps": (_num, _opt),
        "shape": (str, "rectangular"),
        "edge_fraction": (_num, 0.2),
        "dt_ps": (_num, 0.5),
    },
    "gdd": {
        "beta2_ps2": (_num, D.BETA2_PS2),
        "talbot_s": (int, 1),
        "bandpass_center_nm": (_num, _opt),
        "bandpass_width_nm": (_num, _opt),
    },
    "detector": {
        "jitter_ps": (_num, D.JITTER_PS),
    },
    "channel": {
        "d": (int, 4),
        "loss_db": (_num, 0.0),
        "eta_x": (_num, D.ETA_X),
        "eta_z": (_num, D.ETA_Z),
        "p_dc_x": (_num, D.P_DC_X),
        "p_dc_z": (_num, D.P_DC_Z),
        "err_x": (_num, _opt),
        "err_z": (_num, D.ERROR_Z),
        "balance_attenuation_db": (_num, 0.0),
    },
    "decoys": {
        "mu": (list, _opt),
        "p_mu": (list, [1.0, 0.0, 0.0]),
        "p_z": (_num, 1.0),
    },
    "montecarlo": {
        "rounds": (int, 100_000),
        "p_basis_z": (_num, 0.5),
        "intensity_probs": (list, [1 / 3, 1 / 3, 1 / 3]),
        "frame_ps": (int, _opt),
        "dead_time": (bool, False),
        "chunk_rounds": (int, 1 << 17),
        "calibration_rounds": (int, 0),
    },
    "tbs": {
        "eta_down": (_num, D.TBS_ETA_DOWN),
        "eta_2": (_num, D.TBS_ETA_2),
        "eta_up": (_num, D.TBS_ETA_UP),
        "x_path_db": (_num, D.TBS_X_PATH_DB),
        "z_path_db": (_num, D.TBS_Z_PATH_DB),
    },
    "sweep": {
        "dims": (list, [2, 4, 8, 16, 32]),
        "jitters_ps": (list, [0, 5, 10, 15, 20, 25]),
        "loss_start_db": (_num, 0.0),
        "loss_stop_db": (_num, 40.0),
        "loss_step_db": (_num, 1.0),
    },
    "attack": {
        "widths_ps": (list, [46, 30, 20, 10, 5]),
    },
}


def _type_ok(value, kind) -> bool:
    if kind is _num:
        return isinstance(value, _num) and not isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, kind)


def _validate(doc: dict, schema: dict, path: str = "") -> dict:
    out = {}
    for key in doc:
        if key not in schema:
            raise ConfigError(f"unknown key {path + key!r}")
    for key, spec in schema.items():
        where = path + key
        if isinstance(spec, dict):
            sub = doc.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _validate(sub, spec, where + ".")
            continue
        kind, default = spec
        if key in doc:
            v = doc[key]
            if not _type_ok(v, kind):
                raise ConfigError(f"{where!r} has the wrong type ({type(v).__name__})")
            if kind is list and not all(_type_ok(x, _num) for x in v):
                raise ConfigError(f"{where!r} must be a list of numbers")
            out[key] = v
        elif default is not _opt:
            out[key] = copy.deepcopy(default)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """Split ``section.key=value``; the value is parsed as a TOML value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration document with typed builders."""

    doc: dict

    @classmethod
    def from_dict(cls, doc: dict, overrides=()) -> "RunConfig":
        doc = copy.deepcopy(doc)
        for keys, value in overrides:
            node = doc
            for k in keys[:-1]:
                node = node.setdefault(k, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"override path {'.'.join(keys)!r} crosses a non-table")
            node[keys[-1]] = value
        return cls(_validate(doc, SCHEMA))

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def section(self, name: str) -> dict:
        return self.doc[name]

    # -- builders ----------------------------------------------------------------

    def gdd(self) -> GddSpec:
        g = self.doc["gdd"]
        center, width = g.get("bandpass_center_nm"), g.get("bandpass_width_nm")
        if (center is None) != (width is None):
            raise ConfigError("set both gdd.bandpass_center_nm and gdd.bandpass_width_nm or neither")
        bandpass = None if center is None else (float(center), float(width))
        return GddSpec(float(g["beta2_ps2"]), int(g["talbot_s"]), bandpass)

    def pulses(self, d: int | None = None) -> PulseParams:
        p = self.doc["pulses"]
        g = self.doc["gdd"]
        sep = p.get("separation_ps")
        if sep is None:
            sep = talbot_separation(float(g["beta2_ps2"]), int(g["talbot_s"]))
        return PulseParams(
            d=int(self.doc["channel"]["d"] if d is None else d), pulse_width=float(p["width_ps"]),
            separation=float(sep), shape=p["shape"], edge_fraction=float(p["edge_fraction"]),
        )

    @property
    def jitter_ps(self) -> float:
        return float(self.doc["detector"]["jitter_ps"])

    def channel(self, d: int | None = None, err_x: float | None = None,
                loss_db: float | None = None) -> ChannelModel:
        c = self.doc["channel"]
        d = int(c["d"] if d is None else d)
        if err_x is None:
            err_x = c.get("err_x")
        if err_x is None:
            err_x = self.simulated_err_x(d)
        return ChannelModel(
            d=d, channel_loss_db=float(c["loss_db"] if loss_db is None else loss_db),
            eta_x=float(c["eta_x"]), eta_z=float(c["eta_z"]),
            p_dc_x=float(c["p_dc_x"]), p_dc_z=float(c["p_dc_z"]),
            err_x=float(err_x), err_z=float(c["err_z"]),
            balance_attenuation_db=float(c["balance_attenuation_db"]),
        )

    def simulated_err_x(self, d: int) -> float:
        from .talbot import x_basis_response

        p = self.pulses(d)
        return x_basis_response(p, self.gdd(), self.jitter_ps, dt=float(self.doc["pulses"]["dt_ps"])).error_rate

    def decoys(self, d: int | None = None) -> DecoySettings:
        s = self.doc["decoys"]
        d = int(self.doc["channel"]["d"] if d is None else d)
        mu = s.get("mu")
        if mu is None:
            if d not in D.MU1:
                raise ConfigError(f"no reference signal intensity for d={d}; set decoys.mu")
            mu = [D.MU1[d], D.MU2, D.MU3]
        if len(mu) != 3 or len(s["p_mu"]) != 3:
            raise ConfigError("decoys.mu and decoys.p_mu need three entries")
        return DecoySettings(tuple(float(m) for m in mu), tuple(float(x) for x in s["p_mu"]), float(s["p_z"]))

    def protocol(self, rounds: int | None = None) -> ProtocolConfig:
        m = self.doc["montecarlo"]
        d = int(self.doc["channel"]["d"])
        channel = self.channel(d, err_x=self.doc["channel"].get("err_x", 0.0))
        return ProtocolConfig(
            channel=channel, decoys=self.decoys(d), pulses=self.pulses(d), gdd=self.gdd(),
            sigma_jitter=self.jitter_ps, rounds=int(m["rounds"] if rounds is None else rounds),
            seed=self.seed, p_basis_z=float(m["p_basis_z"]),
            intensity_probs=tuple(float(x) for x in m["intensity_probs"]),
            frame_ps=m.get("frame_ps"), dead_time=bool(m["dead_time"]), chunk_rounds=int(m["chunk_rounds"]),
        )

    def tbs(self) -> TbsConfig:
        t = self.doc["tbs"]
        return TbsConfig.from_path_losses(
            float(t["eta_down"]), float(t["eta_2"]), float(t["eta_up"]), float(t["x_path_db"]), float(t["z_path_db"])
        )


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a TOML (or JSON) document; ``None`` gives the defaults."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        try:
            doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(doc, overrides)
