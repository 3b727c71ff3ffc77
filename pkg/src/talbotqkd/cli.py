"""Command-line entry point: ``talbotqkd <subcommand> [options]``.

Every subcommand writes its table to ``--out-dir`` (CSV or JSON), echoes it
to stdout and leaves a ``<command>.manifest.json`` recording the config hash,
seed and library versions. Failures print a JSON object to stderr and exit
with status 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import ConfigError, RunConfig, load_config, parse_override

__all__ = ["main", "build_parser"]


# -- output helpers ------------------------------------------------------------------


def _render(columns, rows, fmt: str) -> str:
    if fmt == "json":
        return json.dumps([dict(zip(columns, r)) for r in rows], indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _versions() -> dict:
    out = {"talbotqkd": __version__, "python": platform.python_version(), "kernel_backend": kernels.BACKEND}
    for dist in ("numpy", "scipy", "numba"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


class _Run:
    """Collects outputs of one invocation and writes the manifest."""

    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def table(self, stem: str, columns, rows, echo: bool = True) -> None:
        text = _render(columns, rows, self.args.format)
        self.path(f"{stem}.{self.args.format}").write_text(text)
        if echo:
            sys.stdout.write(text)

    def manifest(self, extra: dict | None = None) -> None:
        m = {
            "command": self.args.command,
            "argv": sys.argv[1:] if self.args.argv is None else self.args.argv,
            "config_hash": self.cfg.hash,
            "config": self.cfg.doc,
            "seed": self.cfg.seed,
            "versions": _versions(),
            "outputs": self.files,
        }
        if extra:
            m.update(extra)
        (self.out / f"{self.args.command}.manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True))


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _loss_range(text: str) -> list[float]:
    parts = [float(x) for x in text.split(":")]
    if len(parts) != 3 or parts[2] <= 0:
        raise ConfigError("--loss-range must be start:stop:step with a positive step")
    start, stop, step = parts
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(max(n, 0))]


# -- subcommands ---------------------------------------------------------------------


def cmd_talbot_sweep(run: _Run) -> None:
    from .talbot import error_rate_sweep

    cfg, a = run.cfg, run.args
    dims = _ints(a.dims) if a.dims else [int(x) for x in cfg.section("sweep")["dims"]]
    jitters = _floats(a.jitters) if a.jitters else [float(x) for x in cfg.section("sweep")["jitters_ps"]]
    p = cfg.pulses(2)
    rows = error_rate_sweep(dims, jitters, cfg.gdd(), pulse_width=p.pulse_width, shape=p.shape,
                            edge_fraction=p.edge_fraction)
    run.table("talbot_sweep", ["d", "sigma_ps", "error_rate"], rows)


def _fixture_rates(which: str) -> list[tuple]:
    from .ingest import load_fixtures
    from . import defaults as D
    from .keyrate import DecoySettings, decoy_bounds_analytic, model_tallies, skr_bb84

    names = {"lab": ("S1", "S3"), "field": ("S2", "S4")}[which]
    rows = []
    for r in load_fixtures(*names):
        for d in (2, 4):
            if r.mu.get(d) is None or r.qber_x.get(d) is None:
                continue
            c = D.lab_channel(d, r.qber_x[d], r.attenuation_db, err_z=r.qber_z[d])
            s = DecoySettings(r.mu[d])
            t = model_tallies(c, s)
            rows.append((r.attenuation_db, d, skr_bb84(decoy_bounds_analytic(t, s), t, s, d)))
    return rows


def cmd_keyrate_sweep(run: _Run) -> None:
    from .keyrate import model_key_rate

    cfg, a = run.cfg, run.args
    if a.fixtures:
        run.table("keyrate_fixtures", ["loss_db", "d", "keyrate"], _fixture_rates(a.fixtures))
        return
    sw = cfg.section("sweep")
    dims = _ints(a.dims) if a.dims else [int(x) for x in sw["dims"]]
    losses = _loss_range(a.loss_range) if a.loss_range else _loss_range(
        f"{sw['loss_start_db']}:{sw['loss_stop_db']}:{sw['loss_step_db']}")
    rows = []
    for d in dims:
        base = cfg.channel(d)
        s = cfg.decoys(d)
        for loss in losses:
            c = dataclasses.replace(base, channel_loss_db=loss)
            rows.append((loss, d, model_key_rate(c, s)))
    run.table("keyrate_sweep", ["loss_db", "d", "keyrate"], rows)


def cmd_optimize_mu(run: _Run) -> None:
    from .keyrate import optimize_mu1

    cfg, a = run.cfg, run.args
    dims = _ints(a.dims) if a.dims else [int(cfg.section("channel")["d"])]
    lo, hi = _floats(a.search)
    rows = []
    for d in dims:
        mu1, r = optimize_mu1(cfg.channel(d), cfg.decoys(d), (lo, hi))
        rows.append((d, float(cfg.section("channel")["loss_db"]), mu1, r))
    run.table("optimize_mu", ["d", "loss_db", "mu1", "keyrate"], rows)


def _tally_rows(tallies):
    return [(b, tallies.mu[j], tallies.gain(b)[j], tallies.qber(b)[j]) for b in ("X", "Z") for j in range(3)]


def _asymptotic_rate(tallies, d: int) -> float:
    from .keyrate import DecoySettings, decoy_bounds_analytic, skr_bb84

    s = DecoySettings(tallies.mu)
    return skr_bb84(decoy_bounds_analytic(tallies, s), tallies, s, d)


def cmd_mc_run(run: _Run) -> dict:
    from .ingest import write_timetags
    from .montecarlo import run_protocol

    cfg, a = run.cfg, run.args
    pc = cfg.protocol(a.rounds)
    res = run_protocol(pc, log=a.export_log)
    t = res.tallies
    run.table("tallies", ["basis", "mu", "gain", "qber"], _tally_rows(t))
    run.path("run_config.json").write_text(json.dumps(cfg.doc, indent=2, sort_keys=True))
    extra = {"keyrate": _asymptotic_rate(t, pc.d), "rounds": pc.rounds}
    if a.export_log:
        write_timetags(res.events, run.path("timetags.bin"), "binary")
        res.reference.write_csv(run.path("reference.csv"))
    sys.stdout.write(json.dumps({"keyrate": extra["keyrate"]}) + "\n")
    return extra


def cmd_analyze(run: _Run) -> dict:
    from .ingest import RoundReference, classify_and_tally, read_timetags
    from .montecarlo import frame_layout

    cfg, a = run.cfg, run.args
    pc = cfg.protocol()
    tags = read_timetags(a.timetags)
    ref = RoundReference.read_csv(a.reference)
    layout = frame_layout(pc)
    calib = a.calibration_rounds if a.calibration_rounds is not None else int(
        cfg.section("montecarlo")["calibration_rounds"])
    counts = classify_and_tally(tags, ref, layout, pc.decoys.mu, calibration_rounds=calib,
                                pulse_width_ps=pc.pulses.pulse_width, sigma_ps=pc.sigma_jitter)
    t = counts.tallies
    run.table("tallies", ["basis", "mu", "gain", "qber"], _tally_rows(t))
    rate = _asymptotic_rate(t, pc.d)
    sys.stdout.write(json.dumps({"keyrate": rate}) + "\n")
    return {"keyrate": rate, "rounds": len(ref)}


def cmd_tbs_check(run: _Run) -> None:
    from .tbs import balance_attenuation_db, check_constraints, eta2_recommended

    cfg = run.cfg
    t = cfg.section("tbs")
    tc = cfg.tbs()
    report = check_constraints(tc).as_dict()
    att, imbalance = balance_attenuation_db(float(t["x_path_db"]), float(t["z_path_db"]))
    report["eta2_recommended"] = eta2_recommended(tc.eta_down, tc.eta_up)
    report["balance_attenuation_db"] = att
    report["path_imbalance_db"] = imbalance
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    run.path("tbs_check.json").write_text(text)
    sys.stdout.write(text)


def cmd_attack_demo(run: _Run) -> None:
    from .montecarlo import short_pulse_attack

    cfg, a = run.cfg, run.args
    widths = _floats(a.widths) if a.widths else [float(x) for x in cfg.section("attack")["widths_ps"]]
    pc = cfg.protocol(1)
    rows = []
    for w in widths:
        r = short_pulse_attack(pc, w)
        ab = short_pulse_attack(pc, w, ablate_dispersion=True)
        rows.append((w, r.p_accept_z, r.p_accept_x, r.baseline_z, r.baseline_x, ab.p_accept_x / ab.baseline_x))
    run.table("attack_demo", ["attack_width_ps", "p_accept_z", "p_accept_x", "baseline_z", "baseline_x",
                              "ratio_x_without_gdd"], rows)


COMMANDS = {
    "talbot-sweep": cmd_talbot_sweep,
    "keyrate-sweep": cmd_keyrate_sweep,
    "optimize-mu": cmd_optimize_mu,
    "mc-run": cmd_mc_run,
    "analyze": cmd_analyze,
    "tbs-check": cmd_tbs_check,
    "attack-demo": cmd_attack_demo,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML (or JSON) run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out-dir", default=".", help="directory for outputs and the manifest")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    ap = argparse.ArgumentParser(prog="talbotqkd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"talbotqkd {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("talbot-sweep", parents=[common], help="control-basis error rate vs jitter and dimension")
    p.add_argument("--dims", help="comma-separated dimensions")
    p.add_argument("--jitters", help="comma-separated RMS jitters in ps")

    p = sub.add_parser("keyrate-sweep", parents=[common], help="key rate vs channel loss")
    p.add_argument("--dims")
    p.add_argument("--loss-range", help="start:stop:step in dB")
    p.add_argument("--fixtures", choices=("lab", "field"), help="evaluate the bundled measurement tables instead")

    p = sub.add_parser("optimize-mu", parents=[common], help="signal intensity maximising the key rate")
    p.add_argument("--dims")
    p.add_argument("--search", default="0.01,1.5", help="lo,hi of the search range")

    p = sub.add_parser("mc-run", parents=[common], help="Monte Carlo protocol run")
    p.add_argument("--rounds", type=int)
    p.add_argument("--export-log", action="store_true", help="also write timetags.bin and reference.csv")

    p = sub.add_parser("analyze", parents=[common], help="tally a time-tag log against its round reference")
    p.add_argument("--timetags", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--calibration-rounds", type=int)

    sub.add_parser("tbs-check", parents=[common], help="tunable beam splitter feasibility report")

    p = sub.add_parser("attack-demo", parents=[common], help="short-pulse attack acceptance table")
    p.add_argument("--widths", help="comma-separated attack pulse widths in ps")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = None if argv is None else list(argv)
    try:
        overrides = [parse_override(s) for s in args.set]
        if args.seed is not None:
            overrides.append((["seed"], args.seed))
        cfg = load_config(args.config, overrides)
        run = _Run(args, cfg)
        run.manifest(COMMANDS[args.command](run))
    except Exception as exc:  # uniform error contract
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
