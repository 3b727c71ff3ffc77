"""Shared test utilities."""
from __future__ import annotations

import numpy as np

from talbotqkd.keyrate import ChannelModel, DecoySettings

# gains are evaluated as 1 - (1 - p) exp(-x), so they carry an absolute
# rounding error of a few machine epsilons; bounds that are exact in real
# arithmetic (mu3 = 0 gives Y0 exactly) can miss by that much
ROUNDING = 1e-14

# pass/fail lines of the acceptance suite, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def random_channel(rng: np.random.Generator) -> tuple[ChannelModel, DecoySettings]:
    """A random but physically consistent channel and decoy setting."""
    d = int(rng.choice([2, 4, 8, 16, 32]))
    top = 1.0 - 1.0 / d
    c = ChannelModel(
        d=d,
        channel_loss_db=rng.uniform(0.0, 30.0),
        eta_x=rng.uniform(0.3, 1.0),
        eta_z=rng.uniform(0.3, 1.0),
        p_dc_x=10 ** rng.uniform(-8, -4),
        p_dc_z=10 ** rng.uniform(-8, -4),
        err_x=rng.uniform(0.0, top),
        err_z=rng.uniform(0.0, min(0.1, top)),
    )
    mu1 = rng.uniform(0.1, 1.0)
    mu2 = 10 ** rng.uniform(-6, np.log10(0.4 * mu1))
    mu3 = 0.0 if rng.random() < 0.2 else mu2 * rng.uniform(0.0, 0.9)
    return c, DecoySettings((mu1, mu2, mu3))


def make_protocol(d: int = 2, channel: ChannelModel | None = None, decoys: DecoySettings | None = None,
                  **kwargs):
    """Protocol config with Talbot-matched pulses at the reference dispersion."""
    from talbotqkd import defaults as D
    from talbotqkd.montecarlo import ProtocolConfig
    from talbotqkd.talbot import GddSpec, matched_pulse_params

    g = GddSpec(D.BETA2_PS2)
    channel = D.lab_channel(d, 0.0) if channel is None else channel
    decoys = DecoySettings((0.65, 0.1, 0.01)) if decoys is None else decoys
    return ProtocolConfig(channel, decoys, matched_pulse_params(d, g), g, **kwargs)


def mc_vs_model(result, cfg, n_sigma: float = 3.0) -> list[str]:
    """Cells where the simulated gain or QBER misses the closed-form model by more than ``n_sigma``.

    Binomial standard deviations use the model probability. QBERs are only
    compared where the run saw detections.
    """
    from talbotqkd.keyrate import model_tallies
    from talbotqkd.montecarlo import effective_channel

    model = model_tallies(effective_channel(cfg), cfg.decoys)
    c = result.counts
    bad = []
    for row, basis in ((0, "Z"), (1, "X")):
        for j in range(3):
            n, k, e = int(c.sent[row, j]), int(c.detected[row, j]), int(c.errors[row, j])
            g, q = model.gain(basis)[j], model.qber(basis)[j]
            sg = np.sqrt(g * (1 - g) / n)
            if abs(k / n - g) > n_sigma * sg:
                bad.append(f"gain {basis}{j}: {k / n:.6g} vs {g:.6g} (sigma {sg:.3g})")
            if k:
                sq = np.sqrt(q * (1 - q) / k)
                if abs(e / k - q) > n_sigma * sq:
                    bad.append(f"qber {basis}{j}: {e / k:.6g} vs {q:.6g} (sigma {sq:.3g})")
    return bad
