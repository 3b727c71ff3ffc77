from __future__ import annotations

import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ROUNDING, random_channel
from talbotqkd import defaults as D
from talbotqkd.keyrate import (
    ChannelModel,
    DecoyBounds,
    DecoySettings,
    DecoyTallies,
    IllConditionedError,
    InfeasibleTalliesError,
    binary_entropy,
    decoy_bounds_analytic,
    decoy_bounds_lp,
    golden_section_max,
    keyrate_vs_loss,
    model_gain_qber,
    model_key_rate,
    model_tallies,
    optimize_mu1,
    read_tallies_csv,
    skr_bb84,
    true_yields,
    u_func,
    write_tallies_csv,
    z_error_from_extinction,
)


def _noiseless(d: int = 2) -> ChannelModel:
    return ChannelModel(d=d, eta_x=1.0, eta_z=1.0, p_dc_x=0.0, p_dc_z=0.0, err_x=0.0, err_z=0.0)


# -- entropy helpers -------------------------------------------------------------


def test_binary_entropy_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
    assert binary_entropy(0.25) == pytest.approx(0.811278, abs=1e-6)
    with pytest.raises(ValueError):
        binary_entropy(1.5)


@given(st.floats(0.0, 1.0))
def test_binary_entropy_symmetric(x):
    assert abs(binary_entropy(x) - binary_entropy(1 - x)) < 1e-12


def test_u_func_values():
    assert u_func(0.5, 2) == 1.0
    assert u_func(0.0, 8) == 0.0
    assert u_func(1e-15, 8) < 1e-12
    assert u_func(0.25, 4) == pytest.approx(1.207519, abs=1e-6)
    assert u_func(0.25, 4) == pytest.approx(0.811278 + 0.25 * math.log2(3), abs=1e-6)
    for bad in [(-0.1, 2), (1.0, 2), (0.2, 1)]:
        with pytest.raises(ValueError):
            u_func(*bad)


@pytest.mark.parametrize("d", range(2, 33))
def test_u_func_continuous_at_saturation(d):
    edge = 1 - 1 / d
    assert abs(u_func(edge - 1e-13, d) - math.log2(d)) < 1e-9
    assert u_func(edge, d) == math.log2(d)


@given(st.floats(0.0, 0.999), st.integers(2, 32))
def test_u_func_bounded_by_log_d(x, d):
    assert u_func(x, d) <= math.log2(d) + 1e-12


def test_z_error_from_extinction():
    assert z_error_from_extinction(0.0) == 0.5
    assert z_error_from_extinction(20.0) == pytest.approx(0.00990, abs=1e-5)
    assert z_error_from_extinction(30.0) == pytest.approx(9.99e-4, abs=1e-6)
    with pytest.raises(ValueError):
        z_error_from_extinction(-1.0)


# -- validation -----------------------------------------------------------------------


def test_settings_and_channel_validation():
    with pytest.raises(ValueError):
        DecoySettings((0.1, 0.2, 0.0))
    with pytest.raises(ValueError):
        DecoySettings((0.5, 0.1, 0.0), p_mu=(0.5, 0.6, 0.0))
    with pytest.raises(ValueError):
        ChannelModel(d=2, eta_x=0.0)
    with pytest.raises(ValueError):
        ChannelModel(d=2, err_x=0.6)
    with pytest.raises(ValueError):
        ChannelModel(d=2, p_dc_z=1.0)
    with pytest.raises(ValueError):
        DecoyBounds(0.0, 1.5, 0.0)


def test_balance_attenuation_scales_key_basis_efficiency():
    c = ChannelModel(d=2, balance_attenuation_db=3.0)
    assert c.efficiency("Z") == pytest.approx(c.eta_z * 10 ** -0.3)
    assert c.efficiency("X") == c.eta_x


# -- channel model ------------------------------------------------------------------------


def test_model_gain_lab_example():
    c = D.lab_channel(2, 0.2197)
    s = D.lab_decoys(2)
    g, q = model_gain_qber(c, s, "X", 0)
    eta_mu = 0.65 * 0.84
    gain = 1 - (1 - 3.36e-7) * math.exp(-eta_mu)
    assert g == pytest.approx(gain, rel=1e-14)
    assert g == pytest.approx(0.4207, abs=1e-4)
    err = 0.2197 * (1 - math.exp(-eta_mu)) + 0.5 * 3.36e-7 * math.exp(-eta_mu)
    assert q == pytest.approx(err / gain, rel=1e-12)
    assert q == pytest.approx(0.2197, abs=1e-4)


def test_vacuum_intensity_gives_dark_counts_only():
    c = ChannelModel(d=4, p_dc_x=1e-5)
    g, q = model_gain_qber(c, DecoySettings((0.5, 0.1, 0.0)), "X", 2)
    assert g == pytest.approx(1e-5, rel=1e-9)
    assert q == pytest.approx(0.75, rel=1e-9)


def test_infinite_loss_gives_zero_gain():
    c = ChannelModel(d=2, channel_loss_db=400.0, p_dc_x=0.0, p_dc_z=0.0)
    assert model_gain_qber(c, D.lab_decoys(2), "Z", 0) == (0.0, 0.0)


def test_true_yields_closed_form():
    c = ChannelModel(d=4, channel_loss_db=3.0, p_dc_z=1e-6, err_z=0.01)
    y, e = true_yields(c, "Z", 2)
    eta = c.efficiency("Z")
    assert y[0] == pytest.approx(1e-6)
    assert y[1] == pytest.approx(1 - (1 - 1e-6) * (1 - eta), rel=1e-12)
    assert y[2] == pytest.approx(1 - (1 - 1e-6) * (1 - eta) ** 2, rel=1e-12)
    assert e[0] == pytest.approx(0.75)


# -- decoy bounds ------------------------------------------------------------------------------


def test_noiseless_fixture_bounds():
    s = DecoySettings((0.5, 0.1, 0.0))
    t = model_tallies(_noiseless(), s)
    b = decoy_bounds_analytic(t, s)
    lp = decoy_bounds_lp(t, s)
    assert b.y0_lower == 0.0
    assert 0.9 <= b.y1_lower <= 1.0
    assert b.ex1_upper < 1e-9
    assert lp.y1_lower >= b.y1_lower - 1e-6
    assert lp.ex1_upper < 1e-6


def test_equal_decoys_are_ill_conditioned():
    t = DecoyTallies(2, (0.5, 0.1, 0.05), (0.3, 0.1, 0.05), (0.1,) * 3, (0.3, 0.1, 0.05), (0.1,) * 3)
    s = DecoySettings((0.5, 0.1, 0.05))
    with pytest.raises(ValueError):
        replace(s, mu=(0.5, 0.1, 0.1))
    # settings built elsewhere without validation still hit the guard
    bad = replace(s)
    object.__setattr__(bad, "mu", (0.5, 0.1, 0.1))
    with pytest.raises(IllConditionedError):
        decoy_bounds_analytic(t, bad)
    with pytest.raises(IllConditionedError):
        decoy_bounds_lp(t, bad)


def test_lab_bounds_are_sound():
    c = D.lab_channel(2, 0.2197)
    s = D.lab_decoys(2)
    b = decoy_bounds_analytic(model_tallies(c, s), s)
    y, _ = true_yields(c, "Z")
    _, ex = true_yields(c, "X")
    assert b.y1_lower <= y[1]
    assert b.y0_lower <= y[0] + ROUNDING
    assert b.ex1_upper >= ex[1]
    assert b.y1_lower > 0.95 * y[1]


def test_lp_detects_inconsistent_tallies():
    s = DecoySettings((0.5, 0.1, 0.0))
    good = model_tallies(_noiseless(), s)
    t = replace(good, gain_z=(0.05, 0.4, 0.0))
    with pytest.raises(InfeasibleTalliesError):
        decoy_bounds_lp(t, s)


def test_lp_truncation_converges():
    c = D.lab_channel(4, 0.3456, channel_loss_db=5.0)
    s = DecoySettings((0.8, 0.1, 0.01))
    t = model_tallies(c, s)
    a, b = decoy_bounds_lp(t, s, n_cut=20), decoy_bounds_lp(t, s, n_cut=10)
    assert abs(a.y0_lower - b.y0_lower) < 1e-6
    assert abs(a.y1_lower - b.y1_lower) < 1e-6
    assert abs(a.ex1_upper - b.ex1_upper) < 1e-6
    with pytest.raises(ValueError):
        decoy_bounds_lp(t, s, n_cut=4)


def test_analytic_never_tighter_than_lp_on_50_draws():
    rng = np.random.default_rng(50)
    for _ in range(50):
        c, s = random_channel(rng)
        t = model_tallies(c, s)
        assert decoy_bounds_analytic(t, s).y1_lower <= decoy_bounds_lp(t, s).y1_lower + 1e-6


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_bounds_sound_on_random_channels(seed):
    c, s = random_channel(np.random.default_rng(seed))
    b = decoy_bounds_analytic(model_tallies(c, s), s)
    y, _ = true_yields(c, "Z")
    _, ex = true_yields(c, "X")
    assert b.y0_lower <= y[0] + ROUNDING
    assert b.y1_lower <= y[1] + ROUNDING
    assert b.ex1_upper >= ex[1] - ROUNDING


# -- key rate --------------------------------------------------------------------------------------


def test_skr_single_photon_example():
    s = DecoySettings((0.5, 0.1, 0.0))
    t = DecoyTallies(2, s.mu, (0.0,) * 3, (0.0,) * 3, (0.0,) * 3, (0.0,) * 3)
    r = skr_bb84(DecoyBounds(0.0, 1.0, 0.0), t, s, 2)
    assert r == pytest.approx(0.5 * math.exp(-0.5), rel=1e-12)
    assert r == pytest.approx(0.3033, abs=1e-4)


def test_saturated_phase_error_leaves_only_the_penalty():
    s = DecoySettings((0.5, 0.1, 0.0))
    t = DecoyTallies(4, s.mu, (0.3,) * 3, (0.1,) * 3, (0.3, 0.1, 0.0), (0.05,) * 3)
    r = skr_bb84(DecoyBounds(0.0, 0.9, 0.75), t, s, 4)
    assert r == pytest.approx(-0.3 * u_func(0.05, 4), rel=1e-12)
    assert r < 0


def test_general_mode_weights_every_intensity():
    s = DecoySettings((0.5, 0.1, 0.0), p_mu=(0.5, 0.25, 0.25), p_z=0.8)
    t = DecoyTallies(2, s.mu, (0.0,) * 3, (0.0,) * 3, (0.0,) * 3, (0.0,) * 3)
    r = skr_bb84(DecoyBounds(0.0, 1.0, 0.0), t, s, 2)
    want = 0.64 * (0.5 * 0.5 * math.exp(-0.5) + 0.25 * 0.1 * math.exp(-0.1))
    assert r == pytest.approx(want, rel=1e-12)


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.floats(0.0, 0.45), st.floats(0.0, 0.45))
def test_skr_monotone_in_errors(e_a, e_b, q_a, q_b):
    s = DecoySettings((0.5, 0.1, 0.0))

    def rate(e1, q):
        t = DecoyTallies(2, s.mu, (0.3,) * 3, (0.1,) * 3, (0.3, 0.08, 1e-6), (q,) * 3)
        return skr_bb84(DecoyBounds(1e-6, 0.8, e1), t, s, 2)

    lo_e, hi_e = sorted((e_a, e_b))
    lo_q, hi_q = sorted((q_a, q_b))
    assert rate(hi_e, 0.01) <= rate(lo_e, 0.01) + 1e-15
    assert rate(0.1, hi_q) <= rate(0.1, lo_q) + 1e-15


def test_ququart_beats_qubit_at_equal_loss():
    for loss in (0.0, 5.0, 10.0, 15.0):
        r2 = model_key_rate(D.lab_channel(2, D.ERROR_X[2], loss), D.lab_decoys(2))
        r4 = model_key_rate(D.lab_channel(4, D.ERROR_X[4], loss), D.lab_decoys(4))
        assert r4 > r2


def test_negative_rates_are_not_clamped():
    rows = keyrate_vs_loss(D.lab_channel(2, D.ERROR_X[2]), D.lab_decoys(2), [0.0, 80.0])
    assert rows[0][1] > 0
    assert rows[1][1] < 0


def test_lp_and_analytic_key_rates_agree_closely():
    c, s = D.lab_channel(4, D.ERROR_X[4], 10.0), D.lab_decoys(4)
    a = model_key_rate(c, s)
    b = model_key_rate(c, s, bounds=decoy_bounds_lp)
    assert abs(a - b) < 1e-3 * abs(a)


# -- optimisation ------------------------------------------------------------------------------------


def test_golden_section_on_parabola():
    x, fx = golden_section_max(lambda m: -(m - 0.3) ** 2, 0.0, 1.0, tol=1e-6)
    assert x == pytest.approx(0.3, abs=1e-6)
    assert fx == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        golden_section_max(lambda m: m, 1.0, 1.0)


@pytest.mark.parametrize("loss", [10.0, 20.0])
@pytest.mark.parametrize("d, mu1", [(2, 0.65), (4, 0.77)])
def test_optimal_signal_intensity_matches_reference(d, mu1, loss):
    c = D.lab_channel(d, D.ERROR_X[d], loss)
    m, r = optimize_mu1(c, D.lab_decoys(d))
    assert m == pytest.approx(mu1, abs=0.05)
    assert r == pytest.approx(model_key_rate(c, D.lab_decoys(d, m)), rel=1e-12)
    # the optimum beats the neighbourhood
    assert r >= model_key_rate(c, D.lab_decoys(d, m + 0.02))
    assert r >= model_key_rate(c, D.lab_decoys(d, m - 0.02))


def test_optimum_positive_for_noiseless_link():
    _, r = optimize_mu1(_noiseless(), DecoySettings((0.5, 2e-6, 1e-6)))
    assert r > 0


def test_optimize_rejects_bad_ranges():
    c, s = D.lab_channel(2, 0.2197), D.lab_decoys(2)
    with pytest.raises(ValueError):
        optimize_mu1(c, s, search=(0.5, 0.5))
    with pytest.raises(ValueError):
        optimize_mu1(c, s, search=(1e-7, 1.0))
    with pytest.raises(ValueError):
        optimize_mu1(c, s, search=(0.1, 2.5))


# -- csv -----------------------------------------------------------------------------------------------


def test_tallies_csv_round_trip(tmp_path):
    t = model_tallies(D.lab_channel(4, 0.3456, 7.0), D.lab_decoys(4))
    text = write_tallies_csv(t)
    assert text.splitlines()[0] == "basis,mu,gain,qber,d"
    assert read_tallies_csv(io.StringIO(text)) == t
    write_tallies_csv(t, tmp_path / "t.csv")
    assert read_tallies_csv(tmp_path / "t.csv") == t


def test_tallies_csv_rejects_short_files():
    with pytest.raises(ValueError):
        read_tallies_csv(io.StringIO("basis,mu,gain,qber,d\nX,0.5,0.1,0.1,2\n"))
