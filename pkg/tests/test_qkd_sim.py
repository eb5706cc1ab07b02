import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from laserdamage.apd_device import ApdState, DetectorCircuit
from laserdamage.qkd_sim import (
    SIM_RESULT_FIELDS,
    InvariantViolation,
    ProtocolParams,
    SimResult,
    analytic_qber,
    h2,
    key_rate,
    max_distance,
    run_bb84,
)

from helpers import receiver

# Frozen from the bisection oracle: eta 0.5, 500 Hz, 1 ns slots, e 0.01, 0.2 dB/km.
MAX_DISTANCE_KM = 255.375


def qber_tolerance(q, n_sifted):
    return 3 * math.sqrt(q * (1 - q) / n_sifted)


def test_h2_values():
    assert h2(0.5) == 1.0
    assert h2(0.0) == 0.0 and h2(1.0) == 0.0
    from scipy.stats import entropy

    assert h2(0.11) == pytest.approx(entropy([0.11, 0.89], base=2), abs=1e-12)
    assert h2(0.11) == pytest.approx(0.499916, abs=1e-6)
    with pytest.raises(ValueError):
        h2(1.5)


def test_key_rate_values():
    assert key_rate(0.0, 1.0) == 1.0
    assert key_rate(0.25, 1.0) == 0.0
    with pytest.raises(ValueError):
        key_rate(0.6)


def test_key_rate_zero_crossing():
    # independent oracle: root of 1 - 2 h2(q) using scipy's own entropy
    from scipy.stats import entropy

    oracle = brentq(lambda q: 1 - 2 * entropy([q, 1 - q], base=2), 0.01, 0.4, xtol=1e-12)
    assert oracle == pytest.approx(0.1100, abs=5e-4)
    assert key_rate(oracle - 1e-4) > 0.0
    assert key_rate(oracle + 1e-4) == 0.0


@settings(max_examples=200, deadline=None)
@given(q1=st.floats(0, 0.5), q2=st.floats(0, 0.5), f=st.floats(1.0, 2.0))
def test_key_rate_non_increasing(q1, q2, f):
    lo, hi = sorted((q1, q2))
    assert key_rate(lo, f) >= key_rate(hi, f)


def test_analytic_qber_examples():
    assert analytic_qber(0.3, 0.02, 0.0) == pytest.approx(0.02)
    assert analytic_qber(0.0, 0.02, 1e-4) == 0.5
    assert analytic_qber(0.1, 0.01, 1e-5) == pytest.approx(0.010098, abs=1e-6)
    with pytest.raises(ValueError):
        analytic_qber(0.0, 0.01, 0.0)


@settings(max_examples=200, deadline=None)
@given(
    p=st.floats(1e-6, 1.0), dp=st.floats(1e-6, 0.5),
    d=st.floats(1e-9, 1e-2), dd=st.floats(1e-9, 1e-2), e=st.floats(0.0, 0.49),
)
def test_analytic_qber_monotone(p, dp, d, dd, e):
    p2 = min(1.0, p * (1 + dp))
    if p2 > p:
        assert analytic_qber(p2, e, d) < analytic_qber(p, e, d)
    assert analytic_qber(p, e, d + dd) > analytic_qber(p, e, d)


def test_noiseless_link():
    params = ProtocolParams(n_slots=100_000, e_misalign=0.0)
    r = run_bb84(params, receiver(eta=1.0, d=0.0), seed=1)
    assert r.qber == 0.0 and r.n_errors == 0
    n = params.n_slots
    assert abs(r.n_sifted - n / 2) <= 3 * math.sqrt(n / 4)
    assert r.n_detected == n
    assert r.eve_info_fraction == 0.0


@pytest.mark.parametrize("ratio", [100, 1000, 10_000])
def test_monte_carlo_matches_analytic(ratio):
    d = 1e-5
    p_sig = ratio * d
    params = ProtocolParams(n_slots=1_000_000, channel_loss_db=-10 * math.log10(p_sig), e_misalign=0.02)
    r = run_bb84(params, receiver(eta=1.0, d=d), seed=ratio)
    q = analytic_qber(p_sig, 0.02, d)
    assert abs(r.qber - q) <= qber_tolerance(q, r.n_sifted)
    # sifting keeps half of the detections
    assert abs(r.n_sifted - r.n_detected / 2) <= 3 * math.sqrt(r.n_detected / 4)


def test_run_is_reproducible():
    params = ProtocolParams(n_slots=50_000, distance_km=20)
    a = run_bb84(params, receiver(d=1e-4), seed=123)
    b = run_bb84(params, receiver(d=1e-4), seed=123)
    c = run_bb84(params, receiver(d=1e-4), seed=124)
    assert a == b
    assert a != c


def test_chunking_does_not_change_statistics():
    params = ProtocolParams(n_slots=40_000)
    r = run_bb84(params, receiver(), seed=3, chunk=4096)
    assert abs(r.qber - 0.01) <= qber_tolerance(0.01, r.n_sifted)


def test_sim_result_serialisation_and_invariants():
    r = SimResult.from_counts(n_slots=10, n_detected=5, n_sifted=3, n_errors=1,
                              n_eve_correct=0, watchdog_alarms=0, f_ec=1.0)
    assert tuple(r.to_dict()) == SIM_RESULT_FIELDS
    assert r.qber == pytest.approx(1 / 3)
    empty = SimResult.from_counts(n_slots=10, n_detected=0, n_sifted=0, n_errors=0,
                                  n_eve_correct=0, watchdog_alarms=0, f_ec=1.0)
    assert empty.qber == 0.0
    with pytest.raises(InvariantViolation):
        SimResult.from_counts(n_slots=10, n_detected=2, n_sifted=3, n_errors=0,
                              n_eve_correct=0, watchdog_alarms=0, f_ec=1.0)


def test_combine_sums_counts():
    params = ProtocolParams(n_slots=20_000)
    parts = [run_bb84(params, receiver(d=1e-4), seed=s) for s in range(3)]
    pooled = SimResult.combine(parts, 1.0)
    assert pooled.n_slots == 60_000
    assert pooled.n_sifted == sum(p.n_sifted for p in parts)


def _device(dcr=500.0):
    state = ApdState(v_br_orig=225.0, dcr_base=dcr)
    return state, DetectorCircuit(v_bias=240.0)


def _closed_form_distance(eta, d, e, alpha):
    # zero of the key rate: q* from 1 = 2 h2(q), then p* from the QBER formula
    q = brentq(lambda x: 1 - 2 * h2(x), 0.01, 0.4, xtol=1e-14)
    p = d * (1 - 2 * q) / (q - e)
    return 10 / alpha * math.log10(eta / p)


def test_max_distance_regression():
    state, circ = _device()
    params = ProtocolParams(e_misalign=0.01, alpha_db_per_km=0.2)
    dist = max_distance(params, state, circ)
    assert dist == pytest.approx(MAX_DISTANCE_KM, abs=0.1)
    oracle = _closed_form_distance(0.5, -math.expm1(-5e-7), 0.01, 0.2)
    assert abs(dist - oracle) <= 0.1


def test_max_distance_limits():
    params = ProtocolParams(e_misalign=0.01)
    assert max_distance(params, *_device(0.0)) == math.inf
    assert max_distance(ProtocolParams(e_misalign=0.2), *_device()) == 0.0
    with pytest.raises(ValueError):
        max_distance(ProtocolParams(alpha_db_per_km=0.0), *_device())


@settings(max_examples=40, deadline=None)
@given(dcr=st.floats(10.0, 1e5), factor=st.floats(1.0, 10.0))
def test_max_distance_non_increasing_in_dark_counts(dcr, factor):
    params = ProtocolParams()
    assert max_distance(params, *_device(dcr)) >= max_distance(params, *_device(dcr * factor)) - 0.1


def test_protocol_params_validation():
    assert ProtocolParams(distance_km=10, channel_loss_db=1).loss_db == pytest.approx(3.0)
    with pytest.raises(ValueError):
        ProtocolParams(e_misalign=0.7)
    with pytest.raises(ValueError):
        ProtocolParams(f_ec=0.9)
    with pytest.raises(ValueError):
        ProtocolParams.from_dict({"bogus": 1})
