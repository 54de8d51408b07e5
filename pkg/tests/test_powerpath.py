import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mesim.constants import CARRIER_PERIOD, QUIESCENT_POWER
from mesim.powerpath import (PowerState, PresenceDetector, RegulationTarget, Watchdog, available_power,
                             draw_from_store, ldo_output, por_check, quiescent_drain, rectify,
                             rectify_step, scpc_step, supply_select, update_supplies, watchdog)

C = 11e-6


def test_rectify_examples():
    assert rectify(0.0) == 0.0
    assert rectify(3.5) == pytest.approx(0.95 * 3.5 - 0.1)
    assert rectify(0.05) == 0.0
    with pytest.raises(ValueError):
        rectify(-1.0)


def test_rectifier_decays_through_rc_when_field_drops():
    rc, dt = 20e-6, CARRIER_PERIOD
    v = rectify_step(2.0, 0.0, dt, rc)
    trace = [v]
    for _ in range(10):
        trace.append(rectify_step(0.0, trace[-1], dt, rc))
    expect = v * np.exp(-np.arange(11) * dt / rc)
    assert np.allclose(trace, expect)
    assert trace[1] > 0


def test_regulation_target_floor():
    assert RegulationTarget(2.5).v_supply_target == pytest.approx(2.75)
    assert RegulationTarget(0.5).v_supply_target == 1.5
    assert RegulationTarget(3.5).v_supply_target == pytest.approx(3.85)


def test_watchdog_examples():
    assert watchdog([True] * 500) == []
    gap = [True] * 100 + [False] * 33 + [True] * 100
    assert watchdog(gap) == [133]
    assert watchdog([True] * 100 + [False] * 10 + [True] * 50) == []
    assert watchdog([True] * 10 + [False] * 16 + [True]) == [26]
    assert watchdog([True] * 10 + [False] * 15 + [True]) == []


@given(st.floats(0.3, 10.0), st.sampled_from([0.5, 0.4, 0.3]))
def test_notch_detected_once_at_any_amplitude(amp, ask_low):
    # ring-up shaped envelope: charge, ASK-like dips, a 33-cycle notch, carrier back
    a = math.exp(-1 / 5.0)
    levels = [1.0] * 400 + ([ask_low] * 64 + [1.0] * 64) * 3 + [0.0] * 33 + [1.0] * 300
    y, env = 0.0, []
    for lv in levels:
        y = a * y + (1 - a) * lv
        env.append(amp * y)
    det = PresenceDetector()
    events = watchdog([det.step(e) for e in env])
    assert len(events) == 1


def test_supply_select_is_max():
    assert supply_select(2.0, 1.0) == 2.0
    assert supply_select(0.0, 2.15) == 2.15


@given(st.floats(0, 5), st.floats(0, 5))
def test_supply_select_property(a, b):
    out = supply_select(a, b)
    assert out == max(a, b) and out >= min(a, b)


def test_scpc_regulates_at_target_and_holds():
    st_ = PowerState(C, v_rect=3.0)
    tgt = RegulationTarget(2.5)
    for _ in range(20000):
        scpc_step(st_, CARRIER_PERIOD, tgt, 1e-3)
    assert st_.v_store == pytest.approx(2.75)
    e_in = st_.energy_in
    scpc_step(st_, CARRIER_PERIOD, tgt, 1e-3)
    assert st_.v_store == pytest.approx(2.75) and st_.energy_in == e_in


def test_scpc_hysteresis():
    st_ = PowerState(C, v_rect=3.0, v_store=2.75, charging=False)
    tgt = RegulationTarget(2.5)
    st_.set_stored_energy(0.5 * C * 2.72 ** 2)
    scpc_step(st_, CARRIER_PERIOD, tgt, 1e-3)
    assert st_.v_store == pytest.approx(2.72)
    st_.set_stored_energy(0.5 * C * 2.69 ** 2)
    scpc_step(st_, CARRIER_PERIOD, tgt, 1e-3)
    assert st_.v_store > 2.69


def test_scpc_pump_ceiling():
    st_ = PowerState(C, v_rect=0.5)
    for _ in range(50000):
        scpc_step(st_, CARRIER_PERIOD, RegulationTarget(3.5), 1e-3)
    assert st_.v_store <= 2.0 + 1e-12
    assert st_.v_store == pytest.approx(2.0)


def test_scpc_domain_errors():
    with pytest.raises(ValueError):
        scpc_step(PowerState(C), CARRIER_PERIOD, RegulationTarget(1.0), -1.0)
    with pytest.raises(ValueError):
        scpc_step(PowerState(C), 0.0, RegulationTarget(1.0), 1.0)


@given(st.lists(st.tuples(st.floats(0, 4), st.floats(0, 2e-3), st.floats(0, 2e-5),
                          st.booleans()), min_size=1, max_size=200))
def test_ledger_closes_under_any_sequence(ops):
    s = PowerState(C)
    for v_rect, p_av, drain, stim in ops:
        s.v_rect = v_rect
        scpc_step(s, CARRIER_PERIOD, RegulationTarget(2.0), p_av)
        quiescent_drain(s, CARRIER_PERIOD, stim, p_av)
        draw_from_store(s, drain, 0.9)
        assert s.v_store <= 2.2 + 1e-12
    scale = max(s.energy_in, s.energy_initial, 1e-12)
    assert abs(s.ledger_residual()) <= 1e-9 * scale


def test_quiescent_drain_examples():
    s = PowerState(C, v_store=2.0)
    quiescent_drain(s, 1.0, available_power=1e-3)
    assert s.energy_out == pytest.approx(QUIESCENT_POWER)
    assert s.v_store == 2.0
    s2 = PowerState(C, v_store=2.0)
    quiescent_drain(s2, 0.0)
    assert s2.energy_out == 0 and s2.v_store == 2.0
    s3 = PowerState(C, v_store=2.0)
    quiescent_drain(s3, 1e-3, stimulating=True)
    assert s3.energy_out == 0
    s4 = PowerState(C, v_store=2.0)
    e0 = s4.stored_energy
    quiescent_drain(s4, 1e-3)
    assert e0 - s4.stored_energy == pytest.approx(9e-9)


def test_stimulation_dominates_quiescent_at_20hz():
    p_stim = 3.5 ** 2 / 1000 * 2.4e-3 * 20
    assert p_stim / QUIESCENT_POWER > 10


def test_ldo_and_por_sequence():
    s = PowerState(C)
    assert ldo_output(0.5) == pytest.approx(0.3)
    assert ldo_output(3.0) == 1.0
    events = []
    for v in [0.5] * 5 + [2.0] * 12:
        s.v_rect = v
        update_supplies(s)
        events.append(por_check(s))
    assert events.count("por") == 1
    assert events.index("por") == 5 + 9
    s.v_rect = 0.5
    s.v_store = 0.5
    update_supplies(s)
    assert por_check(s) == "brownout"
    for _ in range(10):
        s.v_rect = 2.0
        update_supplies(s)
        ev = por_check(s)
    assert ev == "por"


def test_por_never_without_supply():
    s = PowerState(C, v_rect=1.0)
    update_supplies(s)
    assert all(por_check(s) is None for _ in range(50))


def test_available_power():
    assert available_power(2.0, 1000.0) == pytest.approx(4 / 8000)
