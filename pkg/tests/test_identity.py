import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binom, norm

from mesim.downlink import Packet, PayloadLayout
from mesim.identity import (DeviceId, ProtocolError, PufCell, RegisterFile, device_cells,
                            find_seed_for_id, flip_probability, generate_id, replay_registers, tmv,
                            tmv_error, update_registers)


@pytest.mark.parametrize("p", [0.01, 0.1, 0.2, 0.3, 0.45])
def test_tmv_error_matches_binomial_tail(p):
    assert tmv_error(p, 15) == pytest.approx(binom.sf(7, 15, p), rel=1e-12)


def test_tmv_error_at_p02():
    assert tmv_error(0.2) == pytest.approx(0.0042, abs=1e-4)
    with pytest.raises(ValueError):
        tmv_error(0.2, 14)


def test_flip_probability_oracle():
    cell = PufCell(norm.ppf(0.8) * 0.05, 0.05)
    assert flip_probability(cell) == pytest.approx(0.2, rel=1e-9)
    assert flip_probability(PufCell(0.0, 0.0)) == 0.5


def test_tmv_reduces_errors():
    cell = PufCell(norm.ppf(0.8) * 0.05, 0.05)
    rng = np.random.default_rng(0)
    out = tmv(cell, rng, 15, trials=20000)
    err = 1 - out.mean()
    assert err < 0.02
    with pytest.raises(ValueError):
        tmv(cell, rng, 4)


def test_generate_id_requires_por_and_is_deterministic():
    with pytest.raises(ProtocolError):
        generate_id(1, False)
    assert generate_id(5645, True) == generate_id(5645, True)
    assert str(generate_id(5645, True)) == "11010111"
    assert str(generate_id(11314, True)) == "01111000"


@given(st.integers(0, 10 ** 6))
def test_device_cells_deterministic(seed):
    assert device_cells(seed) == device_cells(seed)


def test_find_seed_for_id():
    s = find_seed_for_id(0b11010111)
    assert generate_id(s, True).bits == 0b11010111
    assert min(abs(c.mismatch) for c in device_cells(s)) >= 6 * 0.05


def test_register_update_is_id_gated():
    me = DeviceId(0b11010111)
    rf = RegisterFile()
    pl = PayloadLayout(8, 3, 2, 1, 17)
    rf2, ok = update_registers(rf, Packet(0b01111000, pl), me)
    assert not ok and rf2 == rf
    rf3, ok = update_registers(rf, Packet(0b11010111, pl), me)
    assert ok and rf3.to_dict() == pl.to_dict()


def test_replay_registers():
    seq = [PayloadLayout(4).to_dict(), PayloadLayout(8, 1).to_dict()]
    assert replay_registers(seq).to_dict() == PayloadLayout(8, 1).to_dict()
    assert replay_registers([]) == RegisterFile()
