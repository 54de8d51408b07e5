"""Implant power chain: rectifier + watchdog, adaptive 4x SCPC, supply selector, LDO/POR.

All energies are in joules and every transfer is booked on the per-implant
ledger so that ``energy_in == energy_out + energy_lost + delta_stored`` holds
at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .constants import QUIESCENT_POWER

RECT_EFFICIENCY = 0.95
RECT_DROP = 0.1
PUMP_GAIN = 4.0
CONVERTER_EFFICIENCY = 0.8
REGULATION_HYSTERESIS = 0.05
DRIVER_MIN_SUPPLY = 1.5
SUPPLY_HEADROOM = 1.1

LDO_OUTPUT = 1.0
LDO_DROPOUT = 0.2
POR_WINDOW = 0.05
POR_STABLE_CYCLES = 10

NOTCH_DETECT_CYCLES = 16


@dataclass
class PowerState:
    c_store: float
    v_rect: float = 0.0
    v_store: float = 0.0
    v_dd_h: float = 0.0
    v_dd_l: float = 0.0
    por_fired: bool = False
    charging: bool = True
    stable_cycles: int = 0
    energy_in: float = 0.0
    energy_out: float = 0.0
    energy_lost: float = 0.0
    energy_initial: float | None = None

    def __post_init__(self):
        if self.c_store <= 0:
            raise ValueError("c_store must be positive")
        if self.energy_initial is None:
            self.energy_initial = self.stored_energy

    @property
    def stored_energy(self) -> float:
        return 0.5 * self.c_store * self.v_store ** 2

    def set_stored_energy(self, e: float):
        self.v_store = math.sqrt(2.0 * max(e, 0.0) / self.c_store)

    def ledger_residual(self) -> float:
        return (self.energy_in - self.energy_out - self.energy_lost
                - (self.stored_energy - self.energy_initial))

    def ledger(self) -> dict:
        return {
            "energy_in": self.energy_in,
            "energy_out": self.energy_out,
            "energy_lost": self.energy_lost,
            "stored_initial": self.energy_initial,
            "stored_final": self.stored_energy,
            "residual": self.ledger_residual(),
        }


@dataclass(frozen=True)
class RegulationTarget:
    v_amp_ref: float = 0.0

    @property
    def v_supply_target(self) -> float:
        return max(DRIVER_MIN_SUPPLY, SUPPLY_HEADROOM * self.v_amp_ref)


def rectify(v_me_amplitude: float, efficiency: float = RECT_EFFICIENCY,
            drop: float = RECT_DROP) -> float:
    """Static rectifier transfer: ``max(0, efficiency * V - drop)``."""
    if v_me_amplitude < 0:
        raise ValueError("ME amplitude must be >= 0")
    return max(0.0, efficiency * v_me_amplitude - drop)


def rectify_step(v_me_amplitude: float, v_rect_prev: float, dt: float, rc: float,
                 efficiency: float = RECT_EFFICIENCY, drop: float = RECT_DROP) -> float:
    """One step of the rectifier output node.

    The output follows the source upward immediately and discharges through
    its load with time constant ``rc`` when the source falls away.
    """
    return max(rectify(v_me_amplitude, efficiency, drop), v_rect_prev * math.exp(-dt / rc))


class PresenceDetector:
    """Carrier-present flag from the rectifier comparators, one call per cycle.

    The carrier counts as present while the ME envelope stays above ``ratio``
    of a slowly leaking peak of itself. Being relative, the decision is the
    same for every implant no matter how strong its link is.
    """

    def __init__(self, ratio: float = 0.25, hold_cycles: float = 330.0):
        self.ratio = ratio
        self._leak = math.exp(-1.0 / hold_cycles)
        self.peak = 0.0

    def step(self, envelope: float) -> bool:
        self.peak = max(envelope, self.peak * self._leak)
        return self.peak > 0.0 and envelope >= self.ratio * self.peak


class Watchdog:
    """Streaming notch detector over per-cycle carrier-present flags.

    A notch is reported on the first cycle the carrier returns after being
    absent for at least ``threshold`` consecutive cycles, so the event marks
    the start of the segment the notch announces.
    """

    def __init__(self, threshold: int = NOTCH_DETECT_CYCLES):
        self.threshold = threshold
        self.absent = 0

    def step(self, present: bool) -> bool:
        if present:
            hit = self.absent >= self.threshold
            self.absent = 0
            return hit
        self.absent += 1
        return False

    def reset(self):
        self.absent = 0


def watchdog(carrier_present, threshold: int = NOTCH_DETECT_CYCLES) -> list[int]:
    """Cycle indices at which notches are reported for a whole flag stream."""
    wd = Watchdog(threshold)
    return [n for n, p in enumerate(carrier_present) if wd.step(bool(p))]


def supply_select(v_rect: float, v_store: float) -> float:
    return max(v_rect, v_store)


def ldo_output(v_dd_h: float) -> float:
    return min(LDO_OUTPUT, max(0.0, v_dd_h - LDO_DROPOUT))


def scpc_step(state: PowerState, dt: float, target: RegulationTarget, available_power: float,
              efficiency: float = CONVERTER_EFFICIENCY,
              hysteresis: float = REGULATION_HYSTERESIS, enabled: bool = True) -> PowerState:
    """Advance the storage capacitor by one step of the adaptive converter.

    Charges toward ``target.v_supply_target`` with power ``available_power *
    efficiency``, never above ``PUMP_GAIN * v_rect``. On reaching the target
    the capacitor is disconnected until it sags ``hysteresis`` below it.
    Mutates and returns ``state``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if available_power < 0:
        raise ValueError("available power must be >= 0")
    vt = target.v_supply_target
    if state.charging:
        if state.v_store >= vt:
            state.charging = False
    elif state.v_store < vt - hysteresis:
        state.charging = True
    if not (state.charging and enabled) or available_power == 0.0:
        return state

    ceiling = min(vt, PUMP_GAIN * state.v_rect)
    e_now = state.stored_energy
    e_max = 0.5 * state.c_store * ceiling ** 2
    if e_max <= e_now:
        return state
    gained = efficiency * available_power * dt
    if gained >= e_max - e_now:
        gained = e_max - e_now
        state.v_store = ceiling
    else:
        state.set_stored_energy(e_now + gained)
    drawn = gained / efficiency
    state.energy_in += drawn
    state.energy_lost += drawn - gained
    if state.v_store >= vt:
        state.charging = False
    return state


def quiescent_drain(state: PowerState, dt: float, stimulating: bool = False,
                    available_power: float = 0.0, power: float = QUIESCENT_POWER) -> PowerState:
    """Book the SoC's idle consumption for ``dt``.

    Drawn from the incoming power when it covers the demand, otherwise from
    the storage capacitor. Nothing is booked while stimulating (the driver
    accounts for that window). Mutates and returns ``state``.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt == 0 or stimulating:
        return state
    need = power * dt
    if available_power >= power:
        state.energy_in += need
        state.energy_out += need
        return state
    e = state.stored_energy
    take = min(need, e)
    state.set_stored_energy(e - take)
    state.energy_out += take
    return state


def draw_from_store(state: PowerState, delivered: float, efficiency: float) -> float:
    """Remove ``delivered / efficiency`` from storage; returns what was actually delivered."""
    e = state.stored_energy
    need = delivered / efficiency
    if need > e:
        need = e
        delivered = e * efficiency
    state.set_stored_energy(e - need)
    state.energy_out += delivered
    state.energy_lost += need - delivered
    return delivered


def por_check(state: PowerState, stable_cycles: int = POR_STABLE_CYCLES) -> str | None:
    """Call once per carrier cycle; returns ``"por"``, ``"brownout"`` or None.

    POR fires the first time V_DD_L has sat within 1.0 V +/- 5 % for
    ``stable_cycles`` cycles. Dropping below the window after that is a
    brown-out and re-arms POR.
    """
    ok = abs(state.v_dd_l - LDO_OUTPUT) <= POR_WINDOW * LDO_OUTPUT + 1e-12
    if state.por_fired:
        if not ok:
            state.por_fired = False
            state.stable_cycles = 0
            return "brownout"
        return None
    state.stable_cycles = state.stable_cycles + 1 if ok else 0
    if state.stable_cycles >= stable_cycles:
        state.por_fired = True
        return "por"
    return None


def update_supplies(state: PowerState) -> PowerState:
    state.v_dd_h = supply_select(state.v_rect, state.v_store)
    state.v_dd_l = ldo_output(state.v_dd_h)
    return state


def available_power(v_me_amplitude: float, source_resistance: float) -> float:
    """Matched-load power bound V^2 / (8 R) of the ME source."""
    return v_me_amplitude ** 2 / (8.0 * source_resistance)
