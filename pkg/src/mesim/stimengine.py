"""Stimulation settings decode and the voltage-mode mono/biphasic driver.

The driver is an LDO from the storage capacitor. It holds the programmed
amplitude as long as the supply keeps 10 % headroom over it or stays at or
above the 1.5 V driver minimum, and
every joule it puts into the load costs ``1 / driver_efficiency`` joules of
stored energy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import CARRIER_FREQ, QUIESCENT_POWER, STIM_CLOCK_DIVIDER
from .identity import RegisterFile
from .powerpath import (DRIVER_MIN_SUPPLY, REGULATION_HYSTERESIS, SUPPLY_HEADROOM, PowerState,
                        RegulationTarget, draw_from_store)

log = logging.getLogger(__name__)

AMP_LSB = 0.25
AMP_MAX_CODE = 14
PW_BASE = 0.15e-3
PW_LSB = 0.07e-3
PW_MIN = 50e-6
DELAY_STIM_PERIODS = 2
TRIM_CENTER = 16
TRIM_LSB = 0.005
SHORT_MAX = 1e-3

MONOPHASIC, BIPHASIC = "monophasic", "biphasic"


@dataclass(frozen=True)
class StimSettings:
    amplitude: float
    pulse_width: float
    delay: float = 0.0
    mode: str = BIPHASIC
    interphase_gap: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= 3.5 + 1e-9:
            raise ValueError(f"amplitude {self.amplitude} V outside [0, 3.5]")
        if self.mode not in (MONOPHASIC, BIPHASIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.pulse_width < PW_MIN:
            log.warning("pulse width %.3g s below %.3g s; clamped", self.pulse_width, PW_MIN)
            object.__setattr__(self, "pulse_width", PW_MIN)
        if self.delay < 0:
            raise ValueError("delay must be >= 0")

    @property
    def phases(self) -> int:
        return 2 if self.mode == BIPHASIC else 1


def decode_settings(rf: RegisterFile, ref_error: float = 0.0,
                    pulse_width_total: bool = False) -> StimSettings:
    """Register codes -> physical settings.

    amplitude = 0.25 V * amp_code, scaled by the implant's reference error and
    its trim (0.5 %/LSB around code 16); pulse width = 0.15 ms + 0.07 ms *
    pw_code per phase (or in total when ``pulse_width_total``); delay =
    delay_code * 2 stim-clock periods. amp_code 15 is reserved and read as 14.
    """
    code = rf.amp_code
    if code > AMP_MAX_CODE:
        log.warning("amp_code %d reserved; clamped to %d", code, AMP_MAX_CODE)
        code = AMP_MAX_CODE
    scale = (1.0 + ref_error) * (1.0 + TRIM_LSB * (rf.ref_trim - TRIM_CENTER))
    mode = BIPHASIC if rf.mode else MONOPHASIC
    pw = PW_BASE + PW_LSB * rf.pw_code
    if pulse_width_total and mode == BIPHASIC:
        pw /= 2
    return StimSettings(
        amplitude=min(3.5, AMP_LSB * code * scale),
        pulse_width=pw,
        delay=rf.delay_code * DELAY_STIM_PERIODS * STIM_CLOCK_DIVIDER / CARRIER_FREQ,
        mode=mode,
    )


def driver_efficiency(amplitude: float) -> float:
    if not 0.0 < amplitude <= 3.5 + 1e-9:
        raise ValueError("amplitude must lie in (0, 3.5] V")
    return amplitude / max(DRIVER_MIN_SUPPLY, SUPPLY_HEADROOM * amplitude)


def system_stimulation_efficiency(amplitude: float, pulse_width: float, frequency: float,
                                  load_resistance: float = 1000.0, biphasic: bool = True,
                                  quiescent_power: float = QUIESCENT_POWER) -> float:
    """Delivered / consumed power for a resistive pulse train, idle power included."""
    p_stim = amplitude ** 2 / load_resistance * pulse_width * frequency * (2 if biphasic else 1)
    return p_stim / (p_stim / driver_efficiency(amplitude) + quiescent_power)


@dataclass
class LoadModel:
    resistance: float = 1000.0
    series_capacitance: float | None = None
    residual_charge: float = 0.0

    def __post_init__(self):
        if self.resistance <= 0:
            raise ValueError("load resistance must be positive")
        if self.series_capacitance is not None and self.series_capacitance <= 0:
            raise ValueError("series capacitance must be positive")

    @property
    def rc(self) -> float:
        return 0.0 if self.series_capacitance is None else self.resistance * self.series_capacitance

    @property
    def v_cap(self) -> float:
        if self.series_capacitance is None:
            return 0.0
        return self.residual_charge / self.series_capacitance


def shorting_window(load: LoadModel) -> float:
    return min(4.0 * load.rc, SHORT_MAX)


def short_electrodes(load: LoadModel) -> LoadModel:
    """Discharge the electrode capacitance; the residual charge is gone afterwards."""
    return replace(load, residual_charge=0.0)


@dataclass
class StimWaveform:
    t: list = field(default_factory=list)
    v_load: list = field(default_factory=list)
    i_load: list = field(default_factory=list)
    v_store: list = field(default_factory=list)
    phase_charge: list = field(default_factory=list)
    energy_delivered: float = 0.0
    energy_drawn: float = 0.0
    onset: float | None = None
    residual_before_short: float = 0.0
    v_store_start: float | None = None
    v_store_end: float | None = None
    truncated: bool = False
    undervoltage: bool = False

    @property
    def efficiency(self) -> float | None:
        return self.energy_delivered / self.energy_drawn if self.energy_drawn > 0 else None

    @property
    def net_charge(self) -> float:
        return float(sum(self.phase_charge))

    def summary(self) -> dict:
        return {
            "onset": self.onset,
            "phase_charge": list(self.phase_charge),
            "energy_delivered": self.energy_delivered,
            "energy_drawn": self.energy_drawn,
            "efficiency": self.efficiency,
            "residual_before_short": self.residual_before_short,
            "v_store_start": self.v_store_start,
            "v_store_end": self.v_store_end,
            "truncated": self.truncated,
            "undervoltage": self.undervoltage,
        }


class StimulusRun:
    """Cycle-stepped stimulus FSM: delay, phase 1, phase 2 (biphasic), electrode short.

    Timing is quantized to the stim clock (4 carrier cycles). The FSM keeps
    its timing even when the drive is skipped (zero amplitude, undervoltage),
    so every implant with the same settings finishes at the same cycle.
    """

    def __init__(self, settings: StimSettings, load: LoadModel, carrier_freq: float = CARRIER_FREQ,
                 t0: float = 0.0):
        self.settings = settings
        self.load = load
        self.dt = 1.0 / carrier_freq
        self.t0 = t0
        stim_f = carrier_freq / STIM_CLOCK_DIVIDER
        q = STIM_CLOCK_DIVIDER
        self.delay_cycles = int(round(settings.delay * stim_f)) * q
        self.phase_cycles = max(1, int(round(settings.pulse_width * stim_f))) * q
        self.gap_cycles = int(round(settings.interphase_gap * stim_f)) * q
        self.short_cycles = int(math.ceil(shorting_window(load) * carrier_freq - 1e-9))
        self.eta = driver_efficiency(settings.amplitude) if settings.amplitude > 0 else 1.0
        # the output holds while the supply keeps 10 % headroom or stays above the floor
        self.v_floor = min(SUPPLY_HEADROOM * settings.amplitude, DRIVER_MIN_SUPPLY)
        self.k = 0
        self.drive = settings.amplitude > 0
        self.wave = StimWaveform()
        self._phase_q = 0.0
        self._edges = self._phase_edges()

    def _phase_edges(self):
        s = self.delay_cycles
        edges = [(s, s + self.phase_cycles, +1)]
        if self.settings.phases == 2:
            s2 = s + self.phase_cycles + self.gap_cycles
            edges.append((s2, s2 + self.phase_cycles, -1))
        return edges

    @property
    def pulse_end(self) -> int:
        return self._edges[-1][1]

    @property
    def total_cycles(self) -> int:
        return self.pulse_end + self.short_cycles

    @property
    def done(self) -> bool:
        return self.k >= self.total_cycles

    def driving(self) -> bool:
        """True when the current cycle falls inside a drive phase."""
        return any(a <= self.k < b for a, b, _ in self._edges)

    def _polarity(self):
        for a, b, pol in self._edges:
            if a <= self.k < b:
                return pol, self.k == a, self.k == b - 1
        return 0, False, False

    def step(self, power: PowerState, phase_offset: float = 0.0) -> dict | None:
        """Advance one carrier cycle; returns an event dict on notable transitions."""
        if self.done:
            return None
        event = None
        wave, s = self.wave, self.settings
        pol, first, last = self._polarity()
        t = self.t0 + self.k * self.dt + phase_offset
        if first and pol > 0:
            wave.v_store_start = power.v_store
            target = RegulationTarget(s.amplitude).v_supply_target
            if self.drive and power.v_store < target - REGULATION_HYSTERESIS - 1e-12:
                self.drive = False
                wave.undervoltage = True
                event = {"kind": "stim_undervoltage", "v_store": power.v_store, "required": target}
            wave.onset = t
        if pol and self.drive and power.v_store < self.v_floor:
            self.drive = False
            wave.truncated = True
            event = {"kind": "stim_truncated", "v_store": power.v_store}
        v_drive = pol * s.amplitude if (pol and self.drive) else 0.0
        dq = 0.0
        if v_drive:
            if self.load.series_capacitance is None:
                dq = v_drive / self.load.resistance * self.dt
            else:
                c = self.load.series_capacitance
                dv = (v_drive - self.load.v_cap) * (1.0 - math.exp(-self.dt / self.load.rc))
                dq = c * dv
                self.load.residual_charge += dq
            e = v_drive * dq
            drawn_before = power.energy_out + power.energy_lost
            got = draw_from_store(power, e, self.eta)
            wave.energy_delivered += got
            wave.energy_drawn += power.energy_out + power.energy_lost - drawn_before
        if pol:
            self._phase_q += dq
            if last:
                wave.phase_charge.append(self._phase_q)
                self._phase_q = 0.0
        wave.t.append(t)
        wave.v_load.append(v_drive)
        wave.i_load.append(dq / self.dt)
        wave.v_store.append(power.v_store)
        self.k += 1
        if self.k == self.pulse_end:
            wave.v_store_end = power.v_store
            wave.residual_before_short = self.load.residual_charge
            if self.short_cycles == 0:
                self.load = short_electrodes(self.load)
        if self.k == self.total_cycles and self.short_cycles:
            self.load = short_electrodes(self.load)
        return event


def run_stimulus(settings: StimSettings, power: PowerState, load: LoadModel,
                 clock=None, carrier_freq: float = CARRIER_FREQ):
    """Play one stimulus to completion on its own; returns (waveform, power, load).

    The storage capacitor only discharges here (no recharge in between).
    ``clock`` is a RecoveredClock whose phase offset shifts the time axis.
    """
    offset = clock.phase_offset if clock is not None else 0.0
    run = StimulusRun(settings, load, carrier_freq)
    events = []
    while not run.done:
        ev = run.step(power, offset)
        if ev:
            events.append(ev)
    return run.wave, power, run.load


def waveform_array(w: StimWaveform) -> np.ndarray:
    return np.column_stack([w.t, w.v_load, w.i_load, w.v_store])
