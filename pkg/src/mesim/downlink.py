"""ASK downlink: packet framing, TX schedule construction, and the implant receive side.

On air a packet is ``preamble | device id (8b) | payload (19b)``, MSB first,
one bit per 64 carrier cycles. The implant calibrates its slicing threshold
on the alternating preamble and samples each bit window on its centre half.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .channel import FieldSchedule, Segment
from .constants import (CARRIER_FREQ, CLOCK_LOCK_AMPLITUDE, CYCLES_PER_BIT, DATA_CLOCK_DIVIDER,
                        MAX_CLOCK_SKEW, NOTCH_CYCLES, STIM_CLOCK_DIVIDER)

PREAMBLE = (1, 0, 1, 0, 1, 0, 1, 0)
ID_BITS = 8
PAYLOAD_BITS = 19
PACKET_BITS = len(PREAMBLE) + ID_BITS + PAYLOAD_BITS

# (name, width), MSB first
PAYLOAD_FIELDS = (("amp_code", 4), ("pw_code", 4), ("delay_code", 5), ("mode", 1), ("ref_trim", 5))


class FrameError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


def _to_bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - k)) & 1 for k in range(width)]


def _from_bits(bits: Sequence[int]) -> int:
    v = 0
    for b in bits:
        v = (v << 1) | (b & 1)
    return v


def parse_id(device_id) -> int:
    """Accept an int or an MSB-first bit string such as ``"11010111"``."""
    if isinstance(device_id, str):
        if len(device_id) != ID_BITS or set(device_id) - {"0", "1"}:
            raise ValueError(f"device id must be {ID_BITS} binary digits, got {device_id!r}")
        return int(device_id, 2)
    device_id = int(device_id)
    if not 0 <= device_id < 1 << ID_BITS:
        raise ValueError(f"device id out of range: {device_id}")
    return device_id


def id_str(device_id: int) -> str:
    return format(device_id, f"0{ID_BITS}b")


@dataclass(frozen=True)
class PayloadLayout:
    amp_code: int = 0
    pw_code: int = 0
    delay_code: int = 0
    mode: int = 0
    ref_trim: int = 16

    def __post_init__(self):
        for name, width in PAYLOAD_FIELDS:
            v = getattr(self, name)
            if not 0 <= v < 1 << width:
                raise ValueError(f"{name}={v} does not fit in {width} bits")

    def to_int(self) -> int:
        v = 0
        for name, width in PAYLOAD_FIELDS:
            v = (v << width) | getattr(self, name)
        return v

    @classmethod
    def from_int(cls, v: int) -> "PayloadLayout":
        vals = {}
        for name, width in reversed(PAYLOAD_FIELDS):
            vals[name] = v & ((1 << width) - 1)
            v >>= width
        return cls(**vals)

    def to_dict(self):
        return {name: getattr(self, name) for name, _ in PAYLOAD_FIELDS}


@dataclass(frozen=True)
class Packet:
    device_id: int
    payload: PayloadLayout = field(default_factory=PayloadLayout)
    preamble: tuple = PREAMBLE

    def __post_init__(self):
        object.__setattr__(self, "device_id", parse_id(self.device_id))

    def to_dict(self):
        return {"id": id_str(self.device_id), **self.payload.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        dev = d.pop("id")
        return cls(dev, PayloadLayout(**d))


def encode_packet(p: Packet) -> list[int]:
    return list(p.preamble) + _to_bits(p.device_id, ID_BITS) + _to_bits(p.payload.to_int(), PAYLOAD_BITS)


def decode_packet(bits: Sequence[int], preamble: Sequence[int] = PREAMBLE) -> Packet:
    n_pre = len(preamble)
    if len(bits) != n_pre + ID_BITS + PAYLOAD_BITS:
        raise FrameError(f"expected {n_pre + ID_BITS + PAYLOAD_BITS} bits, got {len(bits)}")
    if tuple(bits[:n_pre]) != tuple(preamble):
        raise FrameError("preamble mismatch")
    dev = _from_bits(bits[n_pre:n_pre + ID_BITS])
    payload = PayloadLayout.from_int(_from_bits(bits[n_pre + ID_BITS:]))
    return Packet(dev, payload, tuple(preamble))


def format_bits(bits: Sequence[int], preamble_len: int = len(PREAMBLE)) -> str:
    """Event-log dump ``<preamble>|<id:8b>|<payload:19b>``."""
    s = "".join(str(b) for b in bits)
    a, b = preamble_len, preamble_len + ID_BITS
    return f"{s[:a]}|{s[a:b]}|{s[b:]}"


# -- TX side -----------------------------------------------------------------

def modulate(packets_per_cycle: Iterable[Packet], ask_depth: float = 0.5, *,
             charge_cycles: int = 3300, guard_cycles: int = 330, stim_cycles: int = 1650,
             amplitude: float = 1.0, notch_cycles: int = NOTCH_CYCLES) -> FieldSchedule:
    """Schedule for one operating cycle.

    charge | notch | bits (64 cycles each) | guard | notch | stimulation window.
    With no packets the data segment is empty and the cycle only triggers a
    stimulus. Low bits are sent at ``(1 - ask_depth)`` of the carrier.
    """
    if not 0.0 < ask_depth < 1.0:
        raise ValueError("ask_depth must lie in (0, 1)")
    if stim_cycles <= 0:
        raise ValueError("cycle without a stimulation window after the second notch is invalid")
    if charge_cycles <= 0 or guard_cycles <= 0:
        raise ValueError("charge and guard segments must be non-empty")
    low = (1.0 - ask_depth) * amplitude
    segs = [Segment("charge", charge_cycles, amplitude), Segment("notch", notch_cycles, 0.0)]
    for p in packets_per_cycle:
        for b in encode_packet(p):
            segs.append(Segment("bit", CYCLES_PER_BIT, amplitude if b else low, b))
    segs += [Segment("guard", guard_cycles, amplitude), Segment("notch", notch_cycles, 0.0),
             Segment("stim", stim_cycles, amplitude)]
    return FieldSchedule(segs, [0]).validate()


# -- implant side ------------------------------------------------------------

@dataclass(frozen=True)
class RecoveredClock:
    lock_index: int
    phase_offset: float
    carrier_freq: float = CARRIER_FREQ

    @property
    def period(self) -> float:
        return 1.0 / self.carrier_freq

    @property
    def data_clock(self) -> float:
        return self.carrier_freq / DATA_CLOCK_DIVIDER

    @property
    def stim_clock(self) -> float:
        return self.carrier_freq / STIM_CLOCK_DIVIDER

    @property
    def lock_time(self) -> float:
        return self.lock_index / self.carrier_freq + self.phase_offset


def clock_phase_offset(seed: int) -> float:
    """Deterministic first-pulse delay of an implant's recovered clock.

    Uniform over [0, 0.75 us]: the recovered edge can land anywhere between
    the zero crossing and the peak of the ME sinusoid.
    """
    rng = np.random.default_rng([0xC10C, int(seed) & 0xFFFFFFFF])
    return float(rng.uniform(0.0, MAX_CLOCK_SKEW))


def recover_clock(v_envelope_trace: Sequence[float], min_amplitude: float = CLOCK_LOCK_AMPLITUDE,
                  seed: int = 0, carrier_freq: float = CARRIER_FREQ) -> RecoveredClock | None:
    """Lock on the first cycle whose envelope reaches ``min_amplitude``.

    Returns None if the trace never gets there.
    """
    trace = np.asarray(v_envelope_trace, dtype=float)
    hits = np.flatnonzero(trace >= min_amplitude)
    if hits.size == 0:
        return None
    return RecoveredClock(int(hits[0]), clock_phase_offset(seed), carrier_freq)


class OperatingPhase(enum.Enum):
    CHARGING = "Charging"
    DATA = "DataTransmission"
    STIMULATION = "Stimulation"


@dataclass(frozen=True)
class PhaseChange:
    cycle: int
    phase: OperatingPhase
    reason: str


class PhaseController:
    """Notch-driven operating-phase FSM of one implant.

    Odd notches open the data phase (data-clock divider reset), even notches
    open the stimulation phase (stim-clock divider reset). The data phase
    closes by itself after ``packet_len_bits`` bit windows, or early when the
    second notch arrives. A notch during stimulation is a protocol violation
    and drops the implant back to Charging.
    """

    def __init__(self, packet_len_bits: int = PACKET_BITS):
        self.packet_len_bits = packet_len_bits
        self.phase = OperatingPhase.CHARGING
        self.expect_data = True
        self.data_end = None
        self.history: list[PhaseChange] = []

    def _go(self, cycle, phase, reason):
        self.phase = phase
        ch = PhaseChange(cycle, phase, reason)
        self.history.append(ch)
        return ch

    def notch(self, cycle: int) -> PhaseChange:
        if self.phase is OperatingPhase.STIMULATION:
            self.expect_data = True
            self.data_end = None
            return self._go(cycle, OperatingPhase.CHARGING, "protocol_violation")
        if self.expect_data and self.phase is OperatingPhase.CHARGING:
            self.expect_data = False
            self.data_end = cycle + self.packet_len_bits * CYCLES_PER_BIT
            return self._go(cycle, OperatingPhase.DATA, "notch")
        reason = "notch" if self.phase is OperatingPhase.CHARGING else "notch_override"
        self.expect_data = True
        self.data_end = None
        return self._go(cycle, OperatingPhase.STIMULATION, reason)

    def tick(self, cycle: int) -> PhaseChange | None:
        """Close the data phase once its expected length has elapsed."""
        if self.phase is OperatingPhase.DATA and cycle >= self.data_end:
            self.data_end = None
            return self._go(cycle, OperatingPhase.CHARGING, "data_complete")
        return None

    def stimulation_done(self, cycle: int) -> PhaseChange | None:
        if self.phase is OperatingPhase.STIMULATION:
            return self._go(cycle, OperatingPhase.CHARGING, "stimulation_complete")
        return None

    def reset(self):
        self.phase = OperatingPhase.CHARGING
        self.expect_data = True
        self.data_end = None


def phase_controller(notches: Sequence[int], packet_len_bits: int = PACKET_BITS,
                     stim_cycles: int = 1) -> list[PhaseChange]:
    """Phase timeline for a list of notch cycles.

    ``stim_cycles`` is how long each stimulation takes to complete.
    """
    if list(notches) != sorted(notches):
        raise ValueError("notch events must be ordered in time")
    fsm = PhaseController(packet_len_bits)
    pending = list(notches)
    stim_end = None
    events: list[PhaseChange] = []
    while pending or fsm.phase is not OperatingPhase.CHARGING:
        nxt = pending[0] if pending else None
        if fsm.phase is OperatingPhase.DATA and (nxt is None or fsm.data_end <= nxt):
            events.append(fsm.tick(fsm.data_end))
            continue
        if fsm.phase is OperatingPhase.STIMULATION and (nxt is None or stim_end <= nxt):
            events.append(fsm.stimulation_done(stim_end))
            continue
        n = pending.pop(0)
        ch = fsm.notch(n)
        events.append(ch)
        if ch.phase is OperatingPhase.STIMULATION:
            stim_end = n + stim_cycles
    return events


def _window_means(samples: np.ndarray, n_bits: int, cycles_per_bit: int) -> np.ndarray:
    lo, hi = cycles_per_bit // 4, 3 * cycles_per_bit // 4
    w = samples[:n_bits * cycles_per_bit].reshape(n_bits, cycles_per_bit)
    return w[:, lo:hi].mean(axis=1)


def calibrate_threshold(preamble_envelope: Sequence[float], pattern: Sequence[int] = PREAMBLE,
                        cycles_per_bit: int = CYCLES_PER_BIT, min_contrast: float = 0.05) -> float:
    """Slicing threshold from the preamble: midpoint of the high and low plateaus.

    Each plateau level is the centre-half average of its bit windows (the
    low-pass + track-and-hold). Raises CalibrationError when the two levels
    are within ``min_contrast`` of the high level.
    """
    x = np.asarray(preamble_envelope, dtype=float)
    n = len(pattern)
    if x.size < n * cycles_per_bit:
        raise CalibrationError("preamble shorter than its pattern")
    means = _window_means(x, n, cycles_per_bit)
    pat = np.asarray(pattern, dtype=bool)
    if pat.all() or not pat.any():
        raise CalibrationError("preamble pattern needs both levels")
    hi, lo = means[pat].mean(), means[~pat].mean()
    if hi <= 0 or hi - lo < min_contrast * hi:
        raise CalibrationError(f"flat preamble (high={hi:.4g} V, low={lo:.4g} V)")
    return float(0.5 * (hi + lo))


def demodulate(envelope: Sequence[float], clock: RecoveredClock | None, threshold: float,
               cycles_per_bit: int = CYCLES_PER_BIT, n_bits: int | None = None) -> list[int]:
    """One bit per 64-cycle window: centre-half mean above ``threshold``."""
    if clock is None:
        raise ValueError("demodulation needs a locked clock")
    x = np.asarray(envelope, dtype=float)
    if n_bits is None:
        n_bits = x.size // cycles_per_bit
    return [int(m > threshold) for m in _window_means(x, n_bits, cycles_per_bit)]


@dataclass
class Reception:
    bits: list[int] | None
    packet: Packet | None
    threshold: float | None
    error: str | None = None


def receive_packet(samples: Sequence[float], clock: RecoveredClock | None,
                   n_bits: int = PACKET_BITS) -> Reception:
    """Calibrate on the preamble, slice every bit, then frame-check and decode."""
    x = np.asarray(samples, dtype=float)
    if x.size < n_bits * CYCLES_PER_BIT:
        return Reception(None, None, None, "short_frame")
    try:
        th = calibrate_threshold(x[:len(PREAMBLE) * CYCLES_PER_BIT])
    except CalibrationError as exc:
        return Reception(None, None, None, f"calibration_failed: {exc}")
    bits = demodulate(x, clock, th, n_bits=n_bits)
    try:
        pkt = decode_packet(bits)
    except FrameError as exc:
        return Reception(bits, None, th, f"frame_error: {exc}")
    return Reception(bits, pkt, th)
