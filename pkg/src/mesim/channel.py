"""ME channel: TX field schedule + implant pose -> open-circuit ME voltage envelope.

The on-axis field of the TX loop is closed form. Everything off-axis (tilt,
lateral displacement, neighbouring films) is folded in as multiplicative gain
factors read from measured-style knot tables, and the transducer ring-up is a
first-order lag of ``ringup_cycles / 3`` carrier periods.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.constants import mu_0
from scipy.interpolate import PchipInterpolator
from scipy.signal import lfilter

from .constants import CARRIER_FREQ, OE_PER_TESLA

log = logging.getLogger(__name__)

# Pairwise spacing below which a neighbouring film starts to steal flux.
COUPLING_SPACING = 8e-3
COUPLING_MAX_LOSS = 0.03


@dataclass(frozen=True)
class CoilSpec:
    radius: float = 0.03
    turns: int = 8
    drive_current_peak: float = 0.0
    carrier_freq: float = CARRIER_FREQ

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("coil radius must be positive")
        if self.carrier_freq <= 0:
            raise ValueError("carrier frequency must be positive")
        if self.drive_current_peak < 0:
            raise ValueError("drive current must be non-negative")


@dataclass(frozen=True)
class MEFilmSpec:
    length: float = 3e-3
    width: float = 2e-3
    resonant_freq: float = CARRIER_FREQ
    source_resistance: float = 800.0
    voltage_coefficient: float = 0.75  # V amplitude per Oe
    ringup_cycles: float = 15.0

    def __post_init__(self):
        for name in ("length", "width", "resonant_freq", "source_resistance",
                     "voltage_coefficient", "ringup_cycles"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # >7 Vpp at 5 Oe
        if self.voltage_coefficient * 5.0 < 3.5:
            raise ValueError("voltage_coefficient too small: 5 Oe must give >= 3.5 V amplitude")

    @property
    def tau(self) -> float:
        """Ring-up time constant in seconds (3 tau == ringup_cycles)."""
        return self.ringup_cycles / 3.0 / self.resonant_freq

    @property
    def volume(self) -> float:
        return self.length * self.width * 0.2e-3


@dataclass(frozen=True)
class Pose:
    """Implant placement relative to the TX coil (coil centre at the origin).

    ``azimuth`` only gives the direction of the lateral offset; it matters for
    inter-film spacing, not for the received voltage.
    """

    axial_distance: float
    lateral_offset: float = 0.0
    theta_xz: float = 0.0
    theta_yz: float = 0.0
    theta_z: float = 0.0
    azimuth: float = 0.0

    def __post_init__(self):
        if self.axial_distance < 0:
            raise ValueError(f"axial_distance must be >= 0, got {self.axial_distance}")
        if self.lateral_offset < 0:
            raise ValueError(f"lateral_offset must be >= 0, got {self.lateral_offset}")
        for name in ("theta_xz", "theta_yz", "theta_z"):
            _check_angle(getattr(self, name), name)

    @property
    def position(self) -> np.ndarray:
        phi = math.radians(self.azimuth)
        return np.array([self.lateral_offset * math.cos(phi),
                         self.lateral_offset * math.sin(phi),
                         self.axial_distance])


def _check_angle(theta, name="angle"):
    if not 0.0 <= theta <= 90.0:
        raise ValueError(f"{name} must lie in [0, 90] degrees, got {theta}")


class GainTable:
    """Monotone nonincreasing gain curve over an angle or offset.

    Interpolation is shape-preserving (PCHIP) so it never overshoots the
    knots. Beyond the last knot the gain is clamped to the last value.
    """

    def __init__(self, knots: Sequence[Sequence[float]]):
        knots = sorted((float(x), float(g)) for x, g in knots)
        xs = np.array([k[0] for k in knots])
        gs = np.array([k[1] for k in knots])
        if len(xs) < 2:
            raise ValueError("gain table needs at least two knots")
        if xs[0] != 0.0 or gs[0] != 1.0:
            raise ValueError("gain table must start at (0, 1.0)")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("gain table knots must have distinct arguments")
        if np.any(gs < 0) or np.any(gs > 1):
            raise ValueError("gains must lie in [0, 1]")
        if np.any(np.diff(gs) > 0):
            raise ValueError("gain table must be nonincreasing")
        self.knots = tuple(zip(xs.tolist(), gs.tolist()))
        self._xs = xs
        self._interp = PchipInterpolator(xs, gs, extrapolate=False)

    @property
    def span(self) -> float:
        return float(self._xs[-1])

    def covers(self, x: float) -> bool:
        return 0.0 <= x <= self.span

    def __call__(self, x: float) -> float:
        if x < 0:
            raise ValueError("gain table argument must be >= 0")
        if x >= self.span:
            return self.knots[-1][1]
        return float(np.clip(self._interp(x), 0.0, 1.0))

    def to_list(self):
        return [list(k) for k in self.knots]

    def __repr__(self):
        return f"GainTable({list(self.knots)})"

    def __eq__(self, other):
        return isinstance(other, GainTable) and self.knots == other.knots


DEFAULT_XZ_KNOTS = [(0, 1.0), (30, 0.95), (60, 0.80), (90, 0.35)]
DEFAULT_YZ_KNOTS = [(0, 1.0), (30, 0.92), (40, 0.85), (50, 0.805), (60, 0.80), (90, 0.30)]
DEFAULT_LATERAL_KNOTS = [(0.0, 1.0), (0.005, 0.98), (0.010, 0.93), (0.015, 0.82),
                         (0.020, 0.65), (0.030, 0.40)]


@dataclass(frozen=True)
class MisalignmentTables:
    xz: GainTable = field(default_factory=lambda: GainTable(DEFAULT_XZ_KNOTS))
    yz: GainTable = field(default_factory=lambda: GainTable(DEFAULT_YZ_KNOTS))
    lateral: GainTable = field(default_factory=lambda: GainTable(DEFAULT_LATERAL_KNOTS))

    @classmethod
    def from_dict(cls, d):
        kw = {k: GainTable(v) for k, v in (d or {}).items() if k in ("xz", "yz", "lateral")}
        return cls(**kw)

    def to_dict(self):
        return {"xz": self.xz.to_list(), "yz": self.yz.to_list(), "lateral": self.lateral.to_list()}


def coil_field(coil: CoilSpec, pose: Pose, current: float | None = None) -> float:
    """On-axis field magnitude of a circular loop, in oersted.

    B(z) = mu0 N I R^2 / (2 (R^2 + z^2)^1.5). ``current`` defaults to the coil's
    peak drive current.
    """
    if current is None:
        current = coil.drive_current_peak
    r2 = coil.radius ** 2
    z = pose.axial_distance
    b = mu_0 * coil.turns * current * r2 / (2.0 * (r2 + z * z) ** 1.5)
    return b * OE_PER_TESLA


def angular_gain(tables, theta_xz: float, theta_yz: float, theta_z: float = 0.0) -> float:
    """Product of per-plane tilt gains.

    ``tables`` is a MisalignmentTables or a single GainTable used for both
    planes. Rotation about the film's long axis (theta_z) is accepted and
    ignored: the coil field is axially symmetric.
    """
    _check_angle(theta_xz, "theta_xz")
    _check_angle(theta_yz, "theta_yz")
    _check_angle(theta_z, "theta_z")
    if isinstance(tables, GainTable):
        xz = yz = tables
    else:
        xz, yz = tables.xz, tables.yz
    return xz(theta_xz) * yz(theta_yz)


def lateral_gain(table: GainTable, offset: float) -> float:
    if offset < 0:
        raise ValueError("lateral offset must be >= 0")
    if not table.covers(offset):
        log.warning("lateral offset %.4g m beyond gain table (%.4g m); clamped", offset, table.span)
    return table(offset)


def ringup_envelope(t_since_edge: float, film: MEFilmSpec, rising: bool = True) -> float:
    if t_since_edge < 0:
        raise ValueError("time since edge must be >= 0")
    decay = math.exp(-t_since_edge / film.tau)
    return 1.0 - decay if rising else decay


def coupling_perturbation(poses: Sequence[Pose]) -> list[float]:
    """Per-film flux loss from the nearest neighbour.

    Linear ramp from 1.0 at 8 mm spacing down to 0.97 at contact.
    """
    if not poses:
        raise ValueError("need at least one pose")
    pos = np.array([p.position for p in poses])
    out = []
    for i in range(len(poses)):
        d_min = math.inf
        for j in range(len(poses)):
            if i == j:
                continue
            d = float(np.linalg.norm(pos[i] - pos[j]))
            if d == 0.0:
                raise ValueError(f"implants {i} and {j} are coincident")
            d_min = min(d_min, d)
        if d_min >= COUPLING_SPACING:
            out.append(1.0)
        else:
            out.append(1.0 - COUPLING_MAX_LOSS * (1.0 - d_min / COUPLING_SPACING))
    return out


def calibrate_drive(coil: CoilSpec, film: MEFilmSpec, distance: float, voltage: float,
                    tissue_attenuation: float = 1.0) -> float:
    """Peak drive current giving ``voltage`` ME amplitude on-axis, aligned, at ``distance``."""
    per_amp = coil_field(coil, Pose(distance), 1.0) * film.voltage_coefficient * tissue_attenuation
    return voltage / per_amp


def drive_for_field(coil: CoilSpec, distance: float, field_oe: float) -> float:
    return field_oe / coil_field(coil, Pose(distance), 1.0)


# -- TX schedule -------------------------------------------------------------

SEGMENT_KINDS = ("charge", "notch", "bit", "guard", "stim")


@dataclass(frozen=True)
class Segment:
    kind: str
    cycles: int
    level: float
    bit: int | None = None

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.cycles <= 0:
            raise ValueError("segment must last at least one carrier cycle")
        if self.level < 0:
            raise ValueError("segment level must be >= 0")


@dataclass
class FieldSchedule:
    """TX carrier amplitude timeline, one entry per constant-level segment.

    Levels are relative to the calibrated drive (1.0 = full carrier, 0 = off).
    ``cycle_starts`` holds the index of the first segment of each operating
    cycle.
    """

    segments: list[Segment] = field(default_factory=list)
    cycle_starts: list[int] = field(default_factory=list)
    carrier_freq: float = CARRIER_FREQ

    @property
    def total_cycles(self) -> int:
        return sum(s.cycles for s in self.segments)

    @property
    def duration(self) -> float:
        return self.total_cycles / self.carrier_freq

    def extend(self, other: "FieldSchedule"):
        base = len(self.segments)
        self.segments.extend(other.segments)
        self.cycle_starts.extend(base + c for c in other.cycle_starts)
        return self

    def levels(self) -> np.ndarray:
        """Carrier level for every carrier cycle."""
        return np.repeat([s.level for s in self.segments], [s.cycles for s in self.segments])

    def segment_offsets(self) -> list[int]:
        offs, n = [], 0
        for s in self.segments:
            offs.append(n)
            n += s.cycles
        return offs

    def validate(self):
        bounds = self.cycle_starts + [len(self.segments)]
        for k in range(len(self.cycle_starts)):
            segs = self.segments[bounds[k]:bounds[k + 1]]
            notches = sum(1 for s in segs if s.kind == "notch")
            if notches != 2:
                raise ValueError(f"operating cycle {k} has {notches} notches, expected 2")
        return self

    def to_dict(self):
        return {
            "carrier_freq": self.carrier_freq,
            "cycle_starts": list(self.cycle_starts),
            "segments": [
                {"kind": s.kind, "cycles": s.cycles, "level": s.level,
                 **({"bit": s.bit} if s.bit is not None else {})}
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, d):
        segs = [Segment(s["kind"], int(s["cycles"]), float(s["level"]), s.get("bit"))
                for s in d["segments"]]
        return cls(segs, list(d.get("cycle_starts", [])), float(d.get("carrier_freq", CARRIER_FREQ)))


def schedule_response(schedule: FieldSchedule, film: MEFilmSpec) -> np.ndarray:
    """Normalized ME envelope sampled at the end of every carrier cycle.

    Exact discretisation of the first-order ring-up: with a = exp(-T/tau),
    y[n] = a*y[n-1] + (1-a)*level[n], starting from rest.
    """
    a = math.exp(-1.0 / (schedule.carrier_freq * film.tau))
    lv = schedule.levels().astype(float)
    if lv.size == 0:
        return lv
    return lfilter([1.0 - a], [1.0, -a], lv)


# -- scene -------------------------------------------------------------------

@dataclass
class Scene:
    coil: CoilSpec
    film: MEFilmSpec
    poses: list[Pose]
    tables: MisalignmentTables = field(default_factory=MisalignmentTables)
    tissue_attenuation: float = 1.0
    schedule: FieldSchedule | None = None

    def __post_init__(self):
        if not 0 < self.tissue_attenuation <= 1:
            raise ValueError("tissue attenuation must lie in (0, 1]")
        self._coupling = coupling_perturbation(self.poses)
        self._response = None

    def coupling(self, i):
        return self._coupling[i]

    def settled_amplitude(self, i: int, level: float = 1.0) -> float:
        """ME amplitude after ring-up for a constant carrier ``level``."""
        if not 0 <= i < len(self.poses):
            raise IndexError(f"unknown implant index {i}")
        p = self.poses[i]
        h = coil_field(self.coil, p) * self.tissue_attenuation
        g = angular_gain(self.tables, p.theta_xz, p.theta_yz, p.theta_z)
        g *= lateral_gain(self.tables.lateral, p.lateral_offset)
        return self.film.voltage_coefficient * h * g * self._coupling[i] * level

    def envelope(self, i: int) -> np.ndarray:
        """Per-cycle ME amplitude of implant ``i`` over the whole schedule."""
        if self.schedule is None:
            raise ValueError("scene has no schedule")
        if self._response is None:
            self._response = schedule_response(self.schedule, self.film)
        return self.settled_amplitude(i) * self._response


def received_voltage(scene: Scene, implant_index: int, t: float) -> float:
    """Open-circuit ME amplitude of one implant at time ``t`` (continuous)."""
    if scene.schedule is None:
        raise ValueError("scene has no schedule")
    sched = scene.schedule
    if not 0 <= t <= sched.duration:
        raise ValueError(f"t={t} outside schedule [0, {sched.duration}]")
    amp = scene.settled_amplitude(implant_index)
    T = 1.0 / sched.carrier_freq
    n = min(int(t / T), sched.total_cycles - 1)
    if scene._response is None:
        scene._response = schedule_response(sched, scene.film)
    y0 = scene._response[n - 1] if n > 0 else 0.0
    level = float(sched.levels()[n])
    y = level + (y0 - level) * math.exp(-(t - n * T) / scene.film.tau)
    return amp * y
