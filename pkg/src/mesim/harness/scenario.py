"""Scenario files (JSON, ``schema_version`` 1) and their validation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..channel import (CoilSpec, FieldSchedule, MEFilmSpec, MisalignmentTables, Pose, Segment,
                       calibrate_drive, drive_for_field)
from ..constants import CARRIER_FREQ, CYCLES_PER_BIT, NOTCH_CYCLES
from ..downlink import PACKET_BITS, Packet, id_str, modulate, parse_id
from ..identity import generate_id
from ..powerpath import CONVERTER_EFFICIENCY
from .cstore import C_STORE

SCHEMA_VERSION = 1
DEFAULT_CALIBRATION = {"distance": 0.04, "voltage": 1.5}
GOLDEN_DIR = Path(__file__).resolve().parent.parent / "goldens"


class ScenarioError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


@dataclass
class ImplantConfig:
    name: str
    pose: Pose
    device_seed: int = 0
    fixed_id: int | None = None
    ref_error: float = 0.0
    load_resistance: float = 1000.0
    series_capacitance: float | None = None

    def expected_id(self, noise_sigma=None) -> int:
        if self.fixed_id is not None:
            return self.fixed_id
        return generate_id(self.device_seed, True).bits


@dataclass
class CyclePlan:
    packet: Packet | None = None
    amplitude_scale: float = 1.0
    charge_cycles: int | None = None
    guard_cycles: int | None = None
    stim_cycles: int | None = None
    period: float | None = None


@dataclass
class SchedulePlan:
    ask_depth: float = 0.5
    startup_cycles: int = 6600
    charge_cycles: int = 3300
    guard_cycles: int = 330
    stim_cycles: int = 1650
    tail_cycles: int = 330
    allow_trigger_only: bool = False
    cycles: list[CyclePlan] = field(default_factory=list)


@dataclass
class PowerConfig:
    c_store: float = C_STORE
    converter_efficiency: float = CONVERTER_EFFICIENCY
    rect_rc: float = 20e-6
    presence_ratio: float = 0.25
    pulse_width_total: bool = False


@dataclass
class Scenario:
    name: str
    coil: CoilSpec
    film: MEFilmSpec
    implants: list[ImplantConfig]
    schedule: SchedulePlan
    tables: MisalignmentTables = field(default_factory=MisalignmentTables)
    tissue_attenuation: float = 1.0
    power: PowerConfig = field(default_factory=PowerConfig)
    seed: int = 0
    allow_collisions: bool = False
    trace_decimation: int = 10
    duration: float | None = None
    step_resolution: float | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def poses(self):
        return [im.pose for im in self.implants]


def _segment_cycles(plan: SchedulePlan, c: CyclePlan, errors=None, k=0):
    guard = c.guard_cycles if c.guard_cycles is not None else plan.guard_cycles
    stim = c.stim_cycles if c.stim_cycles is not None else plan.stim_cycles
    bits = PACKET_BITS * CYCLES_PER_BIT if c.packet is not None else 0
    if c.period is not None:
        charge = int(round(c.period * CARRIER_FREQ)) - (2 * NOTCH_CYCLES + bits + guard + stim)
        if charge <= 0 and errors is not None:
            errors.append(f"schedule.cycles[{k}]: period {c.period} s too short for its segments")
    else:
        charge = c.charge_cycles if c.charge_cycles is not None else plan.charge_cycles
    return charge, guard, stim


def build_schedule(sc: Scenario) -> FieldSchedule:
    plan = sc.schedule
    sched = FieldSchedule()
    if plan.startup_cycles:
        scale0 = plan.cycles[0].amplitude_scale if plan.cycles else 1.0
        sched.segments.append(Segment("charge", plan.startup_cycles, scale0))
    for c in plan.cycles:
        charge, guard, stim = _segment_cycles(plan, c)
        pk = [c.packet] if c.packet is not None else []
        sched.extend(modulate(pk, plan.ask_depth, charge_cycles=charge, guard_cycles=guard,
                              stim_cycles=stim, amplitude=c.amplitude_scale))
    tail = plan.tail_cycles
    if sc.duration is not None:
        want = int(round(sc.duration * sc.coil.carrier_freq))
        tail = want - sched.total_cycles
        if tail < 0:
            raise ScenarioError([f"duration: schedule needs {sched.total_cycles} cycles, "
                                 f"duration allows {want}"])
    if tail:
        scale = plan.cycles[-1].amplitude_scale if plan.cycles else 1.0
        sched.segments.append(Segment("charge", tail, scale))
    return sched.validate()


def _get(d, key, default, errors, path, kind=float, check=None, msg=None):
    if key not in d or d[key] is None:
        return default
    try:
        v = kind(d[key])
    except (TypeError, ValueError):
        errors.append(f"{path}.{key}: expected {kind.__name__}, got {d[key]!r}")
        return default
    if check is not None and not check(v):
        errors.append(f"{path}.{key}: {msg or 'out of range'} (got {v!r})")
        return default
    return v


def scenario_from_dict(d: dict) -> Scenario:
    errors: list[str] = []
    if d.get("schema_version") != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
    known = {"schema_version", "name", "description", "seed", "coil", "calibration", "film",
             "gain_tables", "tissue_attenuation", "power", "implants", "schedule",
             "allow_collisions", "trace_decimation", "expected", "duration",
             "step_resolution"}
    for k in d:
        if k not in known:
            errors.append(f"{k}: unknown field")

    cd = d.get("coil", {}) or {}
    pos = lambda v: v > 0
    coil_kw = dict(
        radius=_get(cd, "radius", 0.03, errors, "coil", check=pos, msg="must be > 0"),
        turns=_get(cd, "turns", 8, errors, "coil", int, check=pos, msg="must be > 0"),
        carrier_freq=_get(cd, "carrier_freq", CARRIER_FREQ, errors, "coil", check=pos, msg="must be > 0"),
        drive_current_peak=_get(cd, "drive_current_peak", 0.0, errors, "coil",
                                check=lambda v: v >= 0, msg="must be >= 0"),
    )
    fd = d.get("film", {}) or {}
    film = MEFilmSpec()
    try:
        film = MEFilmSpec(**{k: float(v) for k, v in fd.items()})
    except (TypeError, ValueError) as exc:
        errors.append(f"film: {exc}")

    tissue = _get(d, "tissue_attenuation", 1.0, errors, "", check=lambda v: 0 < v <= 1,
                  msg="must lie in (0, 1]")
    tables = MisalignmentTables()
    try:
        tables = MisalignmentTables.from_dict(d.get("gain_tables"))
    except (TypeError, ValueError) as exc:
        errors.append(f"gain_tables: {exc}")

    cal = d.get("calibration")
    if cal is None and not cd.get("drive_current_peak"):
        cal = dict(DEFAULT_CALIBRATION)
    if cal:
        try:
            base = CoilSpec(**{**coil_kw, "drive_current_peak": 0.0})
            if "voltage" in cal:
                coil_kw["drive_current_peak"] = calibrate_drive(base, film, float(cal["distance"]),
                                                                float(cal["voltage"]), tissue)
            elif "field_oe" in cal:
                coil_kw["drive_current_peak"] = drive_for_field(base, float(cal["distance"]),
                                                                float(cal["field_oe"]))
            else:
                errors.append("calibration: needs 'voltage' or 'field_oe'")
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"calibration: {exc}")
    coil = CoilSpec(**coil_kw) if not errors else CoilSpec()
    if coil.drive_current_peak <= 0 and not errors:
        errors.append("coil: no drive current (set drive_current_peak or calibration)")

    implants = []
    raw_imps = d.get("implants") or []
    if not raw_imps:
        errors.append("implants: at least one implant required")
    for i, im in enumerate(raw_imps):
        path = f"implants[{i}]"
        try:
            pose = Pose(**{k: float(v) for k, v in (im.get("pose") or {}).items()})
        except (TypeError, ValueError) as exc:
            errors.append(f"{path}.pose: {exc}")
            continue
        fixed = None
        if im.get("id") is not None:
            try:
                fixed = parse_id(im["id"])
            except ValueError as exc:
                errors.append(f"{path}.id: {exc}")
        load = im.get("load") or {}
        implants.append(ImplantConfig(
            name=str(im.get("name", f"implant{i}")),
            pose=pose,
            device_seed=_get(im, "device_seed", i, errors, path, int),
            fixed_id=fixed,
            ref_error=_get(im, "ref_error", 0.0, errors, path, check=lambda v: abs(v) < 0.5),
            load_resistance=_get(load, "resistance", 1000.0, errors, path + ".load", check=pos,
                                 msg="must be > 0"),
            series_capacitance=_get(load, "series_capacitance", None, errors, path + ".load",
                                    check=pos, msg="must be > 0"),
        ))
    names = [im.name for im in implants]
    if len(set(names)) != len(names):
        errors.append("implants: names must be unique")
    for i in range(len(implants)):
        for j in range(i + 1, len(implants)):
            if all(math.isclose(a, b) for a, b in zip(implants[i].pose.position, implants[j].pose.position)):
                errors.append(f"implants[{i}] and implants[{j}] are coincident")
    if not d.get("allow_collisions", False):
        seen = {}
        for im in implants:
            dev = im.expected_id()
            if dev in seen:
                errors.append(f"implants {seen[dev]!r} and {im.name!r} share id {id_str(dev)}"
                              " (set allow_collisions to permit)")
            seen.setdefault(dev, im.name)

    sd = d.get("schedule") or {}
    plan = SchedulePlan(
        ask_depth=_get(sd, "ask_depth", 0.5, errors, "schedule", check=lambda v: 0 < v < 0.75,
                       msg="must lie in (0, 0.75) so low bits never read as a notch"),
        startup_cycles=_get(sd, "startup_cycles", 6600, errors, "schedule", int, check=lambda v: v >= 0),
        charge_cycles=_get(sd, "charge_cycles", 3300, errors, "schedule", int, check=pos),
        guard_cycles=_get(sd, "guard_cycles", 330, errors, "schedule", int, check=pos),
        stim_cycles=_get(sd, "stim_cycles", 1650, errors, "schedule", int, check=pos),
        tail_cycles=_get(sd, "tail_cycles", 330, errors, "schedule", int, check=lambda v: v >= 0),
        allow_trigger_only=bool(sd.get("allow_trigger_only", False)),
    )
    for k, c in enumerate(sd.get("cycles") or []):
        path = f"schedule.cycles[{k}]"
        pkt = None
        if c.get("packet") is not None:
            try:
                pkt = Packet.from_dict(c["packet"])
            except (KeyError, TypeError, ValueError) as exc:
                errors.append(f"{path}.packet: {exc}")
        elif not plan.allow_trigger_only:
            errors.append(f"{path}: trigger-only cycle needs schedule.allow_trigger_only")
        cp = CyclePlan(
            packet=pkt,
            amplitude_scale=_get(c, "amplitude_scale", 1.0, errors, path, check=lambda v: v >= 0),
            charge_cycles=_get(c, "charge_cycles", None, errors, path, int, check=pos),
            guard_cycles=_get(c, "guard_cycles", None, errors, path, int, check=pos),
            stim_cycles=_get(c, "stim_cycles", None, errors, path, int, check=pos),
            period=_get(c, "period", None, errors, path, check=pos),
        )
        _, guard, _ = _segment_cycles(plan, cp, errors, k)
        if pkt is None and guard >= PACKET_BITS * CYCLES_PER_BIT:
            errors.append(f"{path}: trigger-only cycle needs a guard shorter than one packet "
                          f"({PACKET_BITS * CYCLES_PER_BIT} cycles) so its second notch ends the data phase")
        repeat = _get(c, "repeat", 1, errors, path, int, check=pos)
        plan.cycles.extend(CyclePlan(**vars(cp)) for _ in range(repeat))

    pd = d.get("power") or {}
    power = PowerConfig(
        c_store=_get(pd, "c_store", C_STORE, errors, "power", check=pos),
        converter_efficiency=_get(pd, "converter_efficiency", CONVERTER_EFFICIENCY, errors, "power",
                                  check=lambda v: 0 < v <= 1),
        rect_rc=_get(pd, "rect_rc", 20e-6, errors, "power", check=pos),
        presence_ratio=_get(pd, "presence_ratio", 0.25, errors, "power", check=lambda v: 0 < v < 1),
        pulse_width_total=bool(pd.get("pulse_width_total", False)),
    )
    if plan.ask_depth >= 1 - power.presence_ratio:
        errors.append("schedule.ask_depth: low level would fall under the notch-detect ratio")

    dec = _get(d, "trace_decimation", 10, errors, "", int, check=pos)
    duration = _get(d, "duration", None, errors, "", check=pos, msg="must be > 0")
    step = _get(d, "step_resolution", None, errors, "", check=pos, msg="must be > 0")
    if step is not None:
        k = 1.0 / (coil.carrier_freq * step)
        if abs(k - round(k)) > 1e-6:
            errors.append(f"step_resolution: {step} s does not divide the carrier period")
        elif round(k) != 1:
            errors.append("step_resolution: only whole carrier-cycle steps are supported")
    if errors:
        raise ScenarioError(errors)
    return Scenario(
        name=str(d.get("name", "scenario")), coil=coil, film=film, implants=implants,
        schedule=plan, tables=tables, tissue_attenuation=tissue, power=power,
        seed=int(d.get("seed", 0)), allow_collisions=bool(d.get("allow_collisions", False)),
        trace_decimation=dec, duration=duration, step_resolution=step, raw=d,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path}: not valid JSON ({exc})"]) from exc
    return scenario_from_dict(d)


def golden_path(name: str) -> Path:
    return GOLDEN_DIR / f"{name}.json"


def load_golden(name: str) -> Scenario:
    return load_scenario(golden_path(name))
