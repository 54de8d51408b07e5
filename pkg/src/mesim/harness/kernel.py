"""Cycle-stepped simulation kernel.

One step is one carrier cycle. Every implant advances through the same
cycle before the next one starts; sub-cycle timing (the recovered clock's
phase offset) is carried as a per-implant annotation on event timestamps.
"""

from __future__ import annotations

import math

import numpy as np

from ..channel import Scene
from ..constants import CLOCK_LOCK_AMPLITUDE
from ..downlink import (PACKET_BITS, OperatingPhase, PhaseController, RecoveredClock,
                        clock_phase_offset, encode_packet, format_bits, id_str, receive_packet)
from ..identity import DeviceId, RegisterFile, generate_id, update_registers
from ..powerpath import (PowerState, PresenceDetector, RegulationTarget, Watchdog, available_power,
                         por_check, quiescent_drain, rectify_step, scpc_step, update_supplies)
from ..stimengine import LoadModel, StimulusRun, decode_settings, waveform_array
from .scenario import Scenario, build_schedule
from .trace import ImplantTrace, TraceBundle

TRACE_COLUMNS = ("t", "v_me", "v_rect", "v_store", "v_dd_h", "v_dd_l", "phase", "v_load")
PHASE_CODE = {OperatingPhase.CHARGING: 0, OperatingPhase.DATA: 1, OperatingPhase.STIMULATION: 2}
LEDGER_TOL = 1e-9


class InvariantViolation(RuntimeError):
    def __init__(self, invariant, cycle, detail):
        self.invariant = invariant
        self.cycle = cycle
        super().__init__(f"invariant '{invariant}' violated at cycle {cycle}: {detail}")


class _Implant:
    def __init__(self, k, cfg, scenario: Scenario, envelope, seed):
        self.k = k
        self.cfg = cfg
        self.name = cfg.name
        self.env = envelope
        self.T = 1.0 / scenario.coil.carrier_freq
        self.rc = scenario.power.rect_rc
        self.r_src = scenario.film.source_resistance
        self.eta_conv = scenario.power.converter_efficiency
        self.pw_total = scenario.power.pulse_width_total
        self.power = PowerState(scenario.power.c_store)
        self.presence = PresenceDetector(scenario.power.presence_ratio)
        self.wd = Watchdog()
        self.fsm = PhaseController(PACKET_BITS)
        self.offset = clock_phase_offset(((int(seed) & 0xFFFFFF) << 8) | k)
        self.clock = None
        self.device_id = None
        self.por_count = 0
        self.rf = RegisterFile()
        self.load = LoadModel(cfg.load_resistance, cfg.series_capacitance)
        self.buffer = []
        self.run = None
        self.waveforms = []
        self.stim_summaries = []
        self.accepted = []
        self.q_energy = 0.0
        self.q_cycles = 0
        self.max_overshoot = 0.0
        self.events = []
        self.trace = np.zeros((len(envelope), len(TRACE_COLUMNS)))
        self._target_amp = None
        self._target = RegulationTarget(0.0)

    def _ev(self, n, kind, **kw):
        self.events.append({"t": n * self.T + self.offset, "cycle": n, "source": self.name,
                            "kind": kind, **kw})

    def _settings(self):
        return decode_settings(self.rf, self.cfg.ref_error, self.pw_total)

    def _end_run(self, n, aborted=False):
        run = self.run
        w = run.wave
        if w.v_store_end is None:
            w.v_store_end = self.power.v_store
        summ = {**w.summary(), "amplitude": run.settings.amplitude,
                "pulse_width": run.settings.pulse_width, "delay": run.settings.delay,
                "mode": run.settings.mode, "aborted": aborted}
        self.stim_summaries.append(summ)
        self.waveforms.append(waveform_array(w))
        self.load = run.load if not aborted else LoadModel(self.load.resistance,
                                                            self.load.series_capacitance)
        self.run = None
        self._ev(n, "stim_done", index=len(self.stim_summaries) - 1, aborted=aborted,
                 delivered=w.energy_delivered, v_store_start=w.v_store_start,
                 v_store_end=w.v_store_end)

    def _finish_data(self, n):
        rec = receive_packet(self.buffer, self.clock)
        self.buffer = []
        if rec.packet is None:
            self._ev(n, "packet_error", error=rec.error,
                     bits=format_bits(rec.bits) if rec.bits else None)
            return
        dump = format_bits(rec.bits)
        self.rf, ok = update_registers(self.rf, rec.packet, self.device_id)
        if ok:
            self.accepted.append(rec.packet.payload.to_dict())
            self._ev(n, "packet_accepted", bits=dump, id=id_str(rec.packet.device_id),
                     registers=self.rf.to_dict())
        else:
            self._ev(n, "packet_rejected", bits=dump, id=id_str(rec.packet.device_id),
                     reason="id_mismatch")

    def _notch(self, n):
        self._ev(n, "notch_rx")
        was = self.fsm.phase
        ch = self.fsm.notch(n)
        self._ev(n, "phase", phase=ch.phase.value, reason=ch.reason)
        if ch.reason == "protocol_violation":
            self._ev(n, "protocol_violation", detail="notch during stimulation")
            if self.run is not None:
                self._end_run(n, aborted=True)
            return
        if ch.phase is OperatingPhase.DATA:
            self.buffer = []
        elif ch.phase is OperatingPhase.STIMULATION:
            if was is OperatingPhase.DATA:
                self.buffer = []
                self._ev(n, "data_phase_aborted")
            s = self._settings()
            self.run = StimulusRun(s, self.load, 1.0 / self.T, t0=n * self.T)
            self._ev(n, "stim_armed", amplitude=s.amplitude, pulse_width=s.pulse_width,
                     delay=s.delay, mode=s.mode)

    def _brownout(self, n):
        self._ev(n, "brownout", v_dd_l=self.power.v_dd_l)
        if self.run is not None:
            self._end_run(n, aborted=True)
        self.device_id = None
        self.rf = RegisterFile()
        self.fsm.reset()
        self.buffer = []

    def step(self, n):
        T = self.T
        st = self.power
        env = float(self.env[n])
        st.v_rect = rectify_step(env, st.v_rect, T, self.rc)
        notch = self.wd.step(self.presence.step(env))
        if self.clock is None and env >= CLOCK_LOCK_AMPLITUDE:
            self.clock = RecoveredClock(n, self.offset, 1.0 / T)
            self._ev(n, "clock_lock", phase_offset=self.offset)
        update_supplies(st)
        por = por_check(st)
        if por == "por":
            self.por_count += 1
            self.device_id = (DeviceId(self.cfg.fixed_id) if self.cfg.fixed_id is not None
                              else generate_id(self.cfg.device_seed, True, por_count=self.por_count))
            self.rf = RegisterFile()
            self.fsm.reset()
            self._ev(n, "por", id=id_str(self.device_id.bits))
        elif por == "brownout":
            self._brownout(n)

        v_load = 0.0
        driving = False
        if st.por_fired and self.clock is not None:
            ch = self.fsm.tick(n)
            if ch is not None:
                self._ev(n, "phase", phase=ch.phase.value, reason=ch.reason)
                self._finish_data(n)
            if notch:
                self._notch(n)
            if self.fsm.phase is OperatingPhase.DATA:
                self.buffer.append(env)
            run = self.run
            if run is not None:
                driving = run.driving()
                ev = run.step(st, self.offset)
                v_load = run.wave.v_load[-1]
                if ev:
                    self._ev(n, ev.pop("kind"), **ev)
                if run.k == run.delay_cycles + 1:
                    self._ev(n, "stim_onset", onset=run.wave.onset, amplitude=run.settings.amplitude,
                             driven=run.drive)
                    self.events[-1]["t"] = run.wave.onset
                if run.done:
                    self._end_run(n)
                    ch = self.fsm.stimulation_done(n)
                    if ch is not None:
                        self._ev(n, "phase", phase=ch.phase.value, reason=ch.reason)

        p_av = available_power(env, self.r_src)
        if st.por_fired and not driving:
            before = st.energy_out
            quiescent_drain(st, T, False, p_av)
            self.q_energy += st.energy_out - before
            self.q_cycles += 1
        amp = self.rf.amp_code
        if amp != self._target_amp:
            self._target_amp = amp
            self._target = RegulationTarget(self._settings().amplitude)
        v0 = st.v_store
        scpc_step(st, T, self._target, p_av, self.eta_conv, enabled=not driving)
        vt = self._target.v_supply_target
        if st.v_store > v0 and st.v_store > vt + 1e-9:
            raise InvariantViolation("regulation_ceiling", n,
                                     f"{self.name}: v_store {st.v_store:.6g} V above target {vt:.6g} V")
        self.max_overshoot = max(self.max_overshoot, st.v_store - vt)
        scale = max(st.energy_in, st.stored_energy, 1e-12)
        if abs(st.ledger_residual()) > LEDGER_TOL * scale or not math.isfinite(st.v_store):
            raise InvariantViolation("energy_ledger", n,
                                     f"{self.name}: residual {st.ledger_residual():.3e} J")
        self.trace[n] = (n * T, env, st.v_rect, st.v_store, st.v_dd_h, st.v_dd_l,
                         PHASE_CODE[self.fsm.phase], v_load)


def _tx_events(scenario: Scenario, schedule):
    T = 1.0 / schedule.carrier_freq
    offs = schedule.segment_offsets()
    starts = schedule.cycle_starts + [len(schedule.segments)]
    events = []
    for k, plan in enumerate(scenario.schedule.cycles):
        seen_notch = 0
        for j in range(starts[k], starts[k + 1]):
            seg, n = schedule.segments[j], offs[j]
            if seg.kind == "notch":
                seen_notch += 1
                events.append({"t": n * T, "cycle": n, "source": "tx", "kind": "notch_tx",
                               "op_cycle": k, "index": seen_notch})
            elif seg.kind == "bit" and schedule.segments[j - 1].kind == "notch":
                p = plan.packet
                events.append({"t": n * T, "cycle": n, "source": "tx", "kind": "packet_sent",
                               "op_cycle": k, "id": id_str(p.device_id),
                               "bits": format_bits(encode_packet(p)), "payload": p.payload.to_dict()})
    return events


def run(scenario: Scenario, seed: int | None = None, trace_decimation: int | None = None) -> TraceBundle:
    """Simulate the whole scenario; deterministic in (scenario, seed)."""
    seed = scenario.seed if seed is None else int(seed)
    dec = trace_decimation or scenario.trace_decimation
    schedule = build_schedule(scenario)
    scene = Scene(scenario.coil, scenario.film, scenario.poses, scenario.tables,
                  scenario.tissue_attenuation, schedule)
    implants = [_Implant(k, cfg, scenario, scene.envelope(k), seed)
                for k, cfg in enumerate(scenario.implants)]
    n_cycles = schedule.total_cycles
    for n in range(n_cycles):
        for im in implants:
            im.step(n)

    events = _tx_events(scenario, schedule)
    order = {"tx": 0, **{im.name: k + 1 for k, im in enumerate(implants)}}
    for im in implants:
        events.extend(im.events)
    events = [e for _, e in sorted(enumerate(events),
                                   key=lambda p: (p[1]["t"], order[p[1]["source"]], p[0]))]
    for k, e in enumerate(events):
        e["seq"] = k

    traces = []
    for im in implants:
        traces.append(ImplantTrace(
            name=im.name,
            device_id=id_str(im.device_id.bits) if im.device_id is not None else None,
            expected_id=id_str(im.cfg.expected_id()),
            clock_offset=im.offset,
            lock_cycle=im.clock.lock_index if im.clock is not None else None,
            amplitude=scene.settled_amplitude(im.k),
            ledger=im.power.ledger(),
            quiescent={"energy": im.q_energy, "time": im.q_cycles * im.T},
            max_overshoot=im.max_overshoot,
            stim_summaries=im.stim_summaries,
            accepted_payloads=im.accepted,
            registers=im.rf.to_dict(),
            trace=im.trace,
            waveforms=im.waveforms,
        ))
    meta = {
        "scenario": scenario.name,
        "seed": seed,
        "carrier_freq": schedule.carrier_freq,
        "n_cycles": n_cycles,
        "duration": schedule.duration,
        "trace_columns": list(TRACE_COLUMNS),
        "trace_decimation": dec,
    }
    bundle = TraceBundle(meta=meta, events=events, implants=traces, scenario=scenario.raw)
    from .metrics import metrics
    bundle.metrics = metrics(bundle)
    return bundle
