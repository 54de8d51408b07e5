"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line shown in the pytest terminal summary.
"""

import random
import time

import numpy as np
import pytest
from scipy.stats import norm

from mesim.channel import CoilSpec, MEFilmSpec, Pose, Scene
from mesim.constants import (BIT_DURATION, CYCLES_PER_BIT, DATA_CLOCK_FREQ,
                             DATA_RATE, MAX_CLOCK_SKEW, STIM_CLOCK_FREQ, STIM_CLOCK_PERIOD)
from mesim.downlink import (Packet, PayloadLayout, RecoveredClock, decode_packet, encode_packet, modulate,
                            receive_packet)
from mesim.harness.goldens import GOLDENS, fig19_region, simulated_system_efficiency
from mesim.harness.kernel import run
from mesim.harness.scenario import load_golden
from mesim.identity import PufCell, device_cells, generate_id, tmv, tmv_error
from mesim.linkbudget import figure_of_merit, max_safe_power, pte
from mesim.powerpath import PresenceDetector, watchdog
from mesim.stimengine import driver_efficiency, system_stimulation_efficiency


def test_1_addressability(acceptance, golden_results):
    sc = load_golden("fig17")
    t = time.perf_counter()
    bundle = run(sc)
    runtime = time.perf_counter() - t
    r = golden_results("fig17")
    amps = {n: m["stim_amplitudes"] for n, m in bundle.metrics["implants"].items()}
    ok = (r.ok and r.values["log"] == sc.raw["expected"]["log"] and runtime < 5.0
          and amps["A"][1] == 1.0 and amps["A"][2:] == [2.0, 2.0] and amps["B"][1:] == [2.0, 2.0, 2.0])
    assert acceptance(1, ok, f"A {amps['A']}, B {amps['B']}, exact log match, {runtime:.2f} s")


def test_2_regulation_droop(acceptance, golden_results):
    r = golden_results("fig14")
    v0, v1 = r.values["v_start"], r.values["v_end"]
    ok = abs(v0 - 2.75) <= 0.05 and abs(v1 - 2.15) <= 0.05
    assert acceptance(2, ok, f"regulated {v0:.4f} V, after pulse {v1:.4f} V")


def test_3_source_variation(acceptance, golden_results):
    r = golden_results("fig16")
    m = r.bundle.metrics["implants"]["A"]
    amps = m["stim_amplitudes"]
    worst = max(abs(a - 3.5) / 3.5 for a in amps)
    ok = r.ok and worst <= 0.02 and m["packet_errors"] == 0 and m["bit_errors"] == 0
    assert acceptance(3, ok, f"{len(amps)} stimuli, worst amplitude error {worst:.2%}, "
                             f"{m['packet_errors']} packet errors ({r.detail})")


def test_4_timing(acceptance):
    ok = (CYCLES_PER_BIT == 64 and BIT_DURATION == pytest.approx(193.94e-6, abs=0.01e-6)
          and abs(BIT_DURATION - 194e-6) < 0.1e-6
          and DATA_RATE == pytest.approx(5156.25, rel=1e-12) and round(DATA_RATE / 1e3, 2) == 5.16
          and DATA_CLOCK_FREQ == 10312.5 and STIM_CLOCK_FREQ == 82500.0)
    assert acceptance(4, ok, f"bit {BIT_DURATION * 1e6:.2f} us, {DATA_RATE:.2f} bps, "
                             f"clocks {DATA_CLOCK_FREQ} / {STIM_CLOCK_FREQ} Hz")


def test_5_synchronization(acceptance, golden_results):
    sc = load_golden("sync4")
    r = golden_results("sync4")
    poses = sc.poses
    span_ok = (min(p.axial_distance for p in poses) == 0.015 and max(p.axial_distance for p in poses) == 0.04
               and min(p.theta_xz for p in poses) == 0 and max(p.theta_xz for p in poses) == 50)
    s = r.bundle.metrics["scene"]
    ok = (span_ok and len(poses) == 4 and s["phase_spread_all"] <= MAX_CLOCK_SKEW
          and s["onset_spread"] <= MAX_CLOCK_SKEW + STIM_CLOCK_PERIOD and s["all_invariants_hold"])
    assert acceptance(5, ok, f"phase spread {s['phase_spread_all'] * 1e6:.3f} us, "
                             f"onset spread {s['onset_spread'] * 1e6:.3f} us")


def test_6_misalignment_map(acceptance):
    passed, failed = fig19_region(load_golden("fig19"))
    ok = all(r["pass"] for r in passed) and not any(r["pass"] for r in failed)
    desc = ", ".join(f"{'+' if r['pass'] else '-'}{r['amplitude']:.3f}V" for r in passed + failed)
    assert acceptance(6, ok, f"50/40 deg, 15 mm pass; 60/50 deg, 20 mm fail ({desc})")


def test_7_efficiency(acceptance, golden_results):
    codes = [c for c in range(1, 15) if 0.25 * c >= 1.5]
    eff_ok = all(driver_efficiency(0.25 * c) >= 0.90 for c in codes)
    at35 = driver_efficiency(3.5)
    analytic = system_stimulation_efficiency(3.5, 1.2e-3, 20.0)
    sim = simulated_system_efficiency(golden_results("efficiency").bundle)
    ok = eff_ok and abs(at35 - 0.909) <= 1e-3 and abs(analytic - 0.90) <= 0.02 and abs(sim - 0.90) <= 0.02
    assert acceptance(7, ok, f"driver {at35:.4f} at 3.5 V, system {analytic:.4f} analytic / {sim:.4f} run")


def test_8_puf(acceptance):
    bits = []
    rng = np.random.default_rng(8)
    for seed in range(625):
        for cell in device_cells(seed):
            bits.append(PufCell(cell.mismatch).mismatch + rng.standard_normal() * cell.noise_sigma > 0)
    bias = float(np.mean(bits))
    cell = PufCell(norm.ppf(0.8) * 0.05, 0.05)
    n = 200_000
    err = 1.0 - tmv(cell, np.random.default_rng(80), 15, trials=n).mean()
    p_ref = tmv_error(0.2)
    sigma = np.sqrt(p_ref * (1 - p_ref) / n)
    det = all(generate_id(s, True) == generate_id(s, True) for s in range(50))
    ok = len(bits) == 5000 and abs(bias - 0.5) <= 0.02 and abs(err - p_ref) <= 3 * sigma and det
    assert acceptance(8, ok, f"bias {bias:.4f}, TMV error {err:.5f} vs {p_ref:.5f} (3 sigma {3 * sigma:.5f})")


def test_9_protocol(acceptance):
    rnd = random.Random(9)
    mismatches = 0
    for dev in range(256):
        for _ in range(1000):
            pl = PayloadLayout.from_int(rnd.getrandbits(19))
            p = Packet(dev, pl)
            mismatches += decode_packet(encode_packet(p)) != p
    # every pose of a grid that still receives >= 1.5 V
    coil = CoilSpec(drive_current_peak=6.0)
    film = MEFilmSpec()
    poses = [Pose(z, lat, x, y) for z in (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
             for lat in (0.0, 0.01) for x in (0, 30, 60) for y in (0, 40)]
    bit_errors = tested = 0
    for pose in poses:
        p = Packet(rnd.randrange(256), PayloadLayout.from_int(rnd.getrandbits(19)))
        sc = Scene(coil, film, [pose], schedule=modulate([p]))
        if sc.settled_amplitude(0) < 1.5:
            continue
        tested += 1
        env = sc.envelope(0)
        det = PresenceDetector()
        n0 = watchdog([det.step(e) for e in env])[0]
        rec = receive_packet(env[n0:], RecoveredClock(0, 0.0))
        sent = encode_packet(p)
        bit_errors += len(sent) if rec.bits is None else sum(a != b for a, b in zip(rec.bits, sent))
    ok = mismatches == 0 and bit_errors == 0 and tested > 10
    assert acceptance(9, ok, f"256000 round trips, {mismatches} mismatches; {tested} poses, {bit_errors} bit errors")


def test_10_energy_ledger(acceptance, golden_results):
    worst = 0.0
    for name in GOLDENS:
        r = golden_results(name)
        if r.bundle is None:
            continue
        for m in r.bundle.metrics["implants"].values():
            worst = max(worst, m["ledger_residual_rel"])
    q = golden_results("idle").bundle.metrics["implants"]["A"]["quiescent_power"]
    ok = worst <= 1e-3 and q == pytest.approx(9e-6, rel=1e-9)
    assert acceptance(10, ok, f"worst relative residual {worst:.2e}, idle draw {q * 1e6:.9f} uW")


def test_11_link_budget(acceptance):
    sc = Scene(CoilSpec(drive_current_peak=5.0), MEFilmSpec(), [Pose(0.0)])
    p = pte(sc, 0)
    safe = max_safe_power(0.030)
    fom = figure_of_merit(0.040, 6.2e-9)
    ok = abs(p - 0.0103) <= 1e-15 and safe == pytest.approx(3.8e-3, rel=1e-15) and abs(fom - 6.45) <= 0.01
    assert acceptance(11, ok, f"pte {p:.6%}, safe power {safe * 1e3:.4f} mW, FoM {fom:.4f}")
