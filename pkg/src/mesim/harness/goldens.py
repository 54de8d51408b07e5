"""Golden scenarios: each one is run and judged against its ``expected`` block."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from ..channel import Scene
from ..constants import MAX_CLOCK_SKEW, STIM_CLOCK_PERIOD
from ..linkbudget import operating_region
from ..stimengine import system_stimulation_efficiency
from .kernel import run
from .scenario import load_golden

GOLDENS = ("minimal", "fig14", "fig16", "fig17", "fig19", "fig21", "sync4", "idle", "efficiency")
FIG17_RUNTIME_LIMIT = 5.0


@dataclass
class GoldenResult:
    name: str
    ok: bool
    detail: str
    values: dict = field(default_factory=dict)
    bundle: object = None


def _ledger_ok(bundle):
    return bundle.metrics["scene"]["invariants"]["ledger_closed"]


def compare_log(bundle) -> list[str]:
    """Addressing log: packets as received and the amplitude each stimulus actually had.

    Ordered by carrier cycle, then implant order, so sub-cycle clock offsets
    (which depend on the seed) do not reorder it.
    """
    rank = {im.name: k for k, im in enumerate(bundle.implants)}
    lines = []
    for e in sorted(bundle.events, key=lambda e: (e["cycle"], rank.get(e["source"], -1), e["seq"])):
        if e["kind"] in ("packet_accepted", "packet_rejected"):
            lines.append(f"{e['source']} {e['kind']} {e['id']}")
        elif e["kind"] == "stim_onset":
            lines.append(f"{e['source']} stim_onset {e['amplitude'] if e['driven'] else 0.0}")
    return lines


def check_minimal(sc, bundle):
    m = bundle.metrics["implants"]["A"]
    ok = m["id"] is not None and m["stimuli"] == 0 and _ledger_ok(bundle)
    return ok, f"POR id {m['id']}, {m['stimuli']} stimuli", {"id": m["id"]}


def check_fig14(sc, bundle):
    exp = sc.raw["expected"]
    s = bundle.implants[0].stim_summaries[0]
    v0, v1 = s["v_store_start"], s["v_store_end"]
    tol = exp["tolerance"]
    ok = (abs(v0 - exp["v_start"]) <= tol and abs(v1 - exp["v_end"]) <= tol
          and not s["truncated"] and not s["undervoltage"] and _ledger_ok(bundle))
    return ok, f"v_store {v0:.4f} V -> {v1:.4f} V", {"v_start": v0, "v_end": v1}


def check_fig16(sc, bundle):
    exp = sc.raw["expected"]
    m = bundle.metrics["implants"]["A"]
    amps = m["stim_amplitudes"]
    target = exp["amplitude"]
    worst = max(abs(a - target) / target for a in amps)
    scales = [c.amplitude_scale for c in sc.schedule.cycles]
    src = [bundle.implants[0].amplitude * s for s in scales]
    ok = (worst <= exp["tolerance"] and m["packet_errors"] == 0 and m["truncated"] == 0
          and min(src) <= exp["source_min"] + 1e-6 and max(src) >= exp["source_max"] - 1e-6
          and _ledger_ok(bundle))
    return ok, (f"source {min(src):.2f}-{max(src):.2f} V, stim amplitude error {worst:.2%}, "
                f"{m['packet_errors']} packet errors"), {"worst_error": worst, "amplitudes": amps}


def check_fig17(sc, bundle, runtime=None):
    exp = sc.raw["expected"]
    log = compare_log(bundle)
    ids = {im.name: im.device_id for im in bundle.implants}
    ok = log == exp["log"] and ids == exp["ids"] and _ledger_ok(bundle)
    if runtime is not None:
        ok = ok and runtime < FIG17_RUNTIME_LIMIT
    detail = "event log matches" if log == exp["log"] else "event log differs"
    if runtime is not None:
        detail += f", {runtime:.2f} s"
    return ok, detail, {"log": log, "ids": ids, "runtime": runtime}


def fig19_region(sc):
    exp = sc.raw["expected"]
    scene = Scene(sc.coil, sc.film, sc.poses, sc.tables, sc.tissue_attenuation)
    base = {"axial_distance": sc.implants[0].pose.axial_distance}
    pts = [{**base, **p} for p in exp["pass"] + exp["fail"]]
    rows = operating_region(scene, pts, exp["threshold"])
    return rows[:len(exp["pass"])], rows[len(exp["pass"]):]


def check_fig19(sc, bundle=None):
    passed, failed = fig19_region(sc)
    ok = all(r["pass"] for r in passed) and not any(r["pass"] for r in failed)
    detail = ", ".join(f"{_pt(r)}:{r['amplitude']:.3f}V" for r in passed + failed)
    return ok, detail, {"pass": passed, "fail": failed}


def _pt(r):
    for k in ("theta_xz", "theta_yz", "lateral_offset"):
        if r.get(k):
            return f"{k}={r[k]:g}"
    return "aligned"


def onsets(bundle, k):
    """Onset time of every implant's k-th stimulus."""
    return {im.name: im.stim_summaries[k]["onset"] for im in bundle.implants}


def check_fig21(sc, bundle):
    exp = sc.raw["expected"]
    sync = onsets(bundle, exp["sync_cycle"])
    spread = max(sync.values()) - min(sync.values())
    dl = onsets(bundle, exp["delay_cycle"])
    diff = dl["B"] - dl["A"]
    tol = STIM_CLOCK_PERIOD + MAX_CLOCK_SKEW
    ok = (spread <= MAX_CLOCK_SKEW + STIM_CLOCK_PERIOD and abs(diff - exp["delay"]) <= tol
          and _ledger_ok(bundle))
    return ok, f"sync spread {spread * 1e6:.3f} us, delayed onset {diff * 1e6:.2f} us", \
        {"sync_spread": spread, "delay": diff}


def check_sync4(sc, bundle):
    exp = sc.raw["expected"]
    s = bundle.metrics["scene"]
    n_stim = {im.name: len(im.stim_summaries) for im in bundle.implants}
    ok = (s["phase_spread_all"] <= exp["phase_spread"] and s["onset_spread"] <= exp["onset_spread"]
          and s["all_invariants_hold"] and len(set(n_stim.values())) == 1
          and all(m["packet_errors"] == 0 for m in bundle.metrics["implants"].values()))
    return ok, (f"phase spread {s['phase_spread_all'] * 1e6:.3f} us, "
                f"onset spread {s['onset_spread'] * 1e6:.3f} us"), \
        {"phase_spread": s["phase_spread_all"], "onset_spread": s["onset_spread"]}


def check_idle(sc, bundle):
    m = bundle.metrics["implants"]["A"]
    im = bundle.implants[0]
    q = m["quiescent_power"]
    only_q = abs(im.ledger["energy_out"] - im.quiescent["energy"]) <= 1e-15
    ok = (m["stimuli"] == 0 and q is not None and abs(q - sc.raw["expected"]["quiescent_power"]) <= 1e-12
          and only_q and _ledger_ok(bundle))
    return ok, f"quiescent {q * 1e6:.6f} uW, 0 stimuli" if q else "never powered", {"quiescent_power": q}


def simulated_system_efficiency(bundle, name="A", skip=1):
    """Load energy over (stored energy drawn + quiescent) across the periodic stimuli."""
    im = bundle.implant(name)
    stims = im.stim_summaries[skip:]
    delivered = sum(s["energy_delivered"] for s in stims)
    drawn = sum(s["energy_drawn"] for s in stims)
    t = [s["onset"] for s in stims]
    span = (t[-1] - t[0]) * len(t) / (len(t) - 1)
    quiescent = im.quiescent["energy"] / im.quiescent["time"] * span
    return delivered / (drawn + quiescent)


def check_efficiency(sc, bundle):
    exp = sc.raw["expected"]
    s = bundle.implants[0].stim_summaries[-1]
    analytic = system_stimulation_efficiency(s["amplitude"], s["pulse_width"], exp["frequency"])
    sim = simulated_system_efficiency(bundle)
    tol = exp["tolerance"]
    ok = (abs(analytic - exp["efficiency"]) <= tol and abs(sim - exp["efficiency"]) <= tol
          and _ledger_ok(bundle))
    return ok, f"analytic {analytic:.4f}, simulated {sim:.4f}", {"analytic": analytic, "simulated": sim}


CHECKS = {
    "minimal": check_minimal, "fig14": check_fig14, "fig16": check_fig16, "fig17": check_fig17,
    "fig19": check_fig19, "fig21": check_fig21, "sync4": check_sync4, "idle": check_idle,
    "efficiency": check_efficiency,
}
STATIC = {"fig19"}


def run_golden(name: str) -> GoldenResult:
    sc = load_golden(name)
    if name in STATIC:
        ok, detail, vals = CHECKS[name](sc)
        return GoldenResult(name, ok, detail, vals)
    t = time.perf_counter()
    bundle = run(sc)
    runtime = time.perf_counter() - t
    if name == "fig17":
        ok, detail, vals = check_fig17(sc, bundle, runtime)
    else:
        ok, detail, vals = CHECKS[name](sc, bundle)
    ok = ok and bundle.metrics["scene"]["all_invariants_hold"]
    return GoldenResult(name, ok, detail, vals, bundle)


def run_goldens(names=GOLDENS) -> list[GoldenResult]:
    return [run_golden(n) for n in names]


def format_table(results) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'golden':<{w}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.ok else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
