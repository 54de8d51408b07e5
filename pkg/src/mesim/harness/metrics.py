"""Run metrics, computed only from what a saved bundle holds (so replay matches)."""

from __future__ import annotations

from collections import defaultdict

LEDGER_CLOSURE = 1e-3


def _hamming(a: str, b: str) -> int:
    a, b = a.replace("|", ""), b.replace("|", "")
    return sum(x != y for x, y in zip(a, b)) + abs(len(a) - len(b))


def _rx_stats(events, name):
    sent = [e for e in events if e["kind"] == "packet_sent"]
    rx = [e for e in events if e["source"] == name
          and e["kind"] in ("packet_accepted", "packet_rejected", "packet_error")]
    bit_errors = packet_errors = 0
    matched = set()
    for r in rx:
        before = [s for s in sent if s["cycle"] < r["cycle"]]
        if not before:
            packet_errors += 1
            continue
        s = before[-1]
        matched.add(s["seq"])
        if r["kind"] == "packet_error" or r.get("bits") != s["bits"]:
            packet_errors += 1
            bit_errors += _hamming(r["bits"], s["bits"]) if r.get("bits") else len(s["bits"]) - 2
    missed = sum(1 for s in sent if s["seq"] not in matched)
    return {"packets_sent": len(sent), "packets_received": len(rx), "packets_missed": missed,
            "bit_errors": bit_errors, "packet_errors": packet_errors + missed}


def implant_metrics(im, events) -> dict:
    stims = im.stim_summaries
    driven = [s for s in stims if s["energy_delivered"] > 0]
    drawn = sum(s["energy_drawn"] for s in stims)
    delivered = sum(s["energy_delivered"] for s in stims)
    led = im.ledger
    scale = max(led["energy_in"], led["stored_initial"], led["stored_final"], 1e-15)
    q = im.quiescent
    return {
        "id": im.device_id,
        "id_ok": im.device_id == im.expected_id,
        "max_skew": im.clock_offset,
        "received_amplitude": im.amplitude,
        **_rx_stats(events, im.name),
        "stimuli": len(stims),
        "stim_amplitudes": [s["amplitude"] if s["energy_delivered"] > 0 else 0.0 for s in stims],
        "stim_onsets": [s["onset"] for s in stims],
        "regulation_droop": max((s["v_store_start"] - s["v_store_end"] for s in driven), default=0.0),
        "v_store_at_onset": [s["v_store_start"] for s in stims],
        "stim_efficiency": delivered / drawn if drawn > 0 else None,
        "ledger_residual": led["residual"],
        "ledger_residual_rel": abs(led["residual"]) / scale,
        "quiescent_power": q["energy"] / q["time"] if q["time"] > 0 else None,
        "undervoltage": sum(1 for s in stims if s["undervoltage"]),
        "truncated": sum(1 for s in stims if s["truncated"]),
        "protocol_violations": sum(1 for e in events
                                   if e["source"] == im.name and e["kind"] == "protocol_violation"),
    }


def _spread(groups):
    worst = 0.0
    for ts in groups:
        if len(ts) > 1:
            worst = max(worst, max(ts) - min(ts))
    return worst


NOTCH_DRIVEN = ("notch", "notch_override", "data_complete", "protocol_violation")


def _notch_misses(bundle):
    """Notches sent after an implant's first POR that it failed to detect (or over-detected)."""
    tx = [e["cycle"] for e in bundle.events if e["kind"] == "notch_tx"]
    misses = {}
    for im in bundle.implants:
        mine = [e for e in bundle.events if e["source"] == im.name]
        por = [e["cycle"] for e in mine if e["kind"] == "por"]
        if not por:
            continue
        rx = sum(1 for e in mine if e["kind"] == "notch_rx")
        misses[im.name] = sum(1 for c in tx if c > por[0]) - rx
    return misses


def scene_metrics(bundle, per_implant) -> dict:
    # transitions of the same kind on the same carrier cycle, across implants
    by_key = defaultdict(list)
    for e in bundle.events:
        if e["kind"] == "phase":
            by_key[(e["phase"], e["reason"], e["cycle"])].append(e["t"])
    groups = [ts for k, ts in by_key.items() if k[1] in NOTCH_DRIVEN]
    all_groups = list(by_key.values())
    misses = _notch_misses(bundle)
    onset_groups = defaultdict(list)
    for im in bundle.implants:
        for k, s in enumerate(im.stim_summaries):
            if s["onset"] is not None:
                onset_groups[(k, s["delay"])].append(s["onset"])
    times = [e["t"] for e in bundle.events]
    ids = [im.device_id for im in bundle.implants if im.device_id is not None]
    inv = {
        "ledger_closed": all(m["ledger_residual_rel"] <= LEDGER_CLOSURE for m in per_implant.values()),
        "events_ordered": all(a <= b for a, b in zip(times, times[1:])),
        "ids_distinct": len(set(ids)) == len(ids) or bool(bundle.scenario.get("allow_collisions")),
        "notches_detected": all(m == 0 for m in misses.values()),
    }
    return {
        "phase_spread": _spread(groups),
        "phase_spread_all": _spread(all_groups),
        "notch_misses": misses,
        "onset_spread": _spread(onset_groups.values()),
        "invariants": inv,
        "all_invariants_hold": all(inv.values()),
    }


def metrics(bundle) -> dict:
    per = {im.name: implant_metrics(im, bundle.events) for im in bundle.implants}
    return {"implants": per, "scene": scene_metrics(bundle, per)}
