"""Run output: per-implant traces and stimulus waveforms, the event log, ledgers.

``TraceBundle.save`` writes a directory that ``TraceBundle.load`` reads
back; metrics recomputed from a loaded bundle equal the live ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BUNDLE_FILE = "bundle.json"
WAVEFORM_COLUMNS = ("time", "v_load", "i_load", "v_store")


@dataclass
class ImplantTrace:
    name: str
    device_id: str | None
    expected_id: str
    clock_offset: float
    lock_cycle: int | None
    amplitude: float
    ledger: dict
    quiescent: dict
    max_overshoot: float
    stim_summaries: list
    accepted_payloads: list
    registers: dict
    trace: np.ndarray | None = None
    waveforms: list = field(default_factory=list)

    def header(self) -> dict:
        d = dict(vars(self))
        d.pop("trace")
        d.pop("waveforms")
        return d


@dataclass
class TraceBundle:
    meta: dict
    events: list
    implants: list
    scenario: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def implant(self, name) -> ImplantTrace:
        for im in self.implants:
            if im.name == name:
                return im
        raise KeyError(name)

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "meta": self.meta,
            "scenario": self.scenario,
            "events": self.events,
            "implants": [im.header() for im in self.implants],
            "metrics": self.metrics,
        }
        return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)

    def event_log(self) -> str:
        return "\n".join(format_event(e) for e in self.events) + "\n"

    def save(self, out_dir, decimation: int | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dec = decimation or self.meta.get("trace_decimation", 1)
        (out / BUNDLE_FILE).write_text(self.to_json())
        (out / "events.log").write_text(self.event_log())
        (out / "metrics.json").write_text(json.dumps({"schema_version": 1, **self.metrics},
                                                     sort_keys=True, indent=1))
        cols = self.meta["trace_columns"]
        for im in self.implants:
            if im.trace is not None:
                _write_csv(out / f"trace_{im.name}.csv", cols, im.trace[::dec])
            for k, w in enumerate(im.waveforms):
                _write_csv(out / f"waveform_{im.name}_{k}.csv", WAVEFORM_COLUMNS, w)
        return out

    @classmethod
    def load(cls, out_dir) -> "TraceBundle":
        out = Path(out_dir)
        doc = json.loads((out / BUNDLE_FILE).read_text())
        implants = []
        for h in doc["implants"]:
            im = ImplantTrace(**h)
            p = out / f"trace_{im.name}.csv"
            if p.exists():
                im.trace = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
            im.waveforms = [np.loadtxt(out / f"waveform_{im.name}_{k}.csv", delimiter=",",
                                       skiprows=1, ndmin=2)
                            for k in range(len(im.stim_summaries))]
            implants.append(im)
        return cls(doc["meta"], doc["events"], implants, doc.get("scenario", {}), doc.get("metrics", {}))


def _write_csv(path, columns, rows):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(x)) for x in r) + "\n")


_SKIP = {"t", "cycle", "source", "kind", "seq"}


def format_event(e: dict) -> str:
    extra = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(e.items()) if k not in _SKIP)
    line = f"{e['t'] * 1e6:14.4f}us {e['cycle']:8d} {e['source']:>10} {e['kind']}"
    return f"{line} {extra}" if extra else line


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, dict):
        return "{" + ",".join(f"{k}:{_fmt(x)}" for k, x in v.items()) + "}"
    return str(v)
