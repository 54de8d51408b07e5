"""PUF device ID with temporal majority voting, and the ID-gated register file."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .downlink import ID_BITS, Packet, PayloadLayout, id_str

TMV_VOTES = 15
DEFAULT_NOISE_SIGMA = 0.05


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class PufCell:
    mismatch: float
    noise_sigma: float = DEFAULT_NOISE_SIGMA


def device_cells(device_seed: int, n: int = ID_BITS, noise_sigma: float = DEFAULT_NOISE_SIGMA):
    """The ``n`` PUF cells of one device; mismatch is standard normal, fixed by the seed."""
    rng = np.random.default_rng([0x9F, int(device_seed)])
    return [PufCell(float(m), noise_sigma) for m in rng.standard_normal(n)]


def puf_cell_eval(cell: PufCell, rng: np.random.Generator, size=None):
    """Sign of mismatch plus a fresh thermal-noise draw (1 if positive)."""
    noise = rng.standard_normal(size) * cell.noise_sigma
    out = (cell.mismatch + noise) > 0
    return out.astype(np.int8) if size is not None else int(out)


def flip_probability(cell: PufCell) -> float:
    """Probability that one evaluation disagrees with the noise-free bit."""
    if cell.noise_sigma == 0:
        return 0.0 if cell.mismatch != 0 else 0.5
    return 0.5 * math.erfc(abs(cell.mismatch) / (cell.noise_sigma * math.sqrt(2.0)))


def tmv_error(p: float, votes: int = TMV_VOTES) -> float:
    """Post-vote error for per-evaluation flip probability ``p`` (binomial tail)."""
    if votes % 2 == 0:
        raise ValueError("vote count must be odd")
    need = votes // 2 + 1
    return sum(math.comb(votes, k) * p ** k * (1 - p) ** (votes - k) for k in range(need, votes + 1))


def tmv(cell: PufCell, rng: np.random.Generator, votes: int = TMV_VOTES, trials=None):
    """Majority over ``votes`` independent evaluations.

    With ``trials`` set, returns an array of that many independent TMV outputs.
    """
    if votes <= 0 or votes % 2 == 0:
        raise ValueError("vote count must be a positive odd number")
    shape = (votes,) if trials is None else (trials, votes)
    ones = puf_cell_eval(cell, rng, shape).sum(axis=-1)
    out = (ones > votes // 2).astype(np.int8)
    return int(out) if trials is None else out


@dataclass(frozen=True)
class DeviceId:
    bits: int
    stable: bool = True

    def __str__(self):
        return id_str(self.bits)


def generate_id(device_seed: int, por_event, votes: int = TMV_VOTES,
                noise_sigma: float = DEFAULT_NOISE_SIGMA, por_count: int = 0) -> DeviceId:
    """8 TMV'd PUF bits, evaluated one cell after another after POR.

    ``por_event`` must be truthy (POR fired). The thermal-noise stream is
    seeded by (device_seed, por_count), so a given run is reproducible.
    """
    if not por_event:
        raise ProtocolError("ID generation requires a POR event")
    rng = np.random.default_rng([0x1D, int(device_seed), int(por_count)])
    v = 0
    for cell in device_cells(device_seed, ID_BITS, noise_sigma):
        v = (v << 1) | tmv(cell, rng, votes)
    return DeviceId(v)


def find_seed_for_id(target: int, start: int = 0, limit: int = 1 << 20,
                     noise_sigma: float = DEFAULT_NOISE_SIGMA, margin: float = 6.0) -> int:
    """Smallest seed >= ``start`` whose noise-free PUF response equals ``target``.

    Every cell must sit at least ``margin`` noise sigmas from its switching
    point, so the ID is stable under any noise draw in practice.
    """
    for s in range(start, start + limit):
        cells = device_cells(s, ID_BITS, noise_sigma)
        if min(abs(c.mismatch) for c in cells) < margin * noise_sigma:
            continue
        v = 0
        for c in cells:
            v = (v << 1) | int(c.mismatch > 0)
        if v == target:
            return s
    raise LookupError(f"no seed in [{start}, {start + limit}) yields id {id_str(target)}")


@dataclass(frozen=True)
class RegisterFile:
    amp_code: int = 0
    pw_code: int = 0
    delay_code: int = 0
    mode: int = 0
    ref_trim: int = 16

    @classmethod
    def from_payload(cls, p: PayloadLayout) -> "RegisterFile":
        return cls(**p.to_dict())

    def to_dict(self):
        return {k: getattr(self, k) for k in ("amp_code", "pw_code", "delay_code", "mode", "ref_trim")}


def update_registers(rf: RegisterFile, pkt: Packet, device_id: DeviceId) -> tuple[RegisterFile, bool]:
    """Accept the payload only if the packet is addressed to this device.

    Returns ``(register_file, accepted)``.
    """
    if pkt.device_id == device_id.bits:
        return RegisterFile.from_payload(pkt.payload), True
    return rf, False


def replay_registers(accepted_payloads: Iterable[dict], rf: RegisterFile | None = None) -> RegisterFile:
    """Rebuild a register file from the payloads of its accepted packets, in order."""
    rf = rf or RegisterFile()
    for p in accepted_payloads:
        rf = replace(rf, **{k: p[k] for k in rf.to_dict()})
    return rf
