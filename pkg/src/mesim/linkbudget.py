"""Static link analysis: PTE, safety-limited power, operating-region maps, FoM."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .channel import CoilSpec, MEFilmSpec, Pose, Scene, coil_field
from .constants import OPERATING_AMPLITUDE
from .powerpath import available_power

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnchorDataset:
    """Reported operating points. Bench and simulation sets are kept apart."""

    pte_vs_depth: tuple = ((0.010, 0.0167), (0.030, 0.0028))  # simulated
    peak_pte: float = 0.0103  # bench, implant at coil centre
    safe_power: tuple = ((0.030, 3.8e-3),)
    inductive_reference: tuple = ((0.030, 0.4e-3),)
    field_limit: tuple = ((0.060, 0.1e-3),)  # tesla

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for k, v in (d or {}).items():
            kw[k] = v if k == "peak_pte" else tuple(tuple(p) for p in v)
        return cls(**kw)


ANCHORS = AnchorDataset()


def interpolate_anchor(points: Sequence[Sequence[float]], x: float) -> float:
    """Log-linear interpolation between anchor points; clamps (with a warning) outside."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if len(xs) == 1:
        if x != xs[0]:
            log.warning("single anchor at %g; value reused for %g", xs[0], x)
        return ys[0]
    if x < xs[0] or x > xs[-1]:
        log.warning("%g outside anchored range [%g, %g]; clamped", x, xs[0], xs[-1])
        x = min(max(x, xs[0]), xs[-1])
    return float(np.exp(np.interp(x, xs, np.log(ys))))


def tx_loss_resistance(coil: CoilSpec, film: MEFilmSpec, peak_pte: float = ANCHORS.peak_pte) -> float:
    """Effective TX coil loss resistance that puts the centre-aligned PTE on the anchor.

    Both received and TX power scale with I^2, so the result does not depend
    on the drive current.
    """
    v_per_amp = film.voltage_coefficient * coil_field(coil, Pose(0.0), 1.0)
    p_rx_per_amp2 = available_power(v_per_amp, film.source_resistance)
    return p_rx_per_amp2 / (0.5 * peak_pte)


def pte(scene: Scene, implant_index: int, field_scale: float = 1.0,
        anchors: AnchorDataset = ANCHORS) -> float:
    """Matched-load received power over TX coil power for one implant."""
    current = scene.coil.drive_current_peak
    if current <= 0:
        raise ValueError("TX drive power must be positive")
    if field_scale == 0:
        return 0.0
    p_rx = available_power(scene.settled_amplitude(implant_index, field_scale),
                           scene.film.source_resistance)
    p_tx = 0.5 * (current * field_scale) ** 2 * tx_loss_resistance(scene.coil, scene.film, anchors.peak_pte)
    return p_rx / p_tx


def max_safe_power(depth: float, coil: CoilSpec = CoilSpec(), anchors: AnchorDataset = ANCHORS) -> float:
    """Peak received power at the field safety limit, scaled with the coil's field profile.

    Anchored at 3.8 mW at 30 mm; the curve ends at the 60 mm field anchor.
    """
    d_max = anchors.field_limit[-1][0]
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth > d_max:
        log.warning("depth %.3g m beyond %.3g m safety anchor; clamped", depth, d_max)
        depth = d_max
    d0, p0 = anchors.safe_power[0]
    ratio = coil_field(coil, Pose(depth), 1.0) / coil_field(coil, Pose(d0), 1.0)
    return p0 * ratio ** 2


def safe_field(depth: float, coil: CoilSpec = CoilSpec(), anchors: AnchorDataset = ANCHORS) -> float:
    """Field (tesla) at ``depth`` when the drive sits at the 0.1 mT @ 60 mm limit."""
    d0, b0 = anchors.field_limit[0]
    return b0 * coil_field(coil, Pose(depth), 1.0) / coil_field(coil, Pose(d0), 1.0)


def power_comparison(depth: float = 0.030, anchors: AnchorDataset = ANCHORS) -> dict:
    return {
        "depth": depth,
        "me_safe_power": max_safe_power(depth, anchors=anchors),
        "inductive_13p56MHz": interpolate_anchor(anchors.inductive_reference, depth),
    }


def make_grid(axial=(0.03,), lateral=(0.0,), theta_xz=(0.0,), theta_yz=(0.0,)) -> list[dict]:
    return [dict(axial_distance=a, lateral_offset=l, theta_xz=x, theta_yz=y)
            for a, l, x, y in itertools.product(axial, lateral, theta_xz, theta_yz)]


def operating_region(scene_template: Scene, grid: Iterable[dict],
                     threshold: float = OPERATING_AMPLITUDE) -> list[dict]:
    """Pass/fail of a single implant at every grid point.

    A point passes when the settled ME amplitude reaches ``threshold``.
    """
    rows = []
    for pt in grid:
        pose = Pose(**pt)
        sc = Scene(scene_template.coil, scene_template.film, [pose], scene_template.tables,
                   scene_template.tissue_attenuation)
        amp = sc.settled_amplitude(0)
        rows.append({**pt, "amplitude": amp, "pass": amp >= threshold})
    return rows


def write_region_csv(rows: list[dict], path):
    cols = ["axial_distance", "lateral_offset", "theta_xz", "theta_yz", "amplitude", "pass"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "pass": int(r["pass"])})


def figure_of_merit(max_distance: float, implant_volume: float) -> float:
    """Max distance over implant volume, in mm / mm^3 (inputs in SI)."""
    if implant_volume <= 0:
        raise ValueError("implant volume must be positive")
    return (max_distance * 1e3) / (implant_volume * 1e9)
