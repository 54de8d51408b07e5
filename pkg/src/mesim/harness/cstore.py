"""Storage-capacitor sizing from the measured regulation droop.

A 2.5 V, 1.2 ms biphasic pulse into 1 kOhm pulls the stimulation supply from
its 2.75 V regulation point down to 2.15 V. With the driver drawing
``E_load / efficiency`` from the capacitor and no recharge during the pulse:

    C = 2 * E_load / (efficiency * (V0^2 - V1^2))
"""

from __future__ import annotations

from ..constants import STIM_CLOCK_FREQ
from ..stimengine import driver_efficiency


def derive_cstore(v_start: float = 2.75, v_end: float = 2.15, amplitude: float = 2.5,
                  pulse_width: float = 1.2e-3, load_resistance: float = 1000.0,
                  biphasic: bool = True, pulse_width_total: bool = False) -> dict:
    per_phase = pulse_width / 2 if (pulse_width_total and biphasic) else pulse_width
    # the driver times phases on the stim clock
    per_phase = round(per_phase * STIM_CLOCK_FREQ) / STIM_CLOCK_FREQ
    on_time = per_phase * (2 if biphasic else 1)
    e_load = amplitude ** 2 / load_resistance * on_time
    eta = driver_efficiency(amplitude)
    e_drawn = e_load / eta
    c = 2.0 * e_drawn / (v_start ** 2 - v_end ** 2)
    return {
        "v_start": v_start,
        "v_end": v_end,
        "amplitude": amplitude,
        "per_phase_width": per_phase,
        "on_time": on_time,
        "load_resistance": load_resistance,
        "driver_efficiency": eta,
        "energy_load": e_load,
        "energy_drawn": e_drawn,
        "c_store": c,
    }


C_STORE = derive_cstore()["c_store"]


def report(d: dict) -> str:
    return "\n".join([
        f"pulse: {d['amplitude']} V, {d['per_phase_width'] * 1e3:.4g} ms/phase, "
        f"{d['on_time'] * 1e3:.4g} ms on, {d['load_resistance']:.0f} ohm",
        f"load energy     E = V^2/R * t      = {d['energy_load'] * 1e6:.4f} uJ",
        f"driver eff.     eta                = {d['driver_efficiency']:.5f}",
        f"drawn from C    E/eta              = {d['energy_drawn'] * 1e6:.4f} uJ",
        f"droop           {d['v_start']} V -> {d['v_end']} V",
        f"C_store = 2 E/eta / (V0^2 - V1^2)  = {d['c_store'] * 1e6:.4f} uF",
    ])
