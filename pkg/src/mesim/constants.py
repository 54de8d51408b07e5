"""Shared timing constants of the 330 kHz link."""

CARRIER_FREQ = 330e3
CARRIER_PERIOD = 1.0 / CARRIER_FREQ

CYCLES_PER_BIT = 64
BIT_DURATION = CYCLES_PER_BIT * CARRIER_PERIOD
DATA_RATE = CARRIER_FREQ / CYCLES_PER_BIT

DATA_CLOCK_DIVIDER = 32
STIM_CLOCK_DIVIDER = 4
DATA_CLOCK_FREQ = CARRIER_FREQ / DATA_CLOCK_DIVIDER
STIM_CLOCK_FREQ = CARRIER_FREQ / STIM_CLOCK_DIVIDER
STIM_CLOCK_PERIOD = 1.0 / STIM_CLOCK_FREQ

# 100 us field-off command.
NOTCH_CYCLES = 33
NOTCH_DURATION = NOTCH_CYCLES * CARRIER_PERIOD

# worst-case clock recovery skew between two implants
MAX_CLOCK_SKEW = 0.75e-6

OPERATING_AMPLITUDE = 1.5  # V, minimum ME source amplitude for reliable operation
CLOCK_LOCK_AMPLITUDE = 0.09  # V

QUIESCENT_POWER = 9e-6  # W

OE_PER_TESLA = 1e4  # in air, 1 G == 1 Oe
