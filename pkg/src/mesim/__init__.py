"""Discrete-time simulator of a magnetoelectric wireless power and data network
with many addressable stimulating implants under one transmitter coil."""

__version__ = "0.1.0"
