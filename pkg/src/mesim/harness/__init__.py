"""Scenario files, the cycle-stepped kernel, traces, metrics, goldens and CLI."""
