"""Rydberg-atom surface-code stabilizer measurements: pulses to logical error rates."""

from __future__ import annotations

__version__ = "0.1.0"
