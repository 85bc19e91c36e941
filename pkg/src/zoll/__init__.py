"""Zoll Finsler metrics on the two-sphere and their retraction to the round metric."""

from __future__ import annotations

__version__ = "0.1.0"
