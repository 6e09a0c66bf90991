"""Digital-twin-assisted federated learning simulator."""
from __future__ import annotations

from .perf import tune_allocator

__version__ = "0.1.0"

tune_allocator()
