from __future__ import annotations

__lazy_modules__ = {"eseafl._version", "eseafl.harness", "eseafl.protocol"}

from ._version import __version__
from .errors import EseaflError
from .harness import (
    BenchSpec,
    Deployment,
    run_bench,
    run_demo,
    run_round_trip,
)
from .protocol import Mode, ProtocolConfig, SeedSource

__all__ = [
    "BenchSpec",
    "Deployment",
    "EseaflError",
    "Mode",
    "ProtocolConfig",
    "SeedSource",
    "__version__",
    "run_bench",
    "run_demo",
    "run_round_trip",
]
