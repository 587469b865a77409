from __future__ import annotations

import random

import numpy as np
import pytest

from eseafl.protocol import Mode, ProtocolConfig


@pytest.fixture(scope="function")
def rng() -> random.Random:
    return random.Random(20240229)


@pytest.fixture(scope="function")
def sh_config() -> ProtocolConfig:
    return ProtocolConfig(n=6, k=2, d=5)


@pytest.fixture(scope="function")
def mal_config() -> ProtocolConfig:
    return ProtocolConfig(n=6, k=2, d=5, mode=Mode.MALICIOUS)


@pytest.fixture(scope="function")
def integrity_config() -> ProtocolConfig:
    return ProtocolConfig(n=6, k=2, d=5, mode=Mode.MALICIOUS, integrity=True)


def ring_inputs(
    rng: random.Random, n: int, d: int, bound: int = 2**32
) -> list[np.ndarray]:
    """``n`` random ring vectors of length ``d``."""
    return [
        np.array([rng.randrange(bound) for _ in range(d)], dtype=np.uint32)
        for _ in range(n)
    ]
