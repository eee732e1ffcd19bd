from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]


def _data_path(env: str, *candidates: str) -> Path | None:
    if os.environ.get(env):
        p = Path(os.environ[env])
        return p if p.exists() else None
    for c in candidates:
        p = ROOT / "data" / c
        if p.exists():
            return p
    return None


@pytest.fixture(scope="session")
def wine_csv() -> Path | None:
    return _data_path("FUNCRESID_WINE_CSV", "winequality-white.csv", "wine.csv")


@pytest.fixture(scope="session")
def bike_csv() -> Path | None:
    return _data_path("FUNCRESID_BIKE_CSV", "hour.csv", "bike.csv")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
