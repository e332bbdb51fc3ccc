"""Shared grids and profiles for the test suite."""

import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from base_flow import ShearProfile, named_profile
from channel_grid import build_grid


@pytest.fixture(scope="session")
def grid32():
    return build_grid(32)


@pytest.fixture(scope="session")
def grid48():
    return build_grid(48)


@pytest.fixture(scope="session")
def grid64():
    return build_grid(64)


@pytest.fixture
def couette(grid32):
    return ShearProfile.from_values(grid32, named_profile("couette", grid32))


@pytest.fixture
def convex_sine(grid32):
    return ShearProfile.from_values(grid32, named_profile("convex_sine", grid32))
