"""Shared fixtures: rendered scenario bundles are expensive, so a moving and
a static bundle are built once per session and reused across test modules."""

import numpy as np
import pytest

from rtfbeam import pipeline


@pytest.fixture(scope="session")
def moving_bundle():
    """Moving-speaker scene, seed 3, 10 dB input SNR."""
    return pipeline.simulate(3, 10.0)


@pytest.fixture(scope="session")
def static_bundle():
    """Static-speaker scene, seed 3, 30 dB input SNR."""
    return pipeline.simulate(3, 30.0, static=True)


def random_spd(rng, m, floor=0.1):
    """Random Hermitian positive-definite matrix."""
    g = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
    return g @ g.conj().T + floor * np.eye(m)


def random_complex(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
