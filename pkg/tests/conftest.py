from __future__ import annotations

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def built_metric():
    from zoll.enveloping import build_metric, default_family

    return build_metric(default_family(0.03))


@pytest.fixture(scope="session")
def built_family(built_metric):
    """A small deterministic family of the built metric (shared, treat as read-only)."""
    from zoll.crofton import family_from_metric

    return family_from_metric(built_metric, 512)
