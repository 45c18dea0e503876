import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rbsdelab.fixtures import MODEL_NAMES, fixture  # noqa: E402
from rbsdelab.horizon import RandomTimeModel, build_azema, build_gtree  # noqa: E402
from rbsdelab.lattice import FiltrationTree  # noqa: E402

# non-immersion law on two steps; rows are leaves dd, du, ud, uu over tau = 1, 2, survive
LAW2 = [[0.2, 0.3, 0.5], [0.2, 0.1, 0.7], [0.4, 0.2, 0.4], [0.1, 0.3, 0.6]]


def law3():
    """Depth-3 law whose hazards depend on past and future moves."""
    rows = []
    for i in range(8):
        b = [(i >> 2) & 1, (i >> 1) & 1, i & 1]
        hz = [0.15 + 0.1 * b[0], 0.1 + 0.15 * b[2], 0.2 - 0.05 * b[1]]
        surv, row = 1.0, []
        for s in range(3):
            row.append(surv * hz[s])
            surv *= 1 - hz[s]
        rows.append(row + [surv])
    return rows


@lru_cache(maxsize=None)
def cached_fixture(name, depth):
    return fixture(name, depth)


@lru_cache(maxsize=None)
def explicit(law_name):
    law, n, dt = {"law2": (LAW2, 2, 1.0), "law3": (law3(), 3, 1 / 3)}[law_name]
    tree = FiltrationTree.symmetric(n, dt)
    model = RandomTimeModel(tree, law)
    bundle = build_azema(model)
    return model, bundle, build_gtree(model, bundle)


@pytest.fixture(params=MODEL_NAMES)
def fx6(request):
    return cached_fixture(request.param, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
