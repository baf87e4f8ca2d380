import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metags.hetgraph import GraphCorpus, HeterogeneousGraph
from metags.synthgen import GeneratorConfig, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_graph(types, links, n_types=None, feature_dim=3, gid="t", seed=0):
    """Graph from a type list and ``(a, b)`` or ``(a, b, t)`` links; features are seeded noise."""
    n_types = n_types or (max(types) + 1 if types else 1)
    n_types = max(n_types, 2)
    rng = np.random.default_rng(seed)
    rows = [tuple(l) if len(l) == 3 else (l[0], l[1], 0) for l in links]
    return HeterogeneousGraph(
        gid, [f"T{k}" for k in range(n_types)], ["L0", "L1"], types,
        [rng.normal(size=feature_dim) for _ in types], rows,
    )


@pytest.fixture(scope="session")
def default_generated():
    return generate(GeneratorConfig())


@pytest.fixture(scope="session")
def default_corpus(default_generated) -> GraphCorpus:
    return default_generated[0]


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
