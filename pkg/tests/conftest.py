"""Shared fixtures. The benchmark fixture runs the full default comparison
once per session; only the acceptance tests request it."""
import pytest

from twinbridge.cli import _parse_methods, build_envs, build_run_config, load_spec
from twinbridge.l2b import run


@pytest.fixture(scope="session")
def benchmark():
    """All four methods on the default synthetic pair at full scale.

    Takes on the order of twenty minutes on one core; everything downstream
    reads from this single pass so the expensive runs happen exactly once.
    """
    spec = load_spec()
    real, sim = build_envs(spec)
    results = {}
    for method in _parse_methods(spec["methods"]):
        results[method] = run(build_run_config(spec, method), real, sim)
    return results
