import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SEED = 17


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mini_rhine_data(tmp_path_factory):
    """The shipped mini-Rhine scenario written to disk once per session."""
    from riverpath.synthgen import generate, mini_rhine, write_dataset

    out = tmp_path_factory.mktemp("mini_rhine")
    ds = generate(mini_rhine(seed=SEED))
    paths = write_dataset(ds, out)
    return ds, paths


@pytest.fixture(scope="session")
def mini_rhine_run(mini_rhine_data, tmp_path_factory):
    """One full pipeline run on the mini-Rhine data; returns (config, out dir, report)."""
    from riverpath.config import load_config
    from riverpath.pipeline import run_pipeline

    _, paths = mini_rhine_data
    out = tmp_path_factory.mktemp("run_a")
    cfg = load_config(paths["config"], {"output.dir": str(out)})
    report = run_pipeline(cfg)
    return cfg, Path(out), report


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, collected from ``record_property``."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            for name, value in rep.user_properties:
                if name == "criterion":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
