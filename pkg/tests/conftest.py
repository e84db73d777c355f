import functools

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gapped_matrix(rng, m, n, gap=1e-3):
    """Random matrix whose singular values are separated by at least ``gap``."""
    k = min(m, n)
    u, _ = np.linalg.qr(rng.normal(size=(m, k)))
    v, _ = np.linalg.qr(rng.normal(size=(n, k)))
    sigma = np.sort(rng.uniform(0.5, 2.0, size=k))[::-1]
    sigma = sigma + gap * np.arange(k)[::-1] * 2
    return (u * sigma) @ v.T


def tiny_config(**overrides):
    from s2d.config import build_config

    flat = {"steps": 40, "log_interval": 10, "model.hidden": [16, 16], "task.input_dim": 8, "task.output_dim": 4,
            "task.teacher_hidden": 16, "optim.batch_size": 16, "quant.calibration_size": 32,
            "s2d.refresh_interval": 10, "s2d.lookahead": 2}
    flat.update(overrides)
    return build_config(flat, env={})


@functools.cache
def default_run(regime: str, seed: int, **overrides):
    """Full-length run at the default configuration, shared across test modules."""
    from s2d.config import build_config
    from s2d.report import run_experiment

    flat = {"regime": regime, "seed": seed, **overrides}
    if regime == "uniform":
        flat.update({"regime": "s2d", "s2d.pcdr_enabled": False})
    return run_experiment(build_config(flat, env={}))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
