import numpy as np
import pytest

from earlyproto.model import ModelConfig, init_params


def small_config(seed=13, **kw):
    base = dict(d_enc=5, d=8, n_blocks=2, n_heads=2, t_max=6, k_classes=3, predictor_hidden=8, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def randomize(params, seed, scale=0.3):
    """Perturb every tensor so no parameter sits at its (degenerate) init."""
    rng = np.random.default_rng(seed)
    for t in params.tensors.values():
        t.data = t.data + rng.normal(0, scale, size=t.shape)
    return params


@pytest.fixture
def small_params():
    return randomize(init_params(small_config()), 13)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
