import numpy as np
import pytest
import torch

from compmeta.evaluation import build_oracle_motor_model, build_oracle_rule_model


@pytest.fixture(scope="session")
def oracle_rule():
    return build_oracle_rule_model()


@pytest.fixture(scope="session")
def oracle_motor():
    return build_oracle_motor_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, tensor, step=1e-3):
    """Central finite-difference gradient of scalar fn() w.r.t. every entry of tensor (in place)."""
    g = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), g.view(-1)
    with torch.no_grad():
        _fill(fn, flat, gflat, step)
    return g


def _fill(fn, flat, gflat, step):
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn())
        flat[i] = orig - step
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)


def max_rel_err(a, b, floor=1e-7):
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    scale = torch.maximum(a.abs(), b.abs())
    err = (a - b).abs() / scale.clamp_min(floor)
    err[scale < floor] = 0.0
    return float(err.max()) if err.numel() else 0.0


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
