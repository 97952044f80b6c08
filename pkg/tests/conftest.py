import numpy as np
import pytest
import torch


def central_diff(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(fn(x))
        flat[i] = old - h
        fm = float(fn(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12))


def grad_check(fn, x: torch.Tensor, tol: float = 1e-3, h: float = 1e-6) -> float:
    """Compare autograd and central differences; returns the relative error."""
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    (analytic,) = torch.autograd.grad(out, x)
    numeric = central_diff(lambda z: fn(z).detach(), x.detach(), h)
    err = rel_err(analytic, numeric)
    assert err <= tol, f"gradient mismatch: relative error {err:.3e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
