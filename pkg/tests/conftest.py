import numpy as np
import pytest

from gascn.autodiff import Tensor, grad_check
from gascn.model import ModelConfig, init_params


def small_config(**overrides) -> ModelConfig:
    """Narrow network for exhaustive gradient checks: 16 coarse points, 2x2 patches."""
    base = dict(input_k=5, n_coarse=16, coarse_k=5, grid_n=2, grid_l=0.1, gat_dim=6, cart_dim=6,
                latent_dim=12, final_hidden=10, coarse_hidden=(12, 16), local_dim=5, map_dim=5,
                normal_hidden=8, sigma_hidden=6, refine_hidden=6)
    base.update(overrides)
    return ModelConfig(**base)


def random_cloud(rng, m: int) -> np.ndarray:
    pts = rng.normal(size=(m, 3))
    return 0.5 * pts / np.abs(pts).max()


def check_param_grads(params, loss_fn, tol: float, step: float = 1e-5):
    """Finite-difference check of ``loss_fn(params)`` against every entry of every parameter."""
    reports = {}
    for name in list(params):
        original = params.tensors[name]

        def f(t, name=name):
            params.tensors[name] = t
            return loss_fn(params)

        probe = Tensor(original.data.copy(), requires_grad=True, name=name)
        try:
            reports[name] = grad_check(f, probe, step=step, tol=tol)
        finally:
            params.tensors[name] = original
    return reports


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    cfg = small_config()
    return cfg, init_params(cfg, seed=3)


# One line per acceptance criterion, echoed again in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
