import math

import pytest
import torch

from cfclip.backends import Dims, make_toy_suite
from cfclip.config import OptimizerConfig, TrainConfig

TOY_DIMS = Dims(dim_clip=16, dim_w=8, n_latent=4, height=16, width=16, channels=3)


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` (float64), one coordinate at a time."""
    x = x.detach().clone().contiguous()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(fn(x))
            flat[i] = old - h
            down = float(fn(x))
            flat[i] = old
            g[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def assert_gradients_match(fn, x, rtol=1e-4, h=1e-6):
    """Relative error measured against the gradient's overall scale."""
    num = central_difference(fn, x, h)
    ana = analytic_gradient(fn, x)
    scale = max(float(num.abs().max()), float(ana.abs().max()), 1e-12)
    err = float((num - ana).abs().max()) / scale
    assert err < rtol, f"max relative gradient error {err:.3e}"
    return err


def rel_close(a, b, rtol):
    return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)


@pytest.fixture(scope="session")
def toy_suite():
    return make_toy_suite(0, TOY_DIMS)


@pytest.fixture
def small_config(tmp_path):
    """A short toy run used across training, checkpoint and CLI tests."""
    return TrainConfig(
        iterations=6,
        batch_size=2,
        optimizer=OptimizerConfig(lr=0.01),
        checkpoint_every=3,
        output_dir=str(tmp_path / "run"),
    )


def finite(x) -> bool:
    return all(math.isfinite(float(v)) for v in torch.as_tensor(x).flatten())
