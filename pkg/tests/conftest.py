import numpy as np
import pytest
import torch

from geoprompt.config import TrainConfig
from geoprompt.dataset import SynthConfig
from geoprompt.encoders import DepthEncoderConfig


def small_config(**overrides) -> TrainConfig:
    """Tiny architecture for fast unit tests (64px frames, width 32, one attention block)."""
    cfg = TrainConfig(
        resolution=64, common_width=32, se_reduction=8,
        depth_encoder=DepthEncoderConfig(blocks=1, embed_dim=48, patch=16, heads=3),
        epochs=2, batch_size=2, synth=SynthConfig(seed=3, count=10, resolution=64, curve_thickness_px=4),
        augment=False,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture
def cfg_small(tmp_path):
    return small_config(out_dir=str(tmp_path / "run"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at double tensor ``x``."""
    g = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f(flat.view_as(x)).item()
        flat[i] = orig - h
        fm = f(flat.view_as(x)).item()
        flat[i] = orig
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
