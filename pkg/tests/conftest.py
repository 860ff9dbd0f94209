import numpy as np
import pytest
import torch

from dynflow.fields import FieldConfig, init_scene_model

TINY = FieldConfig(width=8, depth=3, skip=1, color_width=8, point_bands=2, time_bands=2, code_dim=2,
                   dtype="float64")


def tiny_model(seed=0, n_frames=4, randomize_flows=True, scale=0.3):
    model = init_scene_model(TINY, seed, n_frames=n_frames)
    if randomize_flows:
        g = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for net in (model.bw_net, model.fw_net):
                last = net.layers[-1]
                last.weight.copy_(scale * torch.randn(last.weight.shape, generator=g, dtype=torch.float64))
                last.bias.copy_(0.1 * scale * torch.randn(last.bias.shape, generator=g, dtype=torch.float64))
    return model


def fd_relative_error(fn, params, eps=1e-6):
    """Relative error between autograd and central finite differences of ``fn()``.

    ``params`` are float64 tensors; each entry is perturbed in turn.  The error
    is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` over the stacked gradient vector.
    """
    for p in params:
        p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    ad = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
    fd = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                hi = float(fn())
                flat[i] = old - eps
                lo = float(fn())
                flat[i] = old
                fd.append((hi - lo) / (2 * eps))
    fd = torch.tensor(fd, dtype=torch.float64)
    denom = max(ad.norm().item(), fd.norm().item(), 1e-12)
    return (ad - fd).norm().item() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
