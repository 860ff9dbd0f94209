"""Sinusoidal positional encodings with a coarse-to-fine frequency window.

Output layout for an input with ``D`` coordinates and ``f`` bands::

    [x_0 .. x_{D-1},
     sin(2^0 pi x_0) .. sin(2^0 pi x_{D-1}), cos(2^0 pi x_0) .. cos(2^0 pi x_{D-1}),
     sin(2^1 pi x_0) .. , cos(2^1 pi x_0) .., ...]

Band ``k`` is scaled by ``window_weight(k, alpha)``; the raw coordinates are
never windowed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class AnnealState:
    alpha: float
    bands: int

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError("bands must be a positive integer")
        if not 0.0 <= self.alpha <= self.bands:
            raise ValueError("alpha must lie in [0, bands]")


def window_weight(k, alpha):
    """``(1 - cos(pi * clamp(alpha - k, 0, 1))) / 2``; works on floats and tensors."""
    if isinstance(k, torch.Tensor) or isinstance(alpha, torch.Tensor):
        x = torch.clamp(torch.as_tensor(alpha) - k, 0.0, 1.0)
        return 0.5 * (1.0 - torch.cos(math.pi * x))
    x = min(max(alpha - k, 0.0), 1.0)
    return 0.5 * (1.0 - math.cos(math.pi * x))


def anneal_alpha(n: int, total: int, bands: int) -> float:
    if total <= 0:
        raise ValueError("annealing length must be positive")
    if n < 0:
        raise ValueError("iteration must be non-negative")
    return min(bands * n / total, float(bands))


def encoded_size(dims: int, bands: int) -> int:
    return dims * (1 + 2 * bands)


def _encode(x: torch.Tensor, bands: int, weights: torch.Tensor | None) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(bands, dtype=x.dtype, device=x.device)) * math.pi
    arg = x[..., None, :] * freqs[:, None]                # (..., bands, D)
    s, c = torch.sin(arg), torch.cos(arg)
    if weights is not None:
        s = s * weights[:, None]
        c = c * weights[:, None]
    feats = torch.cat([s, c], dim=-1).flatten(-2)         # band-major: sin block, cos block
    return torch.cat([x, feats], dim=-1)


def band_weights(bands: int, alpha: float, dtype=torch.float32) -> torch.Tensor:
    k = torch.arange(bands, dtype=dtype)
    return window_weight(k, torch.tensor(alpha, dtype=dtype))


def encode_point(x: torch.Tensor, state: AnnealState) -> torch.Tensor:
    """``(..., 3)`` points -> ``(..., 3 + 6 f)`` windowed features."""
    x = torch.as_tensor(x)
    return _encode(x, state.bands, band_weights(state.bands, state.alpha, x.dtype).to(x.device))


def encode_time(t, bands: int) -> torch.Tensor:
    """``(...)`` or ``(..., 1)`` times -> ``(..., 1 + 2 f_t)``, all bands open."""
    t = torch.as_tensor(t)
    if t.dim() == 0 or t.shape[-1] != 1:
        t = t[..., None]
    return _encode(t, bands, None)
