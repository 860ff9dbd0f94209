"""Photometric, motion-consensus and flow-initialisation objectives.

L1 residuals are averaged over points *and* coordinates so loss weights do
not depend on batch size.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    moco: float = 0.2       # lambda
    fit: float = 10.0       # mu
    eps: float = 0.01       # occupancy threshold for moco points

    def __post_init__(self):
        if self.moco < 0 or self.fit < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps <= 0:
            raise ValueError("occupancy threshold must be positive")


def photometric_loss(predicted, target) -> torch.Tensor:
    """MSE; a sequence of predictions (coarse, fine, ...) sums the per-level MSEs."""
    if isinstance(predicted, Sequence) and not isinstance(predicted, torch.Tensor):
        return sum(photometric_loss(p, target) for p in predicted)
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    return ((predicted - target) ** 2).mean()


def _zero(points):
    return torch.zeros((), dtype=points.dtype)


def moco_local(model, points, t_i, alpha) -> torch.Tensor:
    """Mean ``|M_fw(M_bw(x, t_i), t_i) - x|``; zero for an empty point set."""
    if len(points) == 0:
        return _zero(points)
    cycled = model.forward_flow(model.backward_flow(points, t_i, alpha), t_i, alpha)
    return (cycled - points).abs().mean()


def moco_global(model, points, t_i, t_j, alpha) -> torch.Tensor:
    """Mean residual of the cycle frame i -> canonical -> frame j -> canonical -> frame i."""
    if len(points) == 0:
        return _zero(points)
    x = model.backward_flow(points, t_i, alpha)
    x = model.forward_flow(x, t_j, alpha)
    x = model.backward_flow(x, t_j, alpha)
    x = model.forward_flow(x, t_i, alpha)
    return (x - points).abs().mean()


def moco_total(model, points, t_i, t_j, alpha) -> torch.Tensor:
    return moco_global(model, points, t_i, t_j, alpha) + moco_local(model, points, t_i, alpha)


def occupied_mask(sigmas, eps: float) -> torch.Tensor:
    return sigmas.detach() > eps


def filter_occupied(model, points, t_i, eps: float, alpha) -> torch.Tensor:
    """Points whose warped canonical density exceeds ``eps``; the test carries no gradient."""
    if eps <= 0:
        raise ValueError("occupancy threshold must be positive")
    if len(points) == 0:
        return points
    with torch.no_grad():
        sigma, _ = model.density(model.backward_flow(points, t_i, alpha))
    return points[occupied_mask(sigma, eps)]


def fit_terms(model, obs, canon, free_points, t, alpha, delta0: float):
    """The three parts of the flow-initialisation loss.

    The free-point term is ``BCE(o, 0)`` with opacity ``o = 1 - exp(-sigma delta0)``;
    ``-log(1 - o)`` simplifies exactly to ``sigma * delta0``.
    """
    bw = (model.backward_flow(obs, t, alpha) - canon).abs().mean()
    fw = (model.forward_flow(canon, t, alpha) - obs).abs().mean()
    if len(free_points):
        sigma, _ = model.density(model.backward_flow(free_points, t, alpha))
        bce = (sigma * delta0).mean()
    else:
        bce = _zero(obs)
    return bw, fw, bce


def init_fit_loss(model, obs, canon, free_points, t, alpha, delta0: float, code=None) -> torch.Tensor:
    # density ignores appearance codes, so ``code`` only documents the frame
    if len(obs) == 0:
        raise ValueError("need at least one correspondence pair")
    bw, fw, bce = fit_terms(model, obs, canon, free_points, t, alpha, delta0)
    return bw + fw + bce


def init_objective(photo, moco, fit, weights: LossWeights):
    return photo + weights.moco * moco + weights.fit * fit


def joint_objective(photo, moco, weights: LossWeights):
    return photo + weights.moco * moco
