"""MLP fields: canonical radiance field plus backward/forward motion flows.

All fields work in *scene coordinates*: world points mapped by
``(x - scene_center) / scene_scale`` so the subject sits roughly in
``[-1, 1]^3``.  Times are normalised frame indices ``i / (m - 1)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoding import AnnealState, encode_point, encode_time, encoded_size

CHECKPOINT_FORMAT = "dynflow-model/1"


@dataclass(frozen=True)
class FieldConfig:
    width: int = 64
    depth: int = 6            # hidden layers per network
    skip: int = 3             # encoded input re-injected before this hidden layer
    color_width: int = 64
    point_bands: int = 8
    time_bands: int = 16
    code_dim: int = 8
    code_std: float = 0.01
    density_shift: float = -1.0
    anneal_canonical: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.code_dim < 0:
            raise ValueError("invalid network dimensions")
        if not 0 < self.skip < self.depth:
            raise ValueError("skip index must fall inside the hidden stack")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


PRESETS = {
    # 64 px frames resolve about 0.03 scene units, so bands past 2^4 pi only alias;
    # letting the flows open them made the joint stage diverge
    "desk": FieldConfig(point_bands=5),
    "paper": FieldConfig(width=256, depth=8, skip=4, color_width=128),
}


class Mlp(nn.Module):
    """Stack of ``n_hidden`` ReLU layers plus a linear output layer.

    With ``skip = s`` the network input is concatenated to the input of hidden
    layer ``s``.  ``n_hidden = 0`` degenerates to a single linear map.
    """

    def __init__(self, in_dim, width, n_hidden, out_dim, skip=None, final_activation=None):
        super().__init__()
        if skip is not None and not 0 < skip < max(n_hidden, 1):
            raise ValueError("skip index out of range")
        self.in_dim, self.skip = in_dim, skip
        self.final_activation = final_activation
        layers, d = [], in_dim
        for i in range(n_hidden):
            if i == skip:
                d += in_dim
            layers.append(nn.Linear(d, width))
            d = width
        layers.append(nn.Linear(d, out_dim))
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        h = x
        for i, layer in enumerate(self.layers[:-1]):
            if i == self.skip:
                h = torch.cat([h, x], dim=-1)
            h = F.relu(layer(h))
        h = self.layers[-1](h)
        if self.final_activation == "relu":
            h = F.relu(h)
        return h


def mlp_forward(params: Mlp, x: torch.Tensor) -> torch.Tensor:
    return params(x)


def _cross(a, b):
    return torch.cross(a, b, dim=-1)


def _twist_coeffs(theta_sq):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero."""
    small = theta_sq < 1e-4
    ts = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    t = torch.sqrt(ts)
    a = torch.where(small, 1 - theta_sq / 6 + theta_sq**2 / 120, torch.sin(t) / t)
    b = torch.where(small, 0.5 - theta_sq / 24 + theta_sq**2 / 720, (1 - torch.cos(t)) / ts)
    c = torch.where(small, 1.0 / 6 - theta_sq / 120 + theta_sq**2 / 5040,
                    (t - torch.sin(t)) / (ts * t))
    return a, b, c


def apply_twist(twist: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Batched ``exp([w]) x + J_l(w) v`` for twists ``(..., 6) = (w, v)``."""
    w, v = twist[..., :3], twist[..., 3:]
    a, b, c = _twist_coeffs((w * w).sum(-1, keepdim=True))
    wx = _cross(w, x)
    rx = x + a * wx + b * _cross(w, wx)
    wv = _cross(w, v)
    gv = v + b * wv + c * _cross(w, wv)
    return rx + gv


class SceneModel(nn.Module):
    """Canonical field ``F = (F_sigma, F_c)``, flows ``M_bw``/``M_fw`` and per-frame codes."""

    def __init__(self, config: FieldConfig, n_frames: int,
                 scene_center=(0.0, 0.0, 0.0), scene_scale: float = 1.0):
        super().__init__()
        if n_frames < 1:
            raise ValueError("need at least one frame")
        if scene_scale <= 0:
            raise ValueError("scene scale must be positive")
        self.config = config
        self.n_frames = n_frames
        c = config
        px = encoded_size(3, c.point_bands)
        pt = encoded_size(1, c.time_bands)
        # F_sigma: trunk emitting raw density and a feature vector for F_c
        self.density_net = Mlp(px, c.width, c.depth, 1 + c.width, skip=c.skip)
        self.color_net = Mlp(c.width + c.code_dim, c.color_width, 1, 3)
        self.bw_net = Mlp(px + pt, c.width, c.depth, 6, skip=c.skip)
        self.fw_net = Mlp(px + pt, c.width, c.depth, 6, skip=c.skip)
        self.codes = nn.Parameter(torch.zeros(n_frames, c.code_dim))
        self.register_buffer("scene_center", torch.tensor(scene_center, dtype=torch.float64))
        self.register_buffer("scene_scale", torch.tensor(float(scene_scale), dtype=torch.float64))
        self.n_canonical_evals = 0

    # -- parameter groups ---------------------------------------------------
    def density_parameters(self):
        return list(self.density_net.parameters())

    def non_density_parameters(self):
        frozen = {id(p) for p in self.density_parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    # -- coordinates ----------------------------------------------------------
    @property
    def dtype(self):
        return self.codes.dtype

    def to_scene(self, x_world: torch.Tensor) -> torch.Tensor:
        return ((x_world - self.scene_center.to(x_world.dtype))
                / self.scene_scale.to(x_world.dtype))

    def to_world(self, x_scene: torch.Tensor) -> torch.Tensor:
        return (x_scene * self.scene_scale.to(x_scene.dtype)
                + self.scene_center.to(x_scene.dtype))

    def frame_time(self, i):
        return i / max(self.n_frames - 1, 1)

    # -- fields ---------------------------------------------------------------
    def _canonical_alpha(self, alpha):
        bands = self.config.point_bands
        if alpha is None or not self.config.anneal_canonical:
            return float(bands)
        return float(alpha)

    def density(self, x_canonical, alpha=None):
        """Raw-to-density ``sigma >= 0`` plus the trunk feature vector."""
        self.n_canonical_evals += x_canonical[..., 0].numel()
        enc = encode_point(x_canonical, AnnealState(self._canonical_alpha(alpha),
                                                    self.config.point_bands))
        out = self.density_net(enc)
        sigma = F.softplus(out[..., 0] + self.config.density_shift)
        return sigma, out[..., 1:]

    def canonical(self, x_canonical, code, alpha=None):
        sigma, feat = self.density(x_canonical, alpha)
        code = code.expand(*feat.shape[:-1], code.shape[-1])
        rgb = torch.sigmoid(self.color_net(torch.cat([feat, code], dim=-1)))
        return rgb, sigma

    def _flow(self, net, x, t, alpha):
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        t = t.expand(x.shape[:-1]) if t.dim() == 0 else t
        # trailing singleton keeps a one-point batch unambiguous
        enc = torch.cat([encode_point(x, AnnealState(float(alpha), self.config.point_bands)),
                         encode_time(t[..., None], self.config.time_bands)], dim=-1)
        return apply_twist(net(enc), x)

    def backward_flow(self, x, t, alpha):
        return self._flow(self.bw_net, x, t, alpha)

    def forward_flow(self, x_canonical, t, alpha):
        return self._flow(self.fw_net, x_canonical, t, alpha)


def eval_canonical(model: SceneModel, x_canonical, code, alpha=None):
    return model.canonical(x_canonical, code, alpha)


def backward_flow(model: SceneModel, x, t, alpha):
    return model.backward_flow(x, t, alpha)


def forward_flow(model: SceneModel, x_canonical, t, alpha):
    return model.forward_flow(x_canonical, t, alpha)


def zero_flow_heads(model: SceneModel) -> None:
    with torch.no_grad():
        for net in (model.bw_net, model.fw_net):
            net.layers[-1].weight.zero_()
            net.layers[-1].bias.zero_()


def init_scene_model(config: FieldConfig | str = "desk", seed: int = 0, *, n_frames: int,
                     scene_center=(0.0, 0.0, 0.0), scene_scale: float = 1.0) -> SceneModel:
    """Deterministic model construction.

    Linear layers use torch's default uniform fan-in init drawn from a private
    generator; flow output layers are zeroed so both flows start as the identity;
    appearance codes are ``N(0, code_std^2)``.
    """
    if isinstance(config, str):
        config = PRESETS[config]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SceneModel(config, n_frames, scene_center, scene_scale)
        with torch.no_grad():
            model.codes.normal_(0.0, config.code_std)
    zero_flow_heads(model)
    return model.to(config.torch_dtype)


# ---------------------------------------------------------------------------
# Checkpoints: ``.npz`` holding one array per state_dict entry (npy headers
# carry dtype and shape) plus ``__meta__``, a JSON string with the format tag,
# field config, frame count and array manifest.

class CheckpointError(RuntimeError):
    pass


def model_arrays(model: SceneModel) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def model_meta(model: SceneModel) -> dict:
    return {"format": CHECKPOINT_FORMAT, "config": asdict(model.config),
            "n_frames": model.n_frames}


def save_model(model: SceneModel, path) -> None:
    arrays = model_arrays(model)
    meta = model_meta(model)
    meta["arrays"] = {k: [str(a.dtype), list(a.shape)] for k, a in arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def read_npz(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays.pop("__meta__")))
    except Exception as exc:  # zip/npy/json failures all mean an unreadable file
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    return meta, arrays


def model_from_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> SceneModel:
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    config = FieldConfig(**meta["config"])
    model = SceneModel(config, meta["n_frames"]).to(config.torch_dtype)
    missing = [k for k in model.state_dict() if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks arrays: {missing}")
    state = {k: torch.from_numpy(np.array(arrays[k])) for k in model.state_dict()}
    model.load_state_dict(state)
    return model


def load_model(path) -> SceneModel:
    meta, arrays = read_npz(path)
    return model_from_arrays(meta, arrays)


def with_dtype(config: FieldConfig, dtype: str) -> FieldConfig:
    return replace(config, dtype=dtype)
