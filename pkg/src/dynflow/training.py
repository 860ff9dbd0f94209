"""Staged optimisation: density pretraining, flow initialisation, joint annealed fit."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data.dataset import FrameDataset
from .data.sampling import localize_meshes, sample_correspondences, sample_free_points
from .data.synth import render_mesh
from .encoding import anneal_alpha
from .fields import (FieldConfig, SceneModel, init_scene_model, model_arrays, model_from_arrays,
                     model_meta, read_npz, CheckpointError)
from .geometry import Aabb, CameraModel, build_frame_aabb, ray_aabb_batch
from .losses import (LossWeights, fit_terms, joint_objective, init_objective, moco_global,
                     moco_local, occupied_mask, photometric_loss)
from .rendering import render_rays

log = logging.getLogger(__name__)

STATE_FORMAT = "dynflow-train/1"


@dataclass(frozen=True)
class TrainSchedule:
    n_init: int = 2000           # N1
    n_anneal: int = 10000        # N2: alpha ramps 0 -> bands
    n_final: int = 5000          # N3: alpha held at bands
    rays: int = 384
    n_coarse: int = 64
    n_fine: int = 128
    lr: float = 5e-4
    lr_decay: float = 0.9999     # per iteration, multiplicative
    lr_floor: float = 1e-5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    moco: float = 0.2
    fit: float = 10.0
    eps: float = 0.01
    init_alpha: float = 0.0
    n_pairs: int = 512
    n_free: int = 512
    n_moco: int = 512
    free_margin: float = 0.05
    global_samples: int = 1
    pretrain_iters: int = 2000
    pretrain_views: int = 20
    pretrain_rays: int = 384
    pretrain_lr: float = 5e-4
    pretrain_background: tuple = (0.0, 0.0, 0.0)
    location_search: bool = False
    checkpoint_every: int = 0    # 0: only stage-end checkpoints
    divergence_threshold: float = 1e6
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("n_init", "n_anneal", "n_final", "rays", "n_coarse", "pretrain_views"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_fine < 0 or self.pretrain_iters < 0:
            raise ValueError("sample and iteration counts must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.moco, self.fit, self.eps)

    @property
    def total(self) -> int:
        return self.n_init + self.n_anneal + self.n_final

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["pretrain_background"] = list(self.pretrain_background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("adam_betas", "pretrain_background"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


SCHEDULES = {
    "desk": TrainSchedule(n_init=3000, n_anneal=4000, n_final=2000, rays=192,
                          n_coarse=32, n_fine=32, n_pairs=256, n_free=256, n_moco=256,
                          pretrain_iters=1500, pretrain_rays=256, lr=1e-3, pretrain_lr=1e-3),
    "spec-desk": TrainSchedule(n_init=2000, n_anneal=10000, n_final=5000),
    "people-snapshot": TrainSchedule(n_init=200_000, n_anneal=1_500_000, n_final=1_000_000),
    "aist": TrainSchedule(n_init=500_000, n_anneal=1_500_000, n_final=1_000_000),
    "zju-mocap": TrainSchedule(n_init=800_000, n_anneal=2_000_000, n_final=1_500_000),
}


def learning_rate(n: int, schedule: TrainSchedule) -> float:
    return max(schedule.lr * schedule.lr_decay ** n, schedule.lr_floor)


def alpha_at(n: int, schedule: TrainSchedule, bands: int) -> float:
    """Encoding window position at global iteration ``n`` (init stage first)."""
    if n < schedule.n_init:
        return schedule.init_alpha
    return anneal_alpha(n - schedule.n_init, schedule.n_anneal, bands)


def stage_at(n: int, schedule: TrainSchedule) -> str:
    if n < schedule.n_init:
        return "init"
    if n < schedule.total:
        return "joint"
    return "done"


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimiser

def make_optimizer(params, schedule: TrainSchedule, lr: float | None = None):
    return torch.optim.Adam(params, lr=schedule.lr if lr is None else lr,
                            betas=tuple(schedule.adam_betas), eps=schedule.adam_eps)


def optimizer_step(optimizer, loss: torch.Tensor, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    model: SceneModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    metrics: list = field(default_factory=list)
    stage: str = "init"


def new_train_state(model: SceneModel, schedule: TrainSchedule) -> TrainState:
    return TrainState(model, make_optimizer(model.parameters(), schedule),
                      np.random.default_rng(schedule.seed))


def set_density_frozen(model: SceneModel, frozen: bool) -> None:
    for p in model.density_parameters():
        p.requires_grad_(not frozen)


# ---------------------------------------------------------------------------
# batches

@dataclass
class FrameCache:
    """Per-frame quantities reused every iteration (stationary camera)."""
    origins: np.ndarray
    dirs: np.ndarray
    targets: np.ndarray
    background: np.ndarray
    boxes: list
    hit_pixels: list
    delta0: list

    @classmethod
    def build(cls, dataset: FrameDataset, n_coarse: int) -> "FrameCache":
        cam = dataset.camera
        o, d = cam.rays(cam.pixel_grid())
        boxes, hits, deltas = [], [], []
        for i in range(dataset.frame_count):
            box = dataset.aabb(i)
            tn, tf, hit = ray_aabb_batch(o, d, box.lo, box.hi)
            boxes.append(box)
            hits.append(np.flatnonzero(hit))
            deltas.append(float(np.mean(tf[hit] - tn[hit]) / n_coarse))
        return cls(o, d, dataset.images.reshape(dataset.frame_count, -1, 3),
                   dataset.background.reshape(-1, 3), boxes, hits, deltas)


@dataclass
class Batch:
    frame: int
    origins: np.ndarray
    dirs: np.ndarray
    target: np.ndarray
    background: np.ndarray
    aabb: Aabb
    alpha: float
    t_j: list
    obs: np.ndarray | None = None
    canon: np.ndarray | None = None
    free: np.ndarray | None = None
    delta0: float = 0.0


def sample_batch(state: TrainState, dataset: FrameDataset, cache: FrameCache,
                 schedule: TrainSchedule, with_fit: bool) -> Batch:
    rng = state.rng
    m = dataset.frame_count
    i = int(rng.integers(m))
    pix = cache.hit_pixels[i]
    sel = pix[rng.integers(len(pix), size=schedule.rays)]
    t_j = [float(dataset.times[j]) for j in rng.integers(m, size=schedule.global_samples)]
    batch = Batch(i, cache.origins[sel], cache.dirs[sel], cache.targets[i, sel],
                  cache.background[sel], cache.boxes[i],
                  alpha_at(state.iteration, schedule, state.model.config.point_bands), t_j,
                  delta0=cache.delta0[i])
    if with_fit:
        pairs = sample_correspondences(dataset.meshes[i], dataset.canonical, schedule.n_pairs, rng,
                                       float(dataset.times[i]))
        batch.obs, batch.canon = pairs.obs, pairs.canon
        if schedule.n_free:
            batch.free = sample_free_points(cache.boxes[i], dataset.meshes[i], schedule.free_margin,
                                            schedule.n_free, rng)
    return batch


def _scene(model, pts):
    return model.to_scene(torch.as_tensor(pts, dtype=model.dtype))


def train_step(state: TrainState, batch: Batch, schedule: TrainSchedule):
    """One Adam update; returns ``(state, metrics)`` with each loss term separately."""
    model = state.model
    lr = learning_rate(state.iteration, schedule)
    w = schedule.weights
    t_i = model.frame_time(batch.frame)
    out = render_rays(model, batch.origins, batch.dirs, batch.frame, batch.background, batch.aabb,
                      batch.alpha, n_coarse=schedule.n_coarse, n_fine=schedule.n_fine, rng=state.rng)
    levels = [out.coarse] + ([out.fine] if out.fine is not None else [])
    target = torch.as_tensor(batch.target, dtype=model.dtype)
    photo = photometric_loss([lv.color for lv in levels], target)

    zero = torch.zeros((), dtype=model.dtype)
    m_local, m_global = zero, zero
    if w.moco > 0:
        keep = torch.nonzero(occupied_mask(out.sigmas, w.eps)).squeeze(-1)
        if len(keep) > schedule.n_moco:
            pick = state.rng.choice(len(keep), size=schedule.n_moco, replace=False)
            keep = keep[torch.from_numpy(np.sort(pick))]
        pts = out.points.detach()[keep]
        m_local = moco_local(model, pts, t_i, batch.alpha)
        m_global = sum(moco_global(model, pts, t_i, t_j, batch.alpha) for t_j in batch.t_j) / len(batch.t_j)
    moco = m_local + m_global

    fit = zero
    if batch.obs is not None:
        free = _scene(model, batch.free) if batch.free is not None else _scene(model, np.zeros((0, 3)))
        bw, fw, bce = fit_terms(model, _scene(model, batch.obs), _scene(model, batch.canon), free,
                                t_i, batch.alpha, batch.delta0)
        fit = bw + fw + bce
        loss = init_objective(photo, moco, fit, w)
    else:
        loss = joint_objective(photo, moco, w)

    value = float(loss.detach())
    if not math.isfinite(value) or value > schedule.divergence_threshold:
        raise DivergenceError(f"loss {value} at iteration {state.iteration}")
    if lr > 0:
        optimizer_step(state.optimizer, loss, lr)
    metrics = {"iteration": state.iteration, "stage": stage_at(state.iteration, schedule),
               "loss": value, "photo": photo.item(), "moco_local": m_local.item(),
               "moco_global": m_global.item(), "fit": fit.item(), "lr": lr, "alpha": batch.alpha}
    state.iteration += 1
    return state, metrics


# ---------------------------------------------------------------------------
# stages

def sphere_cameras(n: int, target, distance: float, focal: float, width: int, height: int):
    """``n`` look-at cameras on a Fibonacci sphere around ``target``."""
    cams = []
    golden = math.pi * (3 - math.sqrt(5))
    for k in range(n):
        y = 1 - 2 * (k + 0.5) / n
        r = math.sqrt(1 - y * y)
        eye = np.asarray(target) + distance * np.array([r * math.cos(golden * k), y,
                                                         r * math.sin(golden * k)])
        up = (0.0, 0.0, 1.0) if abs(y) > 0.99 else (0.0, 1.0, 0.0)
        cams.append(CameraModel.look_at(eye, target, up, focal=focal, width=width, height=height))
    return cams


def pretrain_views(mesh, n_views: int, template: CameraModel, background, distance=None):
    box = mesh.bounds()
    if distance is None:
        distance = float(np.linalg.norm(template.center - box.center))
    cams = sphere_cameras(n_views, box.center, distance, template.fx, template.width, template.height)
    images = [render_mesh(mesh, cam, background)[0] for cam in cams]
    return cams, images


def pretrain_density(model: SceneModel, mesh, template: CameraModel, schedule: TrainSchedule,
                     *, views=None, callback: Callable | None = None) -> list[float]:
    """Fit the canonical field alone (identity warp) to multi-view renders of ``mesh``."""
    if schedule.pretrain_iters == 0:
        return []
    rng = np.random.default_rng(schedule.seed + 7919)
    bg = np.asarray(schedule.pretrain_background, dtype=np.float64)
    cams, images = views if views is not None else pretrain_views(mesh, schedule.pretrain_views, template, bg)
    box = build_frame_aabb(mesh, 0.2, 0.4)
    rays_o, rays_d, targets = [], [], []
    for cam, img in zip(cams, images):
        o, d = cam.rays(cam.pixel_grid())
        _, _, hit = ray_aabb_batch(o, d, box.lo, box.hi)
        rays_o.append(o[hit]); rays_d.append(d[hit]); targets.append(img.reshape(-1, 3)[hit])
    rays_o, rays_d, targets = map(np.concatenate, (rays_o, rays_d, targets))
    params = list(model.density_net.parameters()) + list(model.color_net.parameters())
    opt = make_optimizer(params, schedule, schedule.pretrain_lr)
    code = torch.zeros(model.config.code_dim, dtype=model.dtype)
    losses = []
    for n in range(schedule.pretrain_iters):
        sel = rng.integers(len(targets), size=schedule.pretrain_rays)
        out = render_rays(model, rays_o[sel], rays_d[sel], 0, bg[None], box, 0.0,
                          n_coarse=schedule.n_coarse, n_fine=schedule.n_fine, rng=rng,
                          code=code, warp=False)
        levels = [out.coarse] + ([out.fine] if out.fine is not None else [])
        loss = photometric_loss([lv.color for lv in levels], torch.as_tensor(targets[sel], dtype=model.dtype))
        lr = max(schedule.pretrain_lr * schedule.lr_decay ** n, schedule.lr_floor)
        optimizer_step(opt, loss, lr)
        losses.append(float(loss.detach()))
        if callback is not None and (n + 1) % schedule.log_every == 0:
            callback({"iteration": n, "stage": "pretrain", "loss": losses[-1], "lr": lr})
    return losses


def _run_until(state, dataset, schedule, end, with_fit, callback, ckpt=None):
    cache = FrameCache.build(dataset, schedule.n_coarse)
    while state.iteration < end:
        batch = sample_batch(state, dataset, cache, schedule, with_fit)
        try:
            state, metrics = train_step(state, batch, schedule)
        except DivergenceError:
            if ckpt is not None:
                save_checkpoint(state, Path(ckpt) / "diverged.npz", schedule)
            raise
        if state.iteration % schedule.log_every == 0 or state.iteration == end:
            state.metrics.append(metrics)
            if callback is not None:
                callback(metrics)
        every = schedule.checkpoint_every
        if ckpt is not None and every and state.iteration % every == 0:
            save_checkpoint(state, Path(ckpt) / "latest.npz", schedule)
    return state


def run_init_stage(state: TrainState, dataset: FrameDataset, schedule: TrainSchedule,
                   callback=None, checkpoint_dir=None) -> TrainState:
    """Fit flows and colour branch with ``L_init`` while the density trunk stays frozen."""
    set_density_frozen(state.model, True)
    try:
        state.stage = "init"
        state = _run_until(state, dataset, schedule, schedule.n_init, True, callback, checkpoint_dir)
    finally:
        set_density_frozen(state.model, False)
    return state


def run_joint_stage(state: TrainState, dataset: FrameDataset, schedule: TrainSchedule,
                    callback=None, checkpoint_dir=None) -> TrainState:
    """Joint ``L_joint`` optimisation of every network, annealing then holding alpha."""
    set_density_frozen(state.model, False)
    state.stage = "joint"
    state = _run_until(state, dataset, schedule, schedule.total, False, callback, checkpoint_dir)
    state.stage = "done"
    return state


def build_model(dataset: FrameDataset, config: FieldConfig | str = "desk", seed: int = 0) -> SceneModel:
    return init_scene_model(config, seed, n_frames=dataset.frame_count,
                            scene_center=tuple(dataset.scene_center), scene_scale=dataset.scene_scale)


def train(dataset: FrameDataset, schedule: TrainSchedule, config: FieldConfig | str = "desk", *,
          callback=None, state: TrainState | None = None, checkpoint_dir=None) -> TrainState:
    """Full pipeline: pretrain -> init stage -> joint stage (resumes from ``state``).

    With ``schedule.location_search`` the per-frame meshes are first re-located
    against the masks; the search is deterministic, so resuming repeats it.
    """
    ckpt = None if checkpoint_dir is None else Path(checkpoint_dir)
    if schedule.location_search:
        dataset = localize_meshes(dataset)
    if state is None:
        model = build_model(dataset, config, schedule.seed)
        pretrain_density(model, dataset.canonical, dataset.camera, schedule, callback=callback)
        state = new_train_state(model, schedule)
    if state.iteration < schedule.n_init:
        state = run_init_stage(state, dataset, schedule, callback, ckpt)
        if ckpt is not None:
            save_checkpoint(state, ckpt / "init.npz", schedule)
    if state.iteration < schedule.total:
        state = run_joint_stage(state, dataset, schedule, callback, ckpt)
    if ckpt is not None:
        save_checkpoint(state, ckpt / "final.npz", schedule)
    return state


# ---------------------------------------------------------------------------
# checkpoints: same npz container as model checkpoints; optimiser moments are
# stored as ``opt/<param index>/<name>`` arrays and the rng state in the JSON meta.

def save_checkpoint(state: TrainState, path, schedule: TrainSchedule | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": v for k, v in model_arrays(state.model).items()}
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for name, val in st.items():
            arrays[f"opt/{idx}/{name}"] = torch.as_tensor(val).detach().cpu().numpy()
    meta = {"format": STATE_FORMAT, "model": model_meta(state.model),
            "iteration": state.iteration, "stage": state.stage,
            "param_groups": opt["param_groups"], "rng": state.rng.bit_generator.state,
            "metrics": state.metrics,
            "schedule": None if schedule is None else schedule.to_dict()}
    meta["arrays"] = {k: [str(a.dtype), list(a.shape)] for k, a in arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[TrainState, TrainSchedule | None]:
    meta, arrays = read_npz(path)
    if meta.get("format") != STATE_FORMAT:
        raise CheckpointError(f"not a training checkpoint: {path}")
    try:
        model = model_from_arrays(meta["model"], {k[6:]: v for k, v in arrays.items()
                                                  if k.startswith("model/")})
        schedule = None if meta["schedule"] is None else TrainSchedule.from_dict(meta["schedule"])
        optimizer = make_optimizer(model.parameters(), schedule or TrainSchedule())
        opt_state: dict = {}
        for key, val in arrays.items():
            if key.startswith("opt/"):
                _, idx, name = key.split("/")
                opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(val))
        optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint {path}: {exc}") from exc
    return TrainState(model, optimizer, rng, meta["iteration"], meta["metrics"], meta["stage"]), schedule
