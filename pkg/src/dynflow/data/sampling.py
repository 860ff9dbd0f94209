"""Point sampling, background extraction and mesh location search."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import Aabb, CameraModel, TriMesh
from .synth import render_mask


@dataclass
class CorrespondenceSet:
    """Paired surface samples: ``obs[k]`` at time ``t`` corresponds to ``canon[k]``."""
    obs: np.ndarray
    canon: np.ndarray
    t: float
    triangles: np.ndarray
    bary: np.ndarray

    def __len__(self):
        return len(self.obs)


def extract_background(frames) -> np.ndarray:
    """Per-pixel, per-channel median over frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    return np.median(frames, axis=0)


def subsample_frames(frames, step: int):
    """Keep every ``step``-th frame (e.g. 24 -> 12 fps with ``step=2``)."""
    if step < 1:
        raise ValueError("step must be positive")
    return frames[::step]


def sample_correspondences(posed: TriMesh, canonical: TriMesh, count: int, rng, t: float = 0.0):
    if not posed.same_topology(canonical):
        raise ValueError("posed and canonical meshes must share topology")
    areas = posed.triangle_areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    obs = np.einsum("nk,nkd->nd", bary, posed.vertices[posed.faces[tri]])
    canon = np.einsum("nk,nkd->nd", bary, canonical.vertices[canonical.faces[tri]])
    return CorrespondenceSet(obs, canon, t, tri, bary)


class SamplingError(RuntimeError):
    pass


def sample_free_points(aabb: Aabb, posed: TriMesh | None, margin: float, count: int, rng,
                       batch: int = 4096) -> np.ndarray:
    """Uniform box samples farther than ``margin`` from every mesh vertex."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    tree = None
    if posed is not None and len(posed.vertices):
        tree = cKDTree(posed.vertices)
    kept, drawn, n_kept = [], 0, 0
    while n_kept < count:
        pts = aabb.lo + rng.random((batch, 3)) * aabb.extent
        drawn += batch
        if tree is not None:
            dist, _ = tree.query(pts)
            pts = pts[dist > margin]
        kept.append(pts)
        n_kept += len(pts)
        if drawn >= 10 * batch and n_kept < 0.01 * drawn:
            raise SamplingError("free-point rejection rate above 99%; box too tight")
    return np.concatenate(kept)[:count]


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def grid_location_search(mesh: TriMesh, target_mask, camera: CameraModel, grid: Aabb,
                         resolution=3, *, return_losses: bool = False):
    """Translation on a regular grid minimising ``1 - IoU`` of the rendered mask.

    Candidates are visited in lexicographic (x, y, z) order and only a strictly
    smaller loss replaces the incumbent, so ties resolve to the lexicographically
    smallest translation.
    """
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    axes = [np.linspace(grid.lo[k], grid.hi[k], res[k]) if res[k] > 1 else np.array([grid.center[k]])
            for k in range(3)]
    cands = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    losses = np.empty(len(cands))
    best, best_loss = None, np.inf
    for n, c in enumerate(cands):
        losses[n] = 1.0 - mask_iou(render_mask(mesh.translated(c), camera), target_mask)
        if losses[n] < best_loss:
            best, best_loss = c, losses[n]
    if return_losses:
        return best, cands, losses
    return best


def localize_meshes(dataset, half_extent: float = 0.05, resolution: int = 3):
    """Re-locate every per-frame mesh by grid search against the frame's mask.

    Returns a dataset copy whose meshes (and canonical mesh) carry the found
    translations.
    """
    grid = Aabb(-np.full(3, half_extent), np.full(3, half_extent))
    meshes = []
    for i, mesh in enumerate(dataset.meshes):
        off = grid_location_search(mesh, dataset.masks[i], dataset.camera, grid, resolution)
        meshes.append(mesh.translated(off))
    return replace(dataset, meshes=meshes, canonical=meshes[0])
