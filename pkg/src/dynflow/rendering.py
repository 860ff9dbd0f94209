"""Volume rendering of one observation frame through the backward flow."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .geometry import Aabb, CameraModel, ray_aabb_batch


@dataclass
class RenderOutput:
    color: torch.Tensor       # (R, 3)
    opacity: torch.Tensor     # (R,)
    weights: torch.Tensor     # (R, S)
    depths: torch.Tensor      # (R, S)

    @property
    def residual_transmittance(self):
        return 1.0 - self.opacity


@dataclass
class RayRender:
    """Coarse and fine composites for a batch of rays plus fine-pass samples.

    ``points``/``sigmas`` cover only the rays that hit the box (``hit``) and are
    in scene coordinates of the observation frame.
    """
    coarse: RenderOutput
    fine: RenderOutput | None
    hit: torch.Tensor
    points: torch.Tensor
    sigmas: torch.Tensor


def _uniforms(shape, rng, dtype):
    if rng is None:
        # deterministic fallback: bin centres
        return torch.full(shape, 0.5, dtype=dtype)
    return torch.as_tensor(rng.random(shape), dtype=dtype)


def stratified_depths(t_near, t_far, n: int, rng=None, u=None) -> torch.Tensor:
    """One depth per equal-width bin of ``[t_near, t_far]`` (bin centres if no rng)."""
    if n < 1:
        raise ValueError("need at least one sample")
    t_near = torch.as_tensor(t_near, dtype=torch.float64 if u is None else u.dtype)
    t_far = torch.as_tensor(t_far, dtype=t_near.dtype)
    if torch.any(t_far <= t_near):
        raise ValueError("degenerate depth interval")
    if u is None:
        u = _uniforms((*t_near.shape, n), rng, t_near.dtype)
    k = torch.arange(n, dtype=u.dtype)
    frac = (k + u) / n
    return t_near[..., None] + (t_far - t_near)[..., None] * frac


def importance_depths(bin_edges, weights, n: int, rng=None, u=None) -> torch.Tensor:
    """Inverse-CDF samples from the piecewise-constant PDF proportional to ``weights``.

    ``bin_edges`` is ``(..., B + 1)``, ``weights`` ``(..., B)``.  Stratified
    uniforms ``(k + u_k) / n`` keep the output sorted.  Rows whose weights are
    all zero fall back to a uniform PDF over the bins' span.
    """
    edges = torch.as_tensor(bin_edges)
    w = torch.as_tensor(weights, dtype=edges.dtype).clamp_min(0)
    total = w.sum(-1, keepdim=True)
    widths = edges[..., 1:] - edges[..., :-1]
    w = torch.where(total > 0, w, widths)
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    cdf[..., -1] = 1.0
    if u is None:
        u = _uniforms((*pdf.shape[:-1], n), rng, edges.dtype)
    u = (torch.arange(n, dtype=edges.dtype) + u) / n
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True)
    b = (idx - 1).clamp(0, pdf.shape[-1] - 1)
    p = torch.gather(pdf, -1, b)
    c0 = torch.gather(cdf, -1, b)
    e0 = torch.gather(edges, -1, b)
    e1 = torch.gather(edges, -1, b + 1)
    frac = torch.where(p > 0, (u - c0) / torch.where(p > 0, p, torch.ones_like(p)),
                       torch.zeros_like(u)).clamp(0, 1)
    return e0 + frac * (e1 - e0)


def composite(colors, sigmas, depths, background, t_far) -> RenderOutput:
    """Quadrature with an opaque background sample appended after ``t_far``.

    ``delta_i = depth_{i+1} - depth_i`` and the last real sample runs to ``t_far``.
    """
    depths = torch.as_tensor(depths)
    t_far = torch.as_tensor(t_far, dtype=depths.dtype)
    ends = torch.cat([depths[..., 1:], t_far[..., None]], -1)
    deltas = ends - depths
    tau = sigmas * deltas
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, -1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], -1))
    weights = trans * alpha
    t_final = torch.exp(-acc[..., -1])
    color = (weights[..., None] * colors).sum(-2) + t_final[..., None] * background
    return RenderOutput(color, 1.0 - t_final, weights, depths)


def _field_at(model, depths, o, d, t, code, alpha, canon_alpha, warp):
    x = model.to_scene(o[:, None, :] + depths[..., None] * d[:, None, :])
    xc = model.backward_flow(x, t, alpha) if warp else x
    rgb, sigma = model.canonical(xc, code, canon_alpha)
    return x, rgb, sigma


def render_rays(model, origins, dirs, frame: int, background, aabb: Aabb, alpha: float, *,
                n_coarse: int = 64, n_fine: int = 128, rng=None, uniforms=None,
                time: float | None = None, code=None, canonical_alpha=None,
                warp: bool = True) -> RayRender:
    """Render world-space rays of frame ``frame`` (time ``frame / (m - 1)``).

    Rays missing ``aabb`` return their background colour with zero opacity and
    never touch the networks.  ``warp=False`` skips the backward flow (static
    canonical rendering).  ``uniforms`` may supply per-ray ``(u_coarse,
    u_fine)`` arrays covering *all* rays, which makes results independent of how
    a caller chunks an image.
    """
    dtype = model.dtype
    o_np = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d_np = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    bg = torch.as_tensor(np.array(background, dtype=np.float64), dtype=dtype).reshape(-1, 3)
    if bg.shape[0] == 1:
        bg = bg.expand(len(o_np), 3)
    tn, tf, hit = ray_aabb_batch(o_np, d_np, aabb.lo, aabb.hi)
    idx = np.flatnonzero(hit)
    hit_t = torch.from_numpy(hit)
    t = model.frame_time(frame) if time is None else time
    if code is None:
        code = model.codes[frame]

    n_rays = len(o_np)
    o = torch.as_tensor(o_np[idx], dtype=dtype)
    d = torch.as_tensor(d_np[idx], dtype=dtype)
    t_near = torch.as_tensor(tn[idx], dtype=dtype)
    t_far = torch.as_tensor(tf[idx], dtype=dtype)
    bg_hit = bg[torch.from_numpy(idx)]

    if uniforms is not None:
        uc = torch.as_tensor(np.asarray(uniforms[0])[idx], dtype=dtype)
        uf = torch.as_tensor(np.asarray(uniforms[1])[idx], dtype=dtype) if n_fine else None
    elif rng is not None:
        uc = torch.as_tensor(rng.random((len(idx), n_coarse)), dtype=dtype)
        uf = torch.as_tensor(rng.random((len(idx), n_fine)), dtype=dtype) if n_fine else None
    else:
        uc = torch.full((len(idx), n_coarse), 0.5, dtype=dtype)
        uf = torch.full((len(idx), n_fine), 0.5, dtype=dtype) if n_fine else None

    def scatter(part: RenderOutput) -> RenderOutput:
        color = bg.clone()
        opacity = torch.zeros(n_rays, dtype=dtype)
        s = part.weights.shape[-1]
        weights = torch.zeros(n_rays, s, dtype=dtype)
        depths = torch.zeros(n_rays, s, dtype=dtype)
        ii = torch.from_numpy(idx)
        color = color.index_put((ii,), part.color)
        opacity = opacity.index_put((ii,), part.opacity)
        weights = weights.index_put((ii,), part.weights)
        depths = depths.index_put((ii,), part.depths)
        return RenderOutput(color, opacity, weights, depths)

    if len(idx) == 0:
        empty = RenderOutput(bg.clone(), torch.zeros(n_rays, dtype=dtype),
                             torch.zeros(n_rays, 0, dtype=dtype), torch.zeros(n_rays, 0, dtype=dtype))
        z = torch.zeros(0, 3, dtype=dtype)
        return RayRender(empty, empty if n_fine else None, hit_t, z, torch.zeros(0, dtype=dtype))

    zc = stratified_depths(t_near, t_far, n_coarse, u=uc)
    x, rgb, sigma = _field_at(model, zc, o, d, t, code, alpha, canonical_alpha, warp)
    coarse = composite(rgb, sigma, zc, bg_hit, t_far)
    if not n_fine:
        return RayRender(scatter(coarse), None, hit_t, x.reshape(-1, 3), sigma.reshape(-1))

    with torch.no_grad():
        edges = torch.cat([zc, t_far[:, None]], -1)
        zf = importance_depths(edges, coarse.weights.detach(), n_fine, u=uf)
        z_all, _ = torch.sort(torch.cat([zc, zf], -1), -1)
    x, rgb, sigma = _field_at(model, z_all, o, d, t, code, alpha, canonical_alpha, warp)
    fine = composite(rgb, sigma, z_all, bg_hit, t_far)
    return RayRender(scatter(coarse), scatter(fine), hit_t, x.reshape(-1, 3), sigma.reshape(-1))


def render_image(model, camera: CameraModel, frame: int, background, aabb: Aabb, alpha: float, *,
                 n_coarse: int = 64, n_fine: int = 128, seed: int | None = None,
                 chunk: int = 1024, time: float | None = None, code=None):
    """Render every pixel; returns ``(image (H, W, 3), opacity (H, W))`` numpy arrays.

    ``background`` is an ``(H, W, 3)`` image or a single RGB colour.  With a
    seed, all per-pixel uniforms are drawn up front so chunking cannot change
    the sample positions.
    """
    pix = camera.pixel_grid()
    o, d = camera.rays(pix)
    n = len(pix)
    bg = np.asarray(background, dtype=np.float64)
    bg = np.broadcast_to(bg.reshape(-1, 3), (n, 3)) if bg.size == 3 else bg.reshape(n, 3)
    uniforms = None
    if seed is not None:
        rng = np.random.default_rng(seed)
        uniforms = (rng.random((n, n_coarse)), rng.random((n, n_fine)))
    colors, opac = [], []
    with torch.no_grad():
        for s in range(0, n, chunk):
            sl = slice(s, s + chunk)
            u = None if uniforms is None else (uniforms[0][sl], uniforms[1][sl])
            out = render_rays(model, o[sl], d[sl], frame, bg[sl], aabb, alpha,
                              n_coarse=n_coarse, n_fine=n_fine, uniforms=u,
                              time=time, code=code)
            res = out.fine if out.fine is not None else out.coarse
            colors.append(res.color.double().numpy())
            opac.append(res.opacity.double().numpy())
    img = np.concatenate(colors).reshape(camera.height, camera.width, 3)
    return img, np.concatenate(opac).reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# 8-bit PNG I/O; floats are quantised as round(255 * clamp(v, 0, 1)).

def to_uint8(img) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def save_png(img, path) -> None:
    arr = to_uint8(img)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float64) / 255.0
