"""Image, pose and silhouette metrics plus the misalignment sensitivity study."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data.synth import render_mesh
from .rendering import render_image, save_png

INF_PSNR = math.inf

# Reference PSNR per misalignment, measured on other footage; display only.
REFERENCE_TRANSLATION_PSNR = {10: 20.46, 20: 17.44, 30: 16.38, 40: 15.51, 50: 14.84}
REFERENCE_ROTATION_PSNR = {5: 21.07, 10: 18.24, 15: 16.97, 20: 16.25, 25: 15.74, 30: 15.34}


class EvalError(RuntimeError):
    pass


def psnr(image_a, image_b) -> float:
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INF_PSNR
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class KeypointSet:
    """Named 2D keypoints ``(row, col)`` in pixels with visibility and object scale."""
    names: tuple
    points: np.ndarray
    visible: np.ndarray = None
    scale: float | None = None

    def __post_init__(self):
        self.names = tuple(self.names)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(len(self.names), 2)
        if self.visible is None:
            self.visible = np.ones(len(self.names), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.scale is not None and not self.scale > 0:
            raise ValueError("object scale must be positive")

    def bbox_scale(self) -> float:
        pts = self.points[self.visible]
        ext = pts.max(0) - pts.min(0)
        return float(math.sqrt(ext[0] * ext[1]))


def mask_scale(mask) -> float:
    """Square root of the area of the mask's bounding box."""
    rows, cols = np.nonzero(np.asarray(mask, bool))
    if len(rows) == 0:
        raise ValueError("empty mask has no scale")
    return float(math.sqrt((rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)))


def oks(pred: KeypointSet, gt: KeypointSet, kappa=0.1) -> float:
    """Object keypoint similarity after aligning the visible-keypoint centroids."""
    if pred.names != gt.names:
        raise ValueError("keypoint names differ")
    vis = pred.visible & gt.visible
    if not vis.any():
        raise EvalError("no mutually visible keypoints; OKS undefined")
    s = gt.scale if gt.scale is not None else gt.bbox_scale()
    if not s > 0:
        raise EvalError("ground-truth scale must be positive")
    k = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (len(gt.names),))[vis]
    p = pred.points[vis] - pred.points[vis].mean(0)
    g = gt.points[vis] - gt.points[vis].mean(0)
    d2 = ((p - g) ** 2).sum(-1)
    return float(np.mean(np.exp(-d2 / (2 * s * s * k * k))))


def silhouette_iou(mask_a, mask_b) -> float:
    a, b = np.asarray(mask_a, bool), np.asarray(mask_b, bool)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# misalignment study

def _warp(arr, matrix, offset, order=1):
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset, order=order, mode="constant", cval=0.0)
    return np.stack([_warp(arr[..., c], matrix, offset, order) for c in range(arr.shape[-1])], -1)


def _border_color(img):
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    return np.median(border, axis=0)


def misalign(image, matrix, offset, *, mask=None, background=None):
    """Resample ``image`` at ``matrix @ p + offset`` (output pixel ``p``).

    With a subject ``mask`` only the subject moves and the uncovered area shows
    ``background`` (default: the median unmasked colour).  Without a mask the
    whole image moves and the border colour fills in.
    """
    img = np.asarray(image, dtype=np.float64)
    if mask is None:
        fill = _border_color(img)
        return _warp(img - fill, matrix, offset) + fill
    m = np.asarray(mask, dtype=np.float64)
    if background is None:
        sel = m < 0.5
        background = np.median(img[sel], axis=0) if sel.any() else _border_color(img)
    bg = np.broadcast_to(np.asarray(background, np.float64), img.shape)
    moved = _warp(img * m[..., None], matrix, offset)
    return moved + (1.0 - _warp(m, matrix, offset))[..., None] * bg


def subject_centroid(image, mask=None):
    img = np.asarray(image, dtype=np.float64)
    if mask is None:
        diff = np.abs(img - _border_color(img)).sum(-1) > 1e-6
        mask = diff if diff.any() else np.ones(img.shape[:2], bool)
    rows, cols = np.nonzero(np.asarray(mask, bool))
    return np.array([rows.mean(), cols.mean()])


@dataclass
class StudyRow:
    kind: str        # "translation" or "rotation"
    amount: float    # pixels or degrees
    psnr: float
    reference: float | None = None


def misalignment_study(image, translations=(10, 20, 30, 40, 50), rotations=(5, 10, 15, 20, 25, 30),
                       *, mask=None, background=None, seed: int = 0) -> list[StudyRow]:
    """PSNR of translated/rotated copies of ``image`` against the original.

    Translations follow one seeded random direction, rotations one seeded
    random sense, about the subject centroid.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0.0, 2 * np.pi)
    direction = np.array([math.sin(ang), math.cos(ang)])
    sense = 1.0 if rng.random() < 0.5 else -1.0
    center = subject_centroid(img, mask)
    rows = []
    for amount in translations:
        shift = direction * float(amount)
        out = misalign(img, np.eye(2), -shift, mask=mask, background=background)
        rows.append(StudyRow("translation", float(amount), psnr(out, img),
                             REFERENCE_TRANSLATION_PSNR.get(int(amount)) if float(amount).is_integer() else None))
    for amount in rotations:
        th = sense * math.radians(float(amount))
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        offset = center - rot @ center
        out = misalign(img, rot, offset, mask=mask, background=background)
        rows.append(StudyRow("rotation", float(amount), psnr(out, img),
                             REFERENCE_ROTATION_PSNR.get(int(amount)) if float(amount).is_integer() else None))
    return rows


def format_study(rows: list[StudyRow]) -> str:
    lines = [f"{'transform':<12}{'amount':>8}{'psnr_db':>10}{'reference_db':>14}"]
    for r in rows:
        unit = "px" if r.kind == "translation" else "deg"
        ref = "-" if r.reference is None else f"{r.reference:.2f}"
        lines.append(f"{r.kind:<12}{f'{r.amount:g}{unit}':>8}{r.psnr:>10.2f}{ref:>14}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# novel-view evaluation

def crop_window(mask, size: int, shape) -> tuple[slice, slice]:
    """Square window of side ``size`` centred on the mask centroid, kept inside the image."""
    H, W = shape
    rows, cols = np.nonzero(np.asarray(mask, bool))
    if len(rows):
        cr, cc = rows.mean(), cols.mean()
    else:
        cr, cc = (H - 1) / 2, (W - 1) / 2
    def axis(c, n):
        s = min(size, n)
        start = int(round(c - (s - 1) / 2))
        start = min(max(start, 0), n - s)
        return slice(start, start + s)
    return axis(cr, H), axis(cc, W)


class ModelPredictor:
    """Renders a trained model and transfers canonical joints by the forward flow."""

    def __init__(self, model, dataset, *, alpha=None, n_coarse=64, n_fine=64, seed=0):
        self.model = model
        self.dataset = dataset
        self.alpha = float(model.config.point_bands if alpha is None else alpha)
        self.n_coarse, self.n_fine, self.seed = n_coarse, n_fine, seed
        canon = dataset.canonical.joints or {}
        if not all(n in canon for n in dataset.joint_names):
            raise EvalError("canonical mesh lacks joint positions for keypoint transfer")
        self.canonical_joints = np.array([canon[n] for n in dataset.joint_names])

    def render(self, camera, frame, background):
        return render_image(self.model, camera, frame, background, self.dataset.aabb(frame), self.alpha,
                            n_coarse=self.n_coarse, n_fine=self.n_fine, seed=self.seed)

    def joints3d(self, frame):
        m = self.model
        with torch.no_grad():
            x = m.to_scene(torch.as_tensor(self.canonical_joints, dtype=m.dtype))
            y = m.forward_flow(x, m.frame_time(frame), self.alpha)
            return m.to_world(y).double().numpy()


class OraclePredictor:
    """Ground-truth renderer; scores perfectly by construction."""

    def __init__(self, dataset):
        if dataset.gt_meshes is None:
            raise EvalError("oracle needs ground-truth meshes")
        self.dataset = dataset

    def render(self, camera, frame, background):
        img, mask, _ = render_mesh(self.dataset.gt_meshes[frame], camera, background)
        return np.round(np.clip(img, 0, 1) * 255.0) / 255.0, mask.astype(np.float64)

    def joints3d(self, frame):
        return self.dataset.joints3d[frame]


class EmptyPredictor:
    """Zero-density stand-in: renders only the background."""

    def __init__(self, dataset):
        self.dataset = dataset

    def render(self, camera, frame, background):
        bg = np.broadcast_to(np.asarray(background, np.float64), (camera.height, camera.width, 3))
        return bg.copy(), np.zeros((camera.height, camera.width))

    def joints3d(self, frame):
        return np.zeros((len(self.dataset.joint_names), 3))


@dataclass
class EvalReport:
    views: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    images: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"views": self.views, "means": self.means}


def _aggregate(rows, keys):
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def evaluate_novel_views(predictor, dataset, *, patch: int = 64, kappa: float = 0.1,
                         keep_images: bool = False) -> EvalReport:
    split = dataset.eval
    if split is None or len(split) == 0:
        raise EvalError("dataset has no held-out evaluation split")
    bg = dataset.novel_background
    report = EvalReport()
    for k in range(len(split)):
        cam, frame = split.cameras[k], split.frames[k]
        gt_img, gt_mask = split.images[k], split.masks[k]
        img, opacity = predictor.render(cam, frame, bg)
        pred_mask = np.asarray(opacity) > 0.5
        win = crop_window(gt_mask, patch, gt_mask.shape)
        # the background outside the GT silhouette is masked to the solid colour
        gt_masked = np.where(gt_mask[..., None], gt_img, bg)
        gt_kp = KeypointSet(dataset.joint_names, split.joints2d[k], scale=mask_scale(gt_mask))
        pred_kp = KeypointSet(dataset.joint_names, cam.project(predictor.joints3d(frame)))
        row = {"view": k, "frame": int(frame),
               "psnr": psnr(img[win], gt_masked[win]),
               "oks": oks(pred_kp, gt_kp, kappa),
               "iou": silhouette_iou(pred_mask[win], gt_mask[win])}
        report.views.append(row)
        if keep_images:
            report.images.append((gt_masked[win], np.asarray(img)[win]))
    report.means = _aggregate(report.views, ("psnr", "oks", "iou"))
    return report


def training_view_psnr(predictor, dataset, frames=None) -> list[float]:
    frames = range(dataset.frame_count) if frames is None else frames
    return [psnr(predictor.render(dataset.camera, i, dataset.background)[0], dataset.images[i])
            for i in frames]


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def contact_sheet(pairs, path, gap: int = 2) -> None:
    """One row per view: ground truth, prediction, absolute difference."""
    if not pairs:
        raise ValueError("nothing to draw")
    rows = []
    for gt, pred in pairs:
        h = gt.shape[0]
        sep = np.ones((h, gap, 3))
        rows.append(np.concatenate([gt, sep, pred, sep, np.abs(gt - pred)], 1))
    w = rows[0].shape[1]
    sheet = [rows[0]]
    for r in rows[1:]:
        sheet += [np.ones((gap, w, 3)), r]
    save_png(np.concatenate(sheet, 0), path)
