"""In-memory frame dataset and its on-disk directory format.

Directory layout (all JSON floats are written with full precision)::

    frames/0000.png ...        8-bit RGB input frames
    masks/0000.png ...         8-bit subject masks (0 / 255)
    meshes/0000.obj ...        per-frame body estimate (+ 0000.joints.json)
    meshes_gt/0000.obj ...     optional clean meshes with vertex colours
    canonical.obj              canonical body (+ canonical.joints.json)
    keypoints.json             {"names": [...], "frames": [{"joints3d": {name: [x, y, z]},
                                                           "joints2d": {name: [row, col]}}]}
    camera.json                CameraModel.to_dict()
    background.png             static background image
    meta.json                  {"version", "frame_count", "times", "scene_center",
                                "scene_scale", "fps", "novel_background",
                                "aabb_margins", "vertex_parts"}
    eval/views.json            [{"frame": i, "camera": {...}, "joints2d": [[row, col], ...]}]
    eval/frames/0000.png, eval/masks/0000.png
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Aabb, CameraModel, TriMesh, build_frame_aabb, read_obj, write_obj
from ..rendering import load_png, save_png

DATASET_VERSION = 1


class DatasetError(RuntimeError):
    pass


class DatasetVersionError(DatasetError):
    pass


@dataclass
class EvalSplit:
    cameras: list[CameraModel]
    frames: list[int]
    images: np.ndarray        # (V, H, W, 3), subject over the novel-view background
    masks: np.ndarray         # (V, H, W) bool
    joints2d: np.ndarray      # (V, J, 2)

    def __len__(self):
        return len(self.frames)


@dataclass
class FrameDataset:
    images: np.ndarray
    masks: np.ndarray
    times: np.ndarray
    camera: CameraModel
    background: np.ndarray
    meshes: list[TriMesh]
    canonical: TriMesh
    joint_names: list[str]
    joints3d: np.ndarray
    joints2d: np.ndarray
    scene_center: np.ndarray
    scene_scale: float
    fps: float = 12.0
    novel_background: np.ndarray = field(default_factory=lambda: np.ones(3))
    gt_meshes: list[TriMesh] | None = None
    vertex_parts: np.ndarray | None = None
    eval: EvalSplit | None = None
    aabb_margins: tuple = (0.2, 0.4)

    def __post_init__(self):
        m = len(self.images)
        lengths = {len(self.masks), len(self.times), len(self.meshes), len(self.joints3d),
                   len(self.joints2d)}
        if self.gt_meshes is not None:
            lengths.add(len(self.gt_meshes))
        if lengths != {m}:
            raise DatasetError("per-frame lists disagree in length")
        if self.times[0] != 0:
            raise DatasetError("first frame must be at t = 0")
        for mesh in self.meshes:
            if not mesh.same_topology(self.canonical):
                raise DatasetError("posed meshes must share the canonical topology")

    @property
    def frame_count(self) -> int:
        return len(self.images)

    def aabb(self, i: int) -> Aabb:
        return build_frame_aabb(self.meshes[i], *self.aabb_margins)

    def nearest_frame(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))


def _frames_dir(root: Path, name: str) -> Path:
    p = root / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def save_dataset(ds: FrameDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames, masks = _frames_dir(root, "frames"), _frames_dir(root, "masks")
    meshes = _frames_dir(root, "meshes")
    for i in range(ds.frame_count):
        save_png(ds.images[i], frames / f"{i:04d}.png")
        save_png(np.repeat(ds.masks[i][..., None].astype(np.float64), 3, -1), masks / f"{i:04d}.png")
        write_obj(ds.meshes[i], meshes / f"{i:04d}.obj")
    if ds.gt_meshes is not None:
        gt = _frames_dir(root, "meshes_gt")
        for i, mesh in enumerate(ds.gt_meshes):
            write_obj(mesh, gt / f"{i:04d}.obj")
    write_obj(ds.canonical, root / "canonical.obj")
    kp = {"names": ds.joint_names,
          "frames": [{"joints3d": {n: ds.joints3d[i, j].tolist() for j, n in enumerate(ds.joint_names)},
                      "joints2d": {n: ds.joints2d[i, j].tolist() for j, n in enumerate(ds.joint_names)}}
                     for i in range(ds.frame_count)]}
    (root / "keypoints.json").write_text(json.dumps(kp, indent=1))
    (root / "camera.json").write_text(json.dumps(ds.camera.to_dict(), indent=1))
    save_png(ds.background, root / "background.png")
    meta = {"version": DATASET_VERSION, "frame_count": ds.frame_count,
            "times": ds.times.tolist(), "scene_center": np.asarray(ds.scene_center).tolist(),
            "scene_scale": float(ds.scene_scale), "fps": ds.fps,
            "novel_background": np.asarray(ds.novel_background).tolist(),
            "aabb_margins": list(ds.aabb_margins),
            "vertex_parts": None if ds.vertex_parts is None else ds.vertex_parts.tolist()}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    if ds.eval is not None:
        ev = root / "eval"
        ef, em = _frames_dir(ev, "frames"), _frames_dir(ev, "masks")
        views = []
        for k in range(len(ds.eval)):
            save_png(ds.eval.images[k], ef / f"{k:04d}.png")
            save_png(np.repeat(ds.eval.masks[k][..., None].astype(np.float64), 3, -1), em / f"{k:04d}.png")
            views.append({"frame": ds.eval.frames[k], "camera": ds.eval.cameras[k].to_dict(),
                          "joints2d": ds.eval.joints2d[k].tolist()})
        (ev / "views.json").write_text(json.dumps(views, indent=1))


def _need(path: Path) -> Path:
    if not path.exists():
        raise DatasetError(f"dataset is missing required file: {path}")
    return path


def _load_mask(path: Path) -> np.ndarray:
    return load_png(_need(path))[..., 0] > 0.5


def load_dataset(path) -> FrameDataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    meta = json.loads(_need(root / "meta.json").read_text())
    if meta.get("version") != DATASET_VERSION:
        raise DatasetVersionError(
            f"dataset version {meta.get('version')!r} is incompatible with reader version {DATASET_VERSION}")
    m = meta["frame_count"]
    images = np.stack([load_png(_need(root / "frames" / f"{i:04d}.png")) for i in range(m)])
    masks = np.stack([_load_mask(root / "masks" / f"{i:04d}.png") for i in range(m)])
    meshes = [read_obj(_need(root / "meshes" / f"{i:04d}.obj")) for i in range(m)]
    gt_meshes = None
    if (root / "meshes_gt").is_dir():
        gt_meshes = [read_obj(_need(root / "meshes_gt" / f"{i:04d}.obj")) for i in range(m)]
    kp = json.loads(_need(root / "keypoints.json").read_text())
    names = kp["names"]
    joints3d = np.array([[f["joints3d"][n] for n in names] for f in kp["frames"]], dtype=np.float64)
    joints2d = np.array([[f["joints2d"][n] for n in names] for f in kp["frames"]], dtype=np.float64)
    camera = CameraModel.from_dict(json.loads(_need(root / "camera.json").read_text()))
    eval_split = None
    if (root / "eval").is_dir():
        views = json.loads(_need(root / "eval" / "views.json").read_text())
        eval_split = EvalSplit(
            [CameraModel.from_dict(v["camera"]) for v in views],
            [int(v["frame"]) for v in views],
            np.stack([load_png(_need(root / "eval" / "frames" / f"{k:04d}.png")) for k in range(len(views))]),
            np.stack([_load_mask(root / "eval" / "masks" / f"{k:04d}.png") for k in range(len(views))]),
            np.array([v["joints2d"] for v in views], dtype=np.float64))
    vp = meta.get("vertex_parts")
    return FrameDataset(
        images=images, masks=masks, times=np.array(meta["times"], dtype=np.float64), camera=camera,
        background=load_png(_need(root / "background.png")), meshes=meshes,
        canonical=read_obj(_need(root / "canonical.obj")), joint_names=names,
        joints3d=joints3d, joints2d=joints2d, scene_center=np.array(meta["scene_center"]),
        scene_scale=float(meta["scene_scale"]), fps=meta.get("fps", 12.0),
        novel_background=np.array(meta["novel_background"]), gt_meshes=gt_meshes,
        vertex_parts=None if vp is None else np.array(vp, dtype=np.int64), eval=eval_split,
        aabb_margins=tuple(meta.get("aabb_margins", (0.2, 0.4))))
