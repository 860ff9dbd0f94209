"""Synthetic articulated subject filmed by a stationary camera.

The body is a small tree of ellipsoids posed by a scripted motion.  Frame 0
defines the canonical pose.  Besides the clean ("ground truth") mesh track the
generator emits a perturbed track that stands in for a rough per-frame body
estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import CameraModel, TriMesh, build_frame_aabb, intersect_rays_mesh, so3_exp
from .dataset import EvalSplit, FrameDataset


@dataclass(frozen=True)
class BodyPart:
    name: str
    parent: str | None
    pivot: tuple          # joint location in the rest pose (m)
    center: tuple         # ellipsoid centre in the rest pose (m)
    radii: tuple
    color: tuple
    stripe_color: tuple | None = None
    axis: tuple = (0.0, 0.0, 1.0)   # joint rotation axis
    amplitude: float = 0.0          # joint angle amplitude (rad)
    frequency: float = 1.0          # cycles over t in [0, 1]
    phase: float = 0.0
    keypoints: tuple = ()           # ((name, (x, y, z)), ...) in the rest pose


def default_body() -> tuple[BodyPart, ...]:
    return (
        BodyPart("torso", None, (0.0, 0.0, 0.0), (0.0, 0.25, 0.0), (0.2, 0.3, 0.13),
                 (0.85, 0.25, 0.2), (0.95, 0.85, 0.3),
                 keypoints=(("neck", (0.0, 0.53, 0.0)), ("pelvis", (0.0, 0.0, 0.0)))),
        BodyPart("head", "torso", (0.0, 0.53, 0.0), (0.0, 0.68, 0.02), (0.1, 0.13, 0.11),
                 (0.95, 0.75, 0.6), (0.25, 0.15, 0.1), axis=(0.0, 1.0, 0.0),
                 amplitude=0.35, frequency=1.0, keypoints=(("head_top", (0.0, 0.81, 0.02)),)),
        BodyPart("l_arm", "torso", (0.19, 0.45, 0.0), (0.45, 0.45, 0.0), (0.28, 0.065, 0.065),
                 (0.2, 0.7, 0.3), (0.1, 0.3, 0.9), axis=(0.0, 0.0, 1.0),
                 amplitude=0.5, frequency=1.0,
                 keypoints=(("l_shoulder", (0.19, 0.45, 0.0)), ("l_hand", (0.72, 0.45, 0.0)))),
        BodyPart("r_arm", "torso", (-0.19, 0.45, 0.0), (-0.45, 0.45, 0.0), (0.28, 0.065, 0.065),
                 (0.2, 0.7, 0.3), (0.9, 0.9, 0.2), axis=(0.0, 0.0, 1.0),
                 amplitude=0.5, frequency=1.0, phase=np.pi,
                 keypoints=(("r_shoulder", (-0.19, 0.45, 0.0)), ("r_hand", (-0.72, 0.45, 0.0)))),
        BodyPart("legs", "torso", (0.0, -0.02, 0.0), (0.0, -0.45, 0.0), (0.17, 0.45, 0.12),
                 (0.2, 0.3, 0.75), (0.9, 0.9, 0.9), axis=(1.0, 0.0, 0.0),
                 amplitude=0.15, frequency=1.0, keypoints=(("feet", (0.0, -0.9, 0.0)),)),
    )


@dataclass(frozen=True)
class SynthConfig:
    parts: tuple = field(default_factory=default_body)
    frame_count: int = 8
    width: int = 64
    height: int = 64
    focal: float = 115.0
    camera_distance: float = 4.0
    camera_height: float = 0.0
    # root turns left then right: yaw(t) = root_yaw * sin(2 pi t).  Staying clear of
    # a half turn from frame 0 keeps the flows' twists away from the rotation-by-pi cut.
    root_yaw: float = 0.75 * np.pi
    root_translation: tuple = (0.15, 0.0, 0.0)  # total root displacement (m)
    lat_steps: int = 12
    lon_steps: int = 20
    rotation_noise_deg: float = 0.0
    translation_noise_m: float = 0.0
    joint_noise_deg: float = 0.0
    eval_azimuths_deg: tuple = (90.0, 180.0, 270.0)
    eval_frames: tuple | None = None        # None: every other frame
    eval_elevation: float = 0.0
    novel_background: tuple = (1.0, 1.0, 1.0)
    fps: float = 12.0
    aabb_margins: tuple = (0.2, 0.4)

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("need at least two frames")
        names = [p.name for p in self.parts]
        for p in self.parts:
            if p.parent is not None and p.parent not in names[:names.index(p.name)]:
                raise ValueError(f"parent of {p.name} must precede it")

    def noisy(self, rotation_deg=10.0, translation_m=0.05, joint_deg=5.0) -> "SynthConfig":
        return replace(self, rotation_noise_deg=rotation_deg,
                       translation_noise_m=translation_m, joint_noise_deg=joint_deg)


def _rigid(rot, pivot) -> np.ndarray:
    """4x4 rotation about ``pivot``."""
    T = np.eye(4)
    T[:3, :3] = rot
    T[:3, 3] = pivot - rot @ pivot
    return T


def _translation(v) -> np.ndarray:
    T = np.eye(4)
    T[:3, 3] = v
    return T


def part_transforms(config: SynthConfig, t: float, joint_jitter=None) -> dict[str, np.ndarray]:
    """Rest-pose -> posed 4x4 transform of every part at normalised time ``t``."""
    out: dict[str, np.ndarray] = {}
    for i, p in enumerate(config.parts):
        if p.parent is None:
            yaw = so3_exp(np.array([0.0, config.root_yaw * np.sin(2 * np.pi * t), 0.0]))
            local = _translation(np.asarray(config.root_translation) * t) @ _rigid(yaw, np.asarray(p.pivot))
            out[p.name] = local
            continue
        angle = p.amplitude * np.sin(2 * np.pi * p.frequency * t + p.phase)
        if joint_jitter is not None:
            angle += joint_jitter[i]
        axis = np.asarray(p.axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        out[p.name] = out[p.parent] @ _rigid(so3_exp(axis * angle), np.asarray(p.pivot))
    return out


def canonical_to_frame(config: SynthConfig, t: float) -> dict[str, np.ndarray]:
    """Ground-truth flow: canonical (frame 0) -> time ``t`` transform of every part."""
    t0 = part_transforms(config, 0.0)
    tt = part_transforms(config, t)
    return {k: tt[k] @ np.linalg.inv(t0[k]) for k in tt}


def _apply(T, pts):
    return pts @ T[:3, :3].T + T[:3, 3]


def ellipsoid_mesh(center, radii, lat_steps, lon_steps):
    th = np.linspace(0.0, np.pi, lat_steps + 1)[1:-1]
    ph = np.linspace(0.0, 2 * np.pi, lon_steps, endpoint=False)
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    unit = np.stack([np.sin(TH) * np.cos(PH), np.cos(TH), np.sin(TH) * np.sin(PH)], -1).reshape(-1, 3)
    unit = np.concatenate([[[0.0, 1.0, 0.0]], unit, [[0.0, -1.0, 0.0]]])
    verts = np.asarray(center) + unit * np.asarray(radii)
    faces = []
    ring = lambda r, j: 1 + r * lon_steps + (j % lon_steps)
    nr = lat_steps - 1
    for j in range(lon_steps):
        faces.append([0, ring(0, j + 1), ring(0, j)])
        faces.append([len(verts) - 1, ring(nr - 1, j), ring(nr - 1, j + 1)])
        for r in range(nr - 1):
            a, b = ring(r, j), ring(r, j + 1)
            c, d = ring(r + 1, j), ring(r + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
    return verts, np.array(faces, dtype=np.int64), unit


def _part_colors(part: BodyPart, unit):
    base = np.broadcast_to(np.asarray(part.color, dtype=np.float64), unit.shape).copy()
    if part.stripe_color is None:
        return base
    # horizontal bands on the front half and a vertical stripe on the back:
    # gives the photometric loss something to lock onto and breaks yaw symmetry
    stripes = (np.sin(unit[:, 1] * 3 * np.pi) > 0.3) & (unit[:, 2] > 0.0)
    back = (unit[:, 2] < -0.2) & (np.abs(unit[:, 0]) < 0.35)
    base[stripes | back] = part.stripe_color
    return base


def build_body(config: SynthConfig):
    """Rest-pose mesh, per-vertex part index, and rest-pose keypoints."""
    verts, faces, cols, parts = [], [], [], []
    offset = 0
    for i, p in enumerate(config.parts):
        v, f, unit = ellipsoid_mesh(p.center, p.radii, config.lat_steps, config.lon_steps)
        verts.append(v)
        faces.append(f + offset)
        cols.append(_part_colors(p, unit))
        parts.append(np.full(len(v), i))
        offset += len(v)
    keypoints = {name: (i, np.asarray(pos, dtype=np.float64))
                 for i, p in enumerate(config.parts) for name, pos in p.keypoints}
    return (TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(cols)),
            np.concatenate(parts), keypoints)


def pose_body(config, rest: TriMesh, vertex_parts, keypoints, transforms, *, colors=True) -> TriMesh:
    v = rest.vertices.copy()
    for i, p in enumerate(config.parts):
        sel = vertex_parts == i
        v[sel] = _apply(transforms[p.name], rest.vertices[sel])
    joints = {name: _apply(transforms[config.parts[i].name], pos[None])[0]
              for name, (i, pos) in keypoints.items()}
    return TriMesh(v, rest.faces.copy(), rest.colors.copy() if colors else None, joints)


def render_mesh(mesh: TriMesh, camera: CameraModel, background, default_color=(0.6, 0.6, 0.6)):
    """Unlit render: barycentric vertex colours (or a flat colour) over ``background``.

    Returns ``(image, mask, depth)``.
    """
    pix = camera.pixel_grid()
    o, d = camera.rays(pix)
    t, tri, bary = intersect_rays_mesh(o, d, mesh)
    hit = tri >= 0
    bg = np.asarray(background, dtype=np.float64)
    img = np.broadcast_to(bg.reshape(-1, 3) if bg.size == 3 else bg.reshape(-1, 3),
                          (len(pix), 3)).copy()
    if mesh.colors is not None:
        vc = mesh.colors[mesh.faces[tri[hit]]]
        img[hit] = np.einsum("rk,rkc->rc", bary[hit], vc)
    else:
        img[hit] = default_color
    H, W = camera.height, camera.width
    return img.reshape(H, W, 3), hit.reshape(H, W), t.reshape(H, W)


def render_mask(mesh: TriMesh, camera: CameraModel) -> np.ndarray:
    o, d = camera.rays(camera.pixel_grid())
    _, tri, _ = intersect_rays_mesh(o, d, mesh)
    return (tri >= 0).reshape(camera.height, camera.width)


def make_background(width, height) -> np.ndarray:
    """Static backdrop: a smooth two-tone gradient with a faint grid."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([max(height - 1, 1), max(width - 1, 1)])[:, None, None]
    img = np.empty((height, width, 3))
    img[..., 0] = 0.35 + 0.25 * xx
    img[..., 1] = 0.45 + 0.2 * yy
    img[..., 2] = 0.55 - 0.15 * xx * yy
    grid = ((np.arange(height)[:, None] % 8 == 0) | (np.arange(width)[None, :] % 8 == 0))
    img[grid] *= 0.85
    return img


def quantize(img):
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def _perturbation(config: SynthConfig, rng, root_pivot):
    """Random rigid error: rotation <= rotation_noise_deg about the root, translation <= max."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(config.rotation_noise_deg) * rng.uniform()
    dirn = rng.normal(size=3)
    dirn /= np.linalg.norm(dirn)
    shift = dirn * config.translation_noise_m * rng.uniform()
    jit = np.deg2rad(config.joint_noise_deg) * rng.uniform(-1, 1, size=len(config.parts))
    return _translation(shift) @ _rigid(so3_exp(axis * ang), root_pivot), jit


def orbit_camera(config: SynthConfig, azimuth_deg: float, elevation: float = 0.0) -> CameraModel:
    az = np.deg2rad(azimuth_deg)
    r = config.camera_distance
    eye = (r * np.sin(az), config.camera_height + elevation, r * np.cos(az))
    return CameraModel.look_at(eye, (0.0, 0.0, 0.0), focal=config.focal,
                               width=config.width, height=config.height)


def generate_synthetic_sequence(config: SynthConfig = SynthConfig(), seed: int = 0) -> FrameDataset:
    rng = np.random.default_rng(seed)
    m = config.frame_count
    times = np.arange(m) / (m - 1)
    camera = orbit_camera(config, 0.0)
    background = quantize(make_background(config.width, config.height))
    rest, vparts, kps = build_body(config)
    names = list(kps)
    root_pivot = np.asarray(config.parts[0].pivot, dtype=np.float64)

    gt_meshes, est_meshes, images, masks = [], [], [], []
    for t in times:
        tf = part_transforms(config, t)
        gt = pose_body(config, rest, vparts, kps, tf)
        gt_meshes.append(gt)
        img, mask, _ = render_mesh(gt, camera, background)
        images.append(quantize(img))
        masks.append(mask)
        noisy = (config.rotation_noise_deg or config.translation_noise_m or config.joint_noise_deg)
        if noisy:
            root_err, jit = _perturbation(config, rng, root_pivot)
            tf_est = part_transforms(config, t, jit)
            tf_est = {k: root_err @ v for k, v in tf_est.items()}
            est_meshes.append(pose_body(config, rest, vparts, kps, tf_est, colors=False))
        else:
            est_meshes.append(TriMesh(gt.vertices.copy(), gt.faces.copy(), None, dict(gt.joints)))

    joints3d = np.stack([[g.joints[n] for n in names] for g in gt_meshes])
    joints2d = np.stack([camera.project(j) for j in joints3d])

    xy, z = config.aabb_margins
    box = build_frame_aabb(est_meshes[0], xy, z)
    for mesh in est_meshes[1:]:
        box = box.union(build_frame_aabb(mesh, xy, z))
    scene_center = box.center
    scene_scale = float(box.extent.max() / 2.0)

    eval_frames = (tuple(range(0, m, 2)) if config.eval_frames is None else tuple(config.eval_frames))
    cams, frames, e_imgs, e_masks, e_j2d = [], [], [], [], []
    for az in config.eval_azimuths_deg:
        cam = orbit_camera(config, az, config.eval_elevation)
        for i in eval_frames:
            img, mask, _ = render_mesh(gt_meshes[i], cam, config.novel_background)
            cams.append(cam)
            frames.append(int(i))
            e_imgs.append(quantize(img))
            e_masks.append(mask)
            e_j2d.append(cam.project(joints3d[i]))
    eval_split = None
    if cams:
        eval_split = EvalSplit(cams, frames, np.stack(e_imgs), np.stack(e_masks), np.stack(e_j2d))

    return FrameDataset(
        images=np.stack(images), masks=np.stack(masks), times=times, camera=camera,
        background=background, meshes=est_meshes, canonical=est_meshes[0],
        joint_names=names, joints3d=joints3d, joints2d=joints2d,
        scene_center=scene_center, scene_scale=scene_scale, fps=config.fps,
        novel_background=np.asarray(config.novel_background, dtype=np.float64),
        gt_meshes=gt_meshes, vertex_parts=vparts, eval=eval_split,
        aabb_margins=tuple(config.aabb_margins),
    )
