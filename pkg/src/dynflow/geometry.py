"""Cameras, rays, boxes, triangle meshes and rigid-motion math.

Camera convention (used everywhere in the package): right-handed world and
camera frames, the camera looks down its local -Z axis with +Y up, and image
rows grow downward.  A pixel coordinate ``(row, col)`` maps to the camera-frame
direction ``((col - cx) / fx, -(row - cy) / fy, -1)``.  Integer coordinates
address pixel centres, so a ``W x H`` image with ``cx = (W - 1) / 2`` is
symmetric about the optical axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROTATION_TOL = 1e-6


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    """World-from-camera rotation; columns are the camera axes in world space."""
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=ROTATION_TOL):
            raise ValueError("extrinsic rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ValueError("extrinsic rotation must have determinant +1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, focal, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        rot = np.stack([right, true_up, back], axis=1)
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                   width, height, rot, eye)

    def pixel_grid(self) -> np.ndarray:
        """All pixel centres as an ``(H*W, 2)`` array of (row, col), row-major."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width),
                                 indexing="ij")
        return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)

    def rays(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        """Batched back-projection: ``(N, 2)`` pixels -> origins, unit directions."""
        pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        rows, cols = pix[:, 0], pix[:, 1]
        if np.any((rows < 0) | (rows > self.height - 1) | (cols < 0)
                  | (cols > self.width - 1)):
            raise ValueError("pixel outside image bounds")
        d_cam = np.stack([(cols - self.cx) / self.fx,
                          -(rows - self.cy) / self.fy,
                          -np.ones_like(rows)], axis=1)
        d = d_cam @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def project(self, points) -> np.ndarray:
        """World points ``(N, 3)`` -> pixel coordinates ``(N, 2)`` as (row, col)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        pc = (p - self.center) @ self.rotation
        depth = -pc[:, 2]
        col = self.cx + self.fx * pc[:, 0] / depth
        row = self.cy - self.fy * pc[:, 1] / depth
        return np.stack([row, col], axis=1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["rotation"]), np.array(d["center"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float] | None = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def generate_rays(camera: CameraModel, pixels) -> list[Ray]:
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    origins, dirs = camera.rays(pix)
    return [Ray(o, d, (float(p[0]), float(p[1])))
            for o, d, p in zip(origins, dirs, pix)]


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb min corner exceeds max corner")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))


def ray_aabb_batch(origins, dirs, lo, hi):
    """Slab test for many rays.  Returns ``(t_near, t_far, hit)``.

    ``t_near`` is clamped to zero for origins inside the box; ``hit`` requires
    ``t_far > t_near``.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    # 0 * inf on a face-parallel ray: inside the slab -> unbounded, outside -> miss
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    lo_t = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    hi_t = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_near = np.max(lo_t, axis=-1)
    t_far = np.min(hi_t, axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return t_near, t_far, hit


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """``(t_near, t_far)`` of the ray segment inside ``box`` or ``None`` on a miss."""
    tn, tf, hit = ray_aabb_batch(ray.origin[None], ray.direction[None], box.lo, box.hi)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    joints: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("one color per vertex required")
        if self.joints is not None:
            self.joints = {k: np.asarray(v, dtype=np.float64).reshape(3)
                           for k, v in self.joints.items()}
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            if np.any(self.triangle_areas() <= 1e-12):
                raise ValueError("degenerate triangle")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def bounds(self) -> Aabb:
        if len(self.vertices) == 0:
            raise ValueError("empty mesh has no bounds")
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    def translated(self, offset) -> "TriMesh":
        off = np.asarray(offset, dtype=np.float64)
        joints = None if self.joints is None else {k: v + off for k, v in self.joints.items()}
        return TriMesh(self.vertices + off, self.faces.copy(),
                       None if self.colors is None else self.colors.copy(), joints)

    def same_topology(self, other: "TriMesh") -> bool:
        return (self.vertices.shape == other.vertices.shape
                and np.array_equal(self.faces, other.faces))


def build_frame_aabb(mesh: TriMesh, xy_margin: float = 0.2, z_margin: float = 0.4) -> Aabb:
    b = mesh.bounds()
    pad = np.array([xy_margin, xy_margin, z_margin], dtype=np.float64)
    return Aabb(b.lo - pad, b.hi + pad)


def intersect_rays_mesh(origins, dirs, mesh: TriMesh, *, chunk: int = 256, eps: float = 1e-12):
    """Nearest Möller-Trumbore hit of every ray against every triangle.

    Returns ``(t, tri, bary)``; misses have ``t = inf`` and ``tri = -1``.
    ``bary`` holds the weights of the triangle's three vertices.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_uv = np.zeros((n, 2))
    if len(mesh.faces) == 0 or n == 0:
        return best_t, best_tri, np.zeros((n, 3))
    box = mesh.bounds()
    _, _, live = ray_aabb_batch(o, d, box.lo - 1e-9, box.hi + 1e-9)
    idx = np.flatnonzero(live)
    if len(idx):
        o_l, d_l = o[idx], d[idx]
        tri = mesh.vertices[mesh.faces]
        t_l = np.full(len(idx), np.inf)
        tri_l = np.full(len(idx), -1, dtype=np.int64)
        uv_l = np.zeros((len(idx), 2))
        for start in range(0, len(tri), chunk):
            v0 = tri[start:start + chunk, 0]
            e1 = tri[start:start + chunk, 1] - v0
            e2 = tri[start:start + chunk, 2] - v0
            p = np.cross(d_l[:, None, :], e2[None])
            det = np.einsum("tk,rtk->rt", e1, p)
            ok = np.abs(det) > eps
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            s = o_l[:, None, :] - v0[None]
            u = np.einsum("rtk,rtk->rt", s, p) * inv
            q = np.cross(s, e1[None])
            v = np.einsum("rk,rtk->rt", d_l, q) * inv
            t = np.einsum("tk,rtk->rt", e2, q) * inv
            valid = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
            t = np.where(valid, t, np.inf)
            j = np.argmin(t, axis=1)
            tj = t[np.arange(len(idx)), j]
            better = tj < t_l
            t_l[better] = tj[better]
            tri_l[better] = start + j[better]
            uv_l[better, 0] = u[better, j[better]]
            uv_l[better, 1] = v[better, j[better]]
        best_t[idx], best_tri[idx], best_uv[idx] = t_l, tri_l, uv_l
    bary = np.stack([1.0 - best_uv[:, 0] - best_uv[:, 1], best_uv[:, 0], best_uv[:, 1]], axis=1)
    bary[best_tri < 0] = 0.0
    return best_t, best_tri, bary


def ray_mesh_intersect(ray: Ray, mesh: TriMesh):
    t, tri, bary = intersect_rays_mesh(ray.origin[None], ray.direction[None], mesh)
    if tri[0] < 0:
        return None
    return float(t[0]), int(tri[0]), bary[0]


# ---------------------------------------------------------------------------
# SE(3)

def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues rotation matrix for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta**2 * K @ K)


def so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


@dataclass(frozen=True)
class Twist:
    """se(3) element: axis-angle rotation ``omega`` and translation part ``v``."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=np.float64).reshape(3)
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValueError("twist components must be finite")
        if np.linalg.norm(w) >= np.pi:
            raise ValueError("rotation angle must be below pi")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "v", v)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = so3_exp(self.omega)
        T[:3, 3] = so3_left_jacobian(self.omega) @ self.v
        return T


def se3_apply(twist: Twist, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ so3_exp(twist.omega).T + so3_left_jacobian(twist.omega) @ twist.v


# ---------------------------------------------------------------------------
# Mesh files

def write_obj(mesh: TriMesh, path) -> None:
    """Write ``v x y z [r g b]`` and 1-based ``f a b c`` lines; joints go to a sidecar."""
    path = Path(path)
    lines = []
    for i, v in enumerate(mesh.vertices):
        row = [repr(float(c)) for c in v]
        if mesh.colors is not None:
            row += [repr(float(c)) for c in mesh.colors[i]]
        lines.append("v " + " ".join(row))
    for f in mesh.faces:
        lines.append("f %d %d %d" % tuple(int(i) + 1 for i in f))
    path.write_text("\n".join(lines) + "\n")
    if mesh.joints is not None:
        write_joints(mesh.joints, joints_path(path))


def read_obj(path) -> TriMesh:
    path = Path(path)
    verts, cols, faces = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(p) for p in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                cols.append(vals[3:6])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    colors = np.array(cols) if cols and len(cols) == len(verts) else None
    jp = joints_path(path)
    joints = read_joints(jp) if jp.exists() else None
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                   colors, joints)


def joints_path(obj_path) -> Path:
    obj_path = Path(obj_path)
    return obj_path.with_name(obj_path.stem + ".joints.json")


def write_joints(joints: dict, path) -> None:
    Path(path).write_text(json.dumps({k: [float(c) for c in v] for k, v in joints.items()},
                                     indent=1))


def read_joints(path) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=np.float64) for k, v in json.loads(Path(path).read_text()).items()}
