"""Pinhole camera, silhouette rasterization (hard and differentiable soft),
and depth rendering.

The soft rasterizer assigns every pixel a coverage sigmoid of the signed 2D
distance to each nearby projected triangle and combines faces with a
smooth-or; it is written in torch so silhouette losses get exact gradients
with respect to mesh vertices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Pose6D, TriMesh

GRID_KINDS = ("hard", "soft", "target_amodal", "target_modal")


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose6D = field(default_factory=Pose6D.identity)  # world -> camera

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.pose.apply(np.asarray(points, dtype=float))

    def project_points(self, points: np.ndarray):
        """World points -> (uv (N,2), depth (N,), in_front (N,) bools)."""
        pc = self.to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        in_front = z > 1e-6
        zs = np.where(in_front, z, 1.0)
        uv = np.stack([self.fx * pc[:, 0] / zs + self.cx,
                       self.fy * pc[:, 1] / zs + self.cy], axis=1)
        return uv, z, in_front

    def pixel_rays(self, uv: np.ndarray) -> np.ndarray:
        """Unit world-space ray directions through pixel coordinates (N,2)."""
        uv = np.atleast_2d(uv)
        d = np.stack([(uv[:, 0] - self.cx) / self.fx,
                      (uv[:, 1] - self.cy) / self.fy,
                      np.ones(len(uv))], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.pose.R  # rotate back to world

    def center_world(self) -> np.ndarray:
        return self.pose.inverse().t

    def torch_pose(self, dtype=torch.float64):
        R = torch.tensor(self.pose.R, dtype=dtype)
        t = torch.tensor(self.pose.t, dtype=dtype)
        return R, t

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": self.pose.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                      Pose6D.from_dict(d["pose"]))


def project(cam: Camera, p):
    """Single-point projection -> (u, v, depth, in_front)."""
    uv, z, ok = cam.project_points(np.asarray(p, dtype=float)[None])
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0]), bool(ok[0])


@dataclass
class SilhouetteGrid:
    values: np.ndarray  # (H, W) in [0, 1]
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.values.ndim != 2:
            raise ValueError("grid must be 2D")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("grid values outside [0, 1]")
        if self.kind != "soft" and not np.all((self.values == 0) | (self.values == 1)):
            raise ValueError("hard grids must be binary")

    @property
    def mask(self) -> np.ndarray:
        return self.values > 0.5

    def iou(self, other: "SilhouetteGrid") -> float:
        a, b = self.mask, other.mask
        union = np.logical_or(a, b).sum()
        if union == 0:
            return 1.0
        return float(np.logical_and(a, b).sum() / union)


def compose_max(a: SilhouetteGrid, b: SilhouetteGrid, kind: str = "hard") -> SilhouetteGrid:
    return SilhouetteGrid(np.maximum(a.values, b.values), kind)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _projected_faces(cam: Camera, mesh: TriMesh):
    """Project all vertices; keep faces fully in front of the camera.

    Returns (tri2d (F,3,2), z (F,3) camera depths, verts_cam (V,3)).
    """
    pc = cam.to_camera(mesh.vertices)
    z = pc[:, 2]
    zs = np.where(z > 1e-6, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx,
                   cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
    keep = np.all(z[mesh.faces] > 1e-6, axis=1)
    faces = mesh.faces[keep]
    return uv[faces], z[faces], pc, faces, np.nonzero(keep)[0]


def _inside_2d(points, tri2d):
    """points (P,2) vs triangles (F,3,2) -> (P,F) inside flags (orientation-free)."""
    d = points[:, None, None, :] - tri2d[None, :, :, :]  # (P,F,3,2)
    e = np.roll(tri2d, -1, axis=1) - tri2d  # (F,3,2)
    cross = e[None, :, :, 0] * d[..., 1] - e[None, :, :, 1] * d[..., 0]  # (P,F,3)
    return np.all(cross >= -1e-12, axis=2) | np.all(cross <= 1e-12, axis=2)


def render_silhouette(cam: Camera, mesh: TriMesh, mode: str = "hard",
                      softness: float = 1.0) -> SilhouetteGrid:
    if mode == "soft":
        if softness <= 0:
            raise ValueError("softness must be positive for soft mode")
        verts = torch.tensor(mesh.vertices, dtype=torch.float64)
        with torch.no_grad():
            vals = soft_silhouette(cam, verts, mesh.faces, gamma=softness)
        return SilhouetteGrid(vals.numpy().clip(0.0, 1.0), "soft")
    if mode != "hard":
        raise ValueError(f"unknown mode {mode!r}")

    grid = np.zeros((cam.height, cam.width))
    if len(mesh.faces) == 0:
        return SilhouetteGrid(grid, "hard")
    tri2d, _, _, _, _ = _projected_faces(cam, mesh)
    for tri in tri2d:
        lo = np.maximum(np.floor(tri.min(axis=0) - 0.5).astype(int), 0)
        hi = np.minimum(np.ceil(tri.max(axis=0) + 0.5).astype(int),
                        [cam.width - 1, cam.height - 1])
        if np.any(hi < lo):
            continue
        us = np.arange(lo[0], hi[0] + 1) + 0.5
        vs = np.arange(lo[1], hi[1] + 1) + 0.5
        uu, vv = np.meshgrid(us, vs)
        pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
        inside = _inside_2d(pts, tri[None])[:, 0].reshape(len(vs), len(us))
        grid[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] = np.maximum(
            grid[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1], inside.astype(float))
    return SilhouetteGrid(grid, "hard")


def render_depth(cam: Camera, mesh: TriMesh) -> np.ndarray:
    """Z-buffer depth (camera-space z) per pixel; +inf where uncovered."""
    return render_depth_faces(cam, mesh)[0]


def render_depth_faces(cam: Camera, mesh: TriMesh):
    """Z-buffer depth plus the index (into mesh.faces) of the winning face.

    Returns (depth (H,W), face_idx (H,W) int, -1 where uncovered).
    """
    depth = np.full((cam.height, cam.width), np.inf)
    fidx = np.full((cam.height, cam.width), -1, dtype=np.int64)
    if len(mesh.faces) == 0:
        return depth, fidx
    tri2d, _, pc, faces, kept_ids = _projected_faces(cam, mesh)
    tri_cam = pc[faces]  # (F,3,3)
    normals = np.cross(tri_cam[:, 1] - tri_cam[:, 0], tri_cam[:, 2] - tri_cam[:, 0])
    for face_id, tri, v0, n in zip(kept_ids, tri2d, tri_cam[:, 0], normals):
        lo = np.maximum(np.floor(tri.min(axis=0) - 0.5).astype(int), 0)
        hi = np.minimum(np.ceil(tri.max(axis=0) + 0.5).astype(int),
                        [cam.width - 1, cam.height - 1])
        if np.any(hi < lo):
            continue
        us = np.arange(lo[0], hi[0] + 1) + 0.5
        vs = np.arange(lo[1], hi[1] + 1) + 0.5
        uu, vv = np.meshgrid(us, vs)
        pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
        inside = _inside_2d(pts, tri[None])[:, 0]
        if not inside.any():
            continue
        # camera ray through pixel (u,v): direction ((u-cx)/fx, (v-cy)/fy, 1);
        # the ray-plane parameter equals the camera-space z of the hit point
        rays = np.stack([(pts[:, 0] - cam.cx) / cam.fx,
                         (pts[:, 1] - cam.cy) / cam.fy,
                         np.ones(len(pts))], axis=1)
        denom = rays @ n
        ok = inside & (np.abs(denom) > 1e-12)
        zhit = np.full(len(pts), np.inf)
        zhit[ok] = (v0 @ n) / denom[ok]
        zhit[zhit <= 1e-6] = np.inf
        zhit = zhit.reshape(len(vs), len(us))
        win = depth[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        closer = zhit < win
        win[closer] = zhit[closer]
        fwin = fidx[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        fwin[closer] = face_id
    return depth, fidx


def depth_at_pixels(cam: Camera, verts: torch.Tensor, faces: np.ndarray,
                    pix_uv: torch.Tensor, face_ids: np.ndarray) -> torch.Tensor:
    """Differentiable camera-space depth at pixel centers for assigned faces.

    ``pix_uv`` (P,2) pixel centers, ``face_ids`` (P,) indices into ``faces``
    (typically from render_depth_faces at detached geometry).  Depth is the
    ray-plane intersection with the current (differentiable) vertex positions.
    """
    R, t = cam.torch_pose(verts.dtype)
    pc = verts @ R.T + t
    tri = pc[faces[face_ids]]  # (P,3,3)
    n = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1)
    rays = torch.stack([(pix_uv[:, 0] - cam.cx) / cam.fx,
                        (pix_uv[:, 1] - cam.cy) / cam.fy,
                        torch.ones(len(pix_uv), dtype=verts.dtype)], dim=1)
    denom = (rays * n).sum(-1)
    denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
    return (tri[:, 0] * n).sum(-1) / denom


# ---------------------------------------------------------------------------
# differentiable soft silhouette
# ---------------------------------------------------------------------------


def project_torch(cam: Camera, verts: torch.Tensor):
    """World-space vertex tensor (V,3) -> (uv (V,2), z (V,))."""
    R, t = cam.torch_pose(verts.dtype)
    pc = verts @ R.T + t
    z = pc[:, 2].clamp(min=1e-6)
    uv = torch.stack([cam.fx * pc[:, 0] / z + cam.cx,
                      cam.fy * pc[:, 1] / z + cam.cy], dim=1)
    return uv, z


def _signed_distance_2d(points: torch.Tensor, tri: torch.Tensor) -> torch.Tensor:
    """Signed 2D distance from points (P,2) to triangles (P,K,3,2) -> (P,K).

    Negative inside the triangle; works for either winding orientation.
    """
    a = tri
    b = torch.roll(tri, -1, dims=-2)
    e = b - a  # (P,K,3,2)
    d = points[:, None, None, :] - a  # (P,K,3,2)
    ee = (e * e).sum(-1).clamp(min=1e-30)
    t = ((d * e).sum(-1) / ee).clamp(0.0, 1.0)
    closest = a + t[..., None] * e
    edge_dist = torch.linalg.norm(points[:, None, None, :] - closest, dim=-1)
    dist = edge_dist.min(dim=-1).values  # (P,K)
    cross = e[..., 0] * d[..., 1] - e[..., 1] * d[..., 0]  # (P,K,3)
    inside = (torch.all(cross >= 0, dim=-1) | torch.all(cross <= 0, dim=-1)).detach()
    return torch.where(inside, -dist, dist)


def soft_silhouette(cam: Camera, verts: torch.Tensor, faces: np.ndarray,
                    gamma: float = 1.0, max_faces: int = 8,
                    window_margin: float = 8.0) -> torch.Tensor:
    """Differentiable soft coverage grid (H,W) for a mesh in world space.

    Per-pixel coverage is a smooth-or of sigmoid(-d/gamma) over the
    ``max_faces`` nearest projected faces (nearest by detached
    centroid-minus-circumradius distance).  Camera-facing faces only: for a
    closed mesh a backface never adds hard coverage, but its smooth boundary
    coincides with a frontface's, and letting it contribute would double the
    coverage just outside the silhouette edge and dilate the rendered mask
    by most of a pixel (a systematic shrink bias for every mask-fitting
    term).  Pixels outside the projected bounding box expanded by
    ``window_margin * gamma`` pixels stay exactly zero (coverage there is
    below sigmoid(-window_margin)).
    """
    H, W = cam.height, cam.width
    if len(faces) == 0:
        return torch.zeros(H, W, dtype=verts.dtype)
    with torch.no_grad():
        pc = cam.to_camera(verts.detach().numpy())
        tri_cam = pc[faces]
        n = np.cross(tri_cam[:, 1] - tri_cam[:, 0], tri_cam[:, 2] - tri_cam[:, 0])
        facing = (n * tri_cam.mean(axis=1)).sum(axis=1) < 0.0
        if facing.any():
            faces = faces[facing]
    uv, _ = project_torch(cam, verts)
    tri = uv[faces]  # (F,3,2)

    with torch.no_grad():
        margin = window_margin * gamma + 1.0
        lo = torch.floor(tri.reshape(-1, 2).min(dim=0).values - margin).long()
        hi = torch.ceil(tri.reshape(-1, 2).max(dim=0).values + margin).long()
        u0, v0 = int(max(lo[0], 0)), int(max(lo[1], 0))
        u1, v1 = int(min(hi[0], W - 1)), int(min(hi[1], H - 1))
    out = torch.zeros(H, W, dtype=verts.dtype)
    if u1 < u0 or v1 < v0:
        return out
    us = torch.arange(u0, u1 + 1, dtype=verts.dtype) + 0.5
    vs = torch.arange(v0, v1 + 1, dtype=verts.dtype) + 0.5
    vv, uu = torch.meshgrid(vs, us, indexing="ij")
    pix = torch.stack([uu.reshape(-1), vv.reshape(-1)], dim=1)  # (P,2)

    k = min(max_faces, len(faces))
    with torch.no_grad():
        centroid = tri.mean(dim=1)  # (F,2)
        circum = torch.linalg.norm(tri - centroid[:, None, :], dim=-1).max(dim=1).values
        lower = torch.cdist(pix, centroid) - circum[None, :]  # (P,F)
        sel = lower.topk(k, dim=1, largest=False).indices  # (P,k)
    d = _signed_distance_2d(pix, tri[sel])  # (P,k)
    cov = torch.sigmoid(-d / gamma)
    vals = 1.0 - torch.prod(1.0 - cov, dim=1)
    out[v0:v1 + 1, u0:u1 + 1] = vals.reshape(v1 - v0 + 1, u1 - u0 + 1)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_pgm(grid: SilhouetteGrid, path):
    data = (grid.mask.astype(np.uint8)) * 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def load_pgm(path, kind: str = "hard") -> SilhouetteGrid:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError("not a P5 PGM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return SilhouetteGrid((data > maxval // 2).astype(float), kind)


def save_soft(grid: SilhouetteGrid, base_path):
    base_path = str(base_path)
    values = grid.values.astype(np.float32)
    with open(base_path + ".raw", "wb") as fh:
        fh.write(values.tobytes())
    with open(base_path + ".json", "w") as fh:
        json.dump({"height": values.shape[0], "width": values.shape[1],
                   "dtype": "float32", "kind": grid.kind}, fh)


def load_soft(base_path) -> SilhouetteGrid:
    base_path = str(base_path)
    with open(base_path + ".json") as fh:
        hdr = json.load(fh)
    data = np.fromfile(base_path + ".raw", dtype=np.float32)
    return SilhouetteGrid(data.reshape(hdr["height"], hdr["width"]).astype(float),
                          hdr["kind"])
