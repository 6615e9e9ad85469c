"""Mesh, transform, and surface-sampling kernels.

Everything in this module is pure and operates on immutable value data:
triangle meshes in meters, unit-quaternion rigid poses, barycentric surface
points, and reproducible surface sample sets.  All other modules build on
these kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyMesh, NotWatertight

# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def axis_angle_to_quat(v):
    """Exponential map from a 3-vector (axis * angle, radians) to a unit quaternion."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * v)]))
    axis = v / angle
    return quat_normalize(
        np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])
    )


def quat_to_axis_angle(q):
    """Log map: unit quaternion -> axis * angle (3-vector, angle in [0, pi])."""
    q = quat_normalize(q)
    w = np.clip(q[0], -1.0, 1.0)
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(max(1.0 - w * w, 0.0))
    if s < 1e-12:
        return 2.0 * q[1:4]
    return (angle / s) * q[1:4]


def quat_angle(a, b):
    """Angular distance 2*acos(|<a, b>|) between two unit quaternions (radians)."""
    d = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def quat_slerp(a, b, u):
    a = quat_normalize(a)
    b = np.asarray(b, dtype=float)
    b = b / np.linalg.norm(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:  # shorter arc
        b = -b
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-12:
        out = (1 - u) * a + u * b
        return quat_normalize(out)
    theta = np.arccos(dot)
    st = np.sin(theta)
    out = (np.sin((1 - u) * theta) / st) * a + (np.sin(u * theta) / st) * b
    return quat_normalize(out)


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose6D:
    """Rigid pose: unit quaternion (w >= 0) plus translation in meters."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @staticmethod
    def identity() -> "Pose6D":
        return Pose6D(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def compose(self, other: "Pose6D") -> "Pose6D":
        """self o other (apply other first, then self)."""
        return Pose6D(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    def inverse(self) -> "Pose6D":
        qi = quat_conj(self.q)
        return Pose6D(qi, -(quat_to_matrix(qi) @ self.t))

    def angle_to(self, other: "Pose6D") -> float:
        return quat_angle(self.q, other.q)

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @staticmethod
    def from_dict(d: dict) -> "Pose6D":
        return Pose6D(np.array(d["q"], dtype=float), np.array(d["t"], dtype=float))


def slerp(a: Pose6D, b: Pose6D, u: float) -> Pose6D:
    """Constant-angular-velocity pose interpolation (shorter arc, lerp translation)."""
    return Pose6D(quat_slerp(a.q, b.q, u), (1 - u) * a.t + u * b.t)


@dataclass(frozen=True)
class BarycentricPoint:
    face_id: int
    bary: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=float).reshape(3).copy()
        object.__setattr__(self, "bary", b)

    def position(self, mesh: "TriMesh") -> np.ndarray:
        tri = mesh.vertices[mesh.faces[self.face_id]]
        return self.bary @ tri


class TriMesh:
    """Triangle mesh with derived per-face normals.

    Vertices in meters.  The ``watertight`` flag is an explicit promise by the
    caller; it is validated (every edge shared by exactly two faces with
    opposite orientation) and gates the signed-distance query.
    """

    def __init__(self, vertices, faces, watertight: bool = False, validate: bool = True):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.watertight = bool(watertight)
        if validate:
            self._validate()

    def _validate(self):
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if len(self.faces):
            areas = self.face_areas
            if areas.min() <= 1e-12:
                raise ValueError("degenerate face (area <= 1e-12 m^2)")
        if self.watertight:
            edges = {}
            for f in self.faces:
                for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                    edges[(a, b)] = edges.get((a, b), 0) + 1
            for (a, b), n in edges.items():
                if n != 1 or edges.get((b, a), 0) != 1:
                    raise ValueError("mesh flagged watertight but edge structure is not closed/consistent")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]  # (F, 3, 3)

    @property
    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )

    @property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        tri = self.triangles
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # area-weighted
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norms = np.linalg.norm(vn, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vn / norms

    def transformed(self, pose: Pose6D, scale: float = 1.0) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices * scale), self.faces,
                       watertight=self.watertight, validate=False)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class SurfaceSampleSet:
    points: np.ndarray
    normals: np.ndarray
    face_ids: np.ndarray
    bary: np.ndarray
    seed: int

    _tree: cKDTree = field(default=None, repr=False, compare=False)

    def tree(self) -> cKDTree:
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.points))
        return self._tree


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def fit_similarity(source, target, with_scale: bool = True):
    """Least-squares similarity transform (Umeyama).

    Returns (scale, Pose6D, rms) minimizing sum ||s R x_i + t - y_i||^2 over
    index-paired correspondences.  Raises DegenerateConfiguration for fewer
    than 3 points or collinear sources.
    """
    x = np.asarray(source, dtype=float).reshape(-1, 3)
    y = np.asarray(target, dtype=float).reshape(-1, 3)
    if x.shape != y.shape:
        raise DegenerateConfiguration("source/target cardinality mismatch")
    n = len(x)
    if n < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    # collinearity: second singular value of the centered source
    sv = np.linalg.svd(dx, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateConfiguration("source points are collinear")
    cov = dy.T @ dx / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = (dx ** 2).sum() / n
        s = float((d * S.diagonal()).sum() / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    resid = s * x @ R.T + t - y
    rms = float(np.sqrt((resid ** 2).sum() / n))
    return s, Pose6D(matrix_to_quat(R), t), rms


def _closest_point_triangles(p, tri):
    """Closest points on each triangle of ``tri`` (F,3,3) to point ``p``.

    Vectorized version of Ericson's point-triangle test.  Returns
    (closest (F,3), bary (F,3)).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_uv = vb + vc + va
    # interior barycentric (guard zero denominators; masked out below)
    safe = np.where(np.abs(denom_uv) < 1e-300, 1.0, denom_uv)
    v_in = vb / safe
    w_in = vc / safe

    bary = np.stack([1.0 - v_in - w_in, v_in, w_in], axis=1)

    # edge AB region
    t_ab = d1 / np.where(np.abs(d1 - d3) < 1e-300, 1.0, d1 - d3)
    t_ab = np.clip(t_ab, 0.0, 1.0)
    # edge AC region
    t_ac = d2 / np.where(np.abs(d2 - d6) < 1e-300, 1.0, d2 - d6)
    t_ac = np.clip(t_ac, 0.0, 1.0)
    # edge BC region
    num_bc = d4 - d3
    den_bc = (d4 - d3) + (d5 - d6)
    t_bc = num_bc / np.where(np.abs(den_bc) < 1e-300, 1.0, den_bc)
    t_bc = np.clip(t_bc, 0.0, 1.0)

    reg_a = (d1 <= 0) & (d2 <= 0)
    reg_b = (d3 >= 0) & (d4 <= d3)
    reg_c = (d6 >= 0) & (d5 <= d6)
    reg_ab = (~reg_a) & (~reg_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    reg_ac = (~reg_a) & (~reg_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    reg_bc = (~reg_b) & (~reg_c) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    bary[reg_a] = [1.0, 0.0, 0.0]
    bary[reg_b] = [0.0, 1.0, 0.0]
    bary[reg_c] = [0.0, 0.0, 1.0]
    bary[reg_ab] = np.stack(
        [1.0 - t_ab[reg_ab], t_ab[reg_ab], np.zeros(reg_ab.sum())], axis=1
    )
    bary[reg_ac] = np.stack(
        [1.0 - t_ac[reg_ac], np.zeros(reg_ac.sum()), t_ac[reg_ac]], axis=1
    )
    bary[reg_bc] = np.stack(
        [np.zeros(reg_bc.sum()), 1.0 - t_bc[reg_bc], t_bc[reg_bc]], axis=1
    )
    closest = (bary[:, :, None] * tri).sum(axis=1)
    return closest, bary


def project_to_surface(mesh: TriMesh, p):
    """Closest surface point over all faces of ``mesh``.

    Returns (BarycentricPoint, closest point, distance in meters).
    """
    if len(mesh.faces) == 0:
        raise EmptyMesh("cannot project onto an empty mesh")
    p = np.asarray(p, dtype=float).reshape(3)
    closest, bary = _closest_point_triangles(p, mesh.triangles)
    d2 = ((closest - p) ** 2).sum(axis=1)
    f = int(np.argmin(d2))
    return (
        BarycentricPoint(f, bary[f]),
        closest[f],
        float(np.sqrt(d2[f])),
    )


def _closest_point_triangles_batch(points, tri):
    """Closest point on every triangle for every query.

    points: (P,3), tri: (F,3,3).  Returns closest (P,F,3) and bary (P,F,3).
    Same region logic as _closest_point_triangles, broadcast over queries.
    """
    P, F = len(points), len(tri)
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]  # (1,F,3)
    p = points[:, None, :]  # (P,1,3)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = vb + vc + va
    safe = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v_in = vb / safe
    w_in = vc / safe
    bary = np.stack([1.0 - v_in - w_in, v_in, w_in], axis=-1)

    def _t(num, den):
        return np.clip(num / np.where(np.abs(den) < 1e-300, 1.0, den), 0.0, 1.0)

    t_ab = _t(d1, d1 - d3)
    t_ac = _t(d2, d2 - d6)
    t_bc = _t(d4 - d3, (d4 - d3) + (d5 - d6))

    reg_a = (d1 <= 0) & (d2 <= 0)
    reg_b = (d3 >= 0) & (d4 <= d3)
    reg_c = (d6 >= 0) & (d5 <= d6)
    reg_ab = (~reg_a) & (~reg_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    reg_ac = (~reg_a) & (~reg_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    reg_bc = (~reg_b) & (~reg_c) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    zeros = np.zeros_like(t_ab)
    ones = np.ones_like(t_ab)
    bary = np.where(reg_bc[..., None], np.stack([zeros, 1 - t_bc, t_bc], -1), bary)
    bary = np.where(reg_ac[..., None], np.stack([1 - t_ac, zeros, t_ac], -1), bary)
    bary = np.where(reg_ab[..., None], np.stack([1 - t_ab, t_ab, zeros], -1), bary)
    bary = np.where(reg_a[..., None], np.stack([ones, zeros, zeros], -1), bary)
    bary = np.where(reg_b[..., None], np.stack([zeros, ones, zeros], -1), bary)
    bary = np.where(reg_c[..., None], np.stack([zeros, zeros, ones], -1), bary)
    closest = (bary[..., None] * tri[None]).sum(axis=2)
    return closest, bary


def unsigned_distances(mesh: TriMesh, points) -> np.ndarray:
    """Unsigned closest-surface distance for a batch of points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles
    out = np.empty(len(points))
    # chunk queries to bound the (P,F) broadcast memory
    chunk = max(1, int(4e6 / max(len(tri), 1)))
    for lo in range(0, len(points), chunk):
        pts = points[lo : lo + chunk]
        closest, _ = _closest_point_triangles_batch(pts, tri)
        out[lo : lo + chunk] = np.sqrt(
            ((closest - pts[:, None]) ** 2).sum(-1).min(axis=1)
        )
    return out


def closest_points_on_surface(mesh: TriMesh, points):
    """Batch version of project_to_surface.

    Returns (face_ids (P,), bary (P,3), closest (P,3), distances (P,)).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles
    face_ids = np.empty(len(points), dtype=np.int64)
    bary_out = np.empty((len(points), 3))
    closest_out = np.empty((len(points), 3))
    dist_out = np.empty(len(points))
    chunk = max(1, int(4e6 / max(len(tri), 1)))
    for lo in range(0, len(points), chunk):
        pts = points[lo : lo + chunk]
        closest, bary = _closest_point_triangles_batch(pts, tri)
        d2 = ((closest - pts[:, None]) ** 2).sum(-1)
        f = d2.argmin(axis=1)
        rows = np.arange(len(pts))
        face_ids[lo : lo + chunk] = f
        bary_out[lo : lo + chunk] = bary[rows, f]
        closest_out[lo : lo + chunk] = closest[rows, f]
        dist_out[lo : lo + chunk] = np.sqrt(d2[rows, f])
    return face_ids, bary_out, closest_out, dist_out


def winding_numbers(mesh: TriMesh, points) -> np.ndarray:
    """Generalized winding number of each query point (1 inside, 0 outside)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles  # (F,3,3)
    a = tri[None, :, 0] - points[:, None]  # (P,F,3)
    b = tri[None, :, 1] - points[:, None]
    c = tri[None, :, 2] - points[:, None]
    la = np.linalg.norm(a, axis=2)
    lb = np.linalg.norm(b, axis=2)
    lc = np.linalg.norm(c, axis=2)
    det = (a * np.cross(b, c)).sum(axis=2)
    denom = (
        la * lb * lc
        + (a * b).sum(axis=2) * lc
        + (b * c).sum(axis=2) * la
        + (c * a).sum(axis=2) * lb
    )
    omega = 2.0 * np.arctan2(det, denom)
    return omega.sum(axis=1) / (4.0 * np.pi)


def signed_distance(mesh: TriMesh, p) -> float:
    """Signed closest-surface distance, positive inside the watertight mesh."""
    if not mesh.watertight:
        raise NotWatertight("signed_distance requires a mesh flagged watertight")
    p = np.asarray(p, dtype=float).reshape(3)
    d = unsigned_distances(mesh, p[None])[0]
    inside = winding_numbers(mesh, p[None])[0] > 0.5
    return float(d if inside else -d)


def signed_distances(mesh: TriMesh, points) -> np.ndarray:
    if not mesh.watertight:
        raise NotWatertight("signed_distance requires a mesh flagged watertight")
    d = unsigned_distances(mesh, points)
    inside = winding_numbers(mesh, points) > 0.5
    return np.where(inside, d, -d)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> SurfaceSampleSet:
    """Area-weighted surface samples, reproducible from (mesh, n, seed)."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    face_ids = rng.choice(len(mesh.faces), size=n, p=areas / areas.sum())
    # uniform barycentric via the sqrt trick
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.triangles[face_ids]
    points = (bary[:, :, None] * tri).sum(axis=1)
    normals = mesh.face_normals[face_ids]
    return SurfaceSampleSet(points, normals, face_ids, bary, seed)


def knn(query, samples: SurfaceSampleSet, k: int) -> np.ndarray:
    """Exact k nearest sample indices, ascending by distance, ties by lower index."""
    if k > len(samples.points):
        raise ValueError("k exceeds the number of samples")
    q = np.asarray(query, dtype=float).reshape(3)
    d2 = ((samples.points - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))
    return order[:k]


# ---------------------------------------------------------------------------
# OBJ I/O (ASCII, v/f records, 1-based indices)
# ---------------------------------------------------------------------------


def save_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        if mesh.watertight:
            fh.write("# watertight\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriMesh:
    vertices, faces = [], []
    watertight = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line == "# watertight":
                watertight = True
            elif line.startswith("v "):
                vertices.append([float(x) for x in line.split()[1:4]])
            elif line.startswith("f "):
                idx = [int(tok.split("/")[0]) - 1 for tok in line.split()[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangle faces are supported")
                faces.append(idx)
    return TriMesh(vertices, faces, watertight=watertight)


# ---------------------------------------------------------------------------
# primitive meshes (used by tests, the pair generator, and scenarios)
# ---------------------------------------------------------------------------


def make_icosphere(radius: float = 0.05, subdivisions: int = 1) -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for (i, j, k) in faces:
            a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
    return TriMesh(np.array(verts) * radius, faces, watertight=True)


def make_box(extents=(0.06, 0.06, 0.06)) -> TriMesh:
    ex, ey, ez = np.asarray(extents, dtype=float) / 2.0
    verts = np.array(
        [
            [-ex, -ey, -ez], [ex, -ey, -ez], [ex, ey, -ez], [-ex, ey, -ez],
            [-ex, -ey, ez], [ex, -ey, ez], [ex, ey, ez], [-ex, ey, ez],
        ]
    )
    faces = [
        (0, 2, 1), (0, 3, 2),  # bottom (-z)
        (4, 5, 6), (4, 6, 7),  # top (+z)
        (0, 1, 5), (0, 5, 4),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (1, 2, 6), (1, 6, 5),  # +x
        (3, 0, 4), (3, 4, 7),  # -x
    ]
    return TriMesh(verts, faces, watertight=True)


def make_cylinder(radius: float = 0.03, height: float = 0.1, segments: int = 12) -> TriMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    verts = np.vstack([bottom, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
        faces.append((cb, j, i))  # bottom cap, outward -z
        faces.append((ct, segments + i, segments + j))  # top cap, outward +z
    return TriMesh(verts, faces, watertight=True)
