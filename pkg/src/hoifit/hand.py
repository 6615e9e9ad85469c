"""Procedural articulated hand: rig construction, forward kinematics, anatomy
penalty, and interaction-frame selection.

The rig is a fixed-topology capsule hand (wrist + 3 joints per finger for 5
fingers, plus 5 fingertip sites) skinned by per-vertex convex weights over at
most 4 joints.  It plays the role a parametric hand model would play in a
perception pipeline: a differentiable skinned mesh with labeled
contact-candidate regions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from . import torchutil
from .errors import TooShort
from .geometry import TriMesh, quat_normalize, quat_to_matrix

FINGERS = ("thumb", "index", "middle", "ring", "pinky")


@dataclass
class AnatomyLimits:
    twist: float = 0.3
    splay: float = 0.6
    bend_lo: float = -0.2
    bend_hi: float = 1.8


@dataclass(frozen=True)
class HandState:
    """Per-frame hand parameters."""

    theta: np.ndarray  # (15, 3) axis-angle per articulated joint
    wrist_rot: np.ndarray  # unit quaternion (w, x, y, z)
    wrist_trans: np.ndarray  # meters
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(15, 3).copy())
        object.__setattr__(self, "wrist_rot", quat_normalize(self.wrist_rot))
        object.__setattr__(self, "wrist_trans", np.asarray(self.wrist_trans, dtype=float).reshape(3).copy())
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError("scale outside [0.5, 2.0]")

    @staticmethod
    def rest() -> "HandState":
        return HandState(np.zeros((15, 3)), np.array([1.0, 0, 0, 0]), np.zeros(3))

    def replace(self, **kw) -> "HandState":
        d = {"theta": self.theta, "wrist_rot": self.wrist_rot,
             "wrist_trans": self.wrist_trans, "scale": self.scale}
        d.update(kw)
        return HandState(**d)

    def to_dict(self) -> dict:
        return {
            "theta": [[float(v) for v in row] for row in self.theta],
            "wrist_rot": [float(v) for v in self.wrist_rot],
            "wrist_trans": [float(v) for v in self.wrist_trans],
            "scale": float(self.scale),
        }

    @staticmethod
    def from_dict(d: dict) -> "HandState":
        return HandState(np.array(d["theta"]), np.array(d["wrist_rot"]),
                         np.array(d["wrist_trans"]), d["scale"])


class HandRig:
    """Immutable skeleton + template mesh + skinning data + contact labels."""

    def __init__(self, parents, rest_pos, tip_parent, tip_offsets, axes,
                 template: TriMesh, skin_idx, skin_w, labels,
                 limits: AnatomyLimits | None = None):
        self.parents = np.asarray(parents, dtype=np.int64)
        self.rest_pos = np.asarray(rest_pos, dtype=float)
        self.tip_parent = np.asarray(tip_parent, dtype=np.int64)
        self.tip_offsets = np.asarray(tip_offsets, dtype=float)
        self.axes = np.asarray(axes, dtype=float)  # (15, 3, 3) rows twist/splay/bend
        self.template = template
        self.skin_idx = np.asarray(skin_idx, dtype=np.int64)
        self.skin_w = np.asarray(skin_w, dtype=float)
        self.labels = {k: np.asarray(v, dtype=np.int64) for k, v in labels.items()}
        self.limits = limits or AnatomyLimits()
        self._torch_cache = {}
        sums = self.skin_w.sum(axis=1)
        assert np.all(self.skin_w >= 0) and np.allclose(sums, 1.0, atol=1e-9)
        all_lab = np.concatenate(list(self.labels.values()))
        assert len(all_lab) == len(np.unique(all_lab)), "contact label sets overlap"

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def candidate_vertices(self) -> np.ndarray:
        """All contact-candidate vertex ids (fingertips + pads + palm), sorted."""
        return np.sort(np.concatenate([self.labels["fingertips"],
                                       self.labels["finger_pads"],
                                       self.labels["palm"]]))

    def tensors(self, dtype=torch.float64) -> dict:
        if dtype not in self._torch_cache:
            self._torch_cache[dtype] = {
                "rest_pos": torch.tensor(self.rest_pos, dtype=dtype),
                "tip_offsets": torch.tensor(self.tip_offsets, dtype=dtype),
                "verts": torch.tensor(self.template.vertices, dtype=dtype),
                "skin_idx": torch.tensor(self.skin_idx),
                "skin_w": torch.tensor(self.skin_w, dtype=dtype),
                "axes": torch.tensor(self.axes, dtype=dtype),
            }
        return self._torch_cache[dtype]

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "parents": self.parents.tolist(),
                "rest_pos": self.rest_pos.tolist(),
                "tip_parent": self.tip_parent.tolist(),
                "tip_offsets": self.tip_offsets.tolist(),
                "axes": self.axes.tolist(),
                "vertices": self.template.vertices.tolist(),
                "faces": self.template.faces.tolist(),
                "skin_idx": self.skin_idx.tolist(),
                "skin_w": self.skin_w.tolist(),
                "labels": {k: v.tolist() for k, v in self.labels.items()},
                "limits": vars(self.limits),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "HandRig":
        d = json.loads(text)
        return HandRig(
            d["parents"], d["rest_pos"], d["tip_parent"], d["tip_offsets"], d["axes"],
            TriMesh(d["vertices"], d["faces"]), d["skin_idx"], d["skin_w"], d["labels"],
            AnatomyLimits(**d["limits"]),
        )


# ---------------------------------------------------------------------------
# default rig construction
# ---------------------------------------------------------------------------


def _capsule(p0, p1, radius, n_around=8, flat=1.0, flat_dir=None):
    """Capsule mesh between p0 and p1; returns (verts, faces, meta).

    meta[i] = (s, palmar) with s the axial parameter in [0, 1] extended past
    the caps, and palmar True for vertices on the -z side of the local frame.
    ``flat`` scales the cross-section along ``flat_dir`` (palm flattening).
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    L = np.linalg.norm(d)
    d = d / L
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    if flat_dir is None:
        flat_dir = np.array([0.0, 0.0, -1.0])
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts, meta = [], []

    def circle(center, r, s):
        for a in ang:
            off = r * (np.cos(a) * u + np.sin(a) * v)
            off = off + (flat - 1.0) * (off @ flat_dir) * flat_dir
            verts.append(center + off)
            meta.append((s, off @ np.array([0.0, 0.0, -1.0]) > 0.3 * r * flat))

    # pole0, cap ring, two cylinder rings, mid ring, cap ring, pole1
    verts.append(p0 - radius * d)
    meta.append((-0.2, False))
    c45 = radius * np.cos(np.pi / 4)
    s45 = radius * np.sin(np.pi / 4)
    circle(p0 - s45 * d, c45, -0.1)
    circle(p0, radius, 0.0)
    circle(p0 + 0.5 * L * d, radius, 0.5)
    circle(p1, radius, 1.0)
    circle(p1 + s45 * d, c45, 1.1)
    verts.append(p1 + radius * d)
    meta.append((1.2, False))

    faces = []
    n_rings = 5
    for i in range(n_around):  # pole 0 fan
        faces.append((0, 1 + i, 1 + (i + 1) % n_around))
    for r in range(n_rings - 1):
        base = 1 + r * n_around
        for i in range(n_around):
            a, b = base + i, base + (i + 1) % n_around
            c, e = a + n_around, b + n_around
            faces.append((a, c, b))
            faces.append((b, c, e))
    last = 1 + n_rings * n_around
    base = 1 + (n_rings - 1) * n_around
    for i in range(n_around):  # pole 1 fan
        faces.append((last, base + (i + 1) % n_around, base + i))
    faces = np.array(faces)[:, ::-1]  # wind outward (positive signed volume)
    return np.array(verts), faces, meta


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def default_rig(limits: AnatomyLimits | None = None) -> HandRig:
    """Build the standard right-hand capsule rig (deterministic)."""
    # skeleton: joint 0 = wrist; then (mcp, pip, dip) per finger
    finger_params = {
        # base position, direction, segment lengths, base radius
        "thumb": ((0.035, 0.022, -0.006), (0.75, 0.55, -0.25), (0.042, 0.032, 0.027), 0.0105),
        "index": ((0.032, 0.090, 0.0), (0.0, 1.0, 0.0), (0.042, 0.025, 0.020), 0.0085),
        "middle": ((0.011, 0.094, 0.0), (0.0, 1.0, 0.0), (0.046, 0.028, 0.022), 0.0088),
        "ring": ((-0.011, 0.090, 0.0), (0.0, 1.0, 0.0), (0.042, 0.026, 0.021), 0.0082),
        "pinky": ((-0.033, 0.082, 0.0), (0.0, 1.0, 0.0), (0.032, 0.020, 0.017), 0.0072),
    }
    parents = [-1]
    rest_pos = [np.zeros(3)]
    tip_parent, tip_offsets = [], []
    axes = []
    finger_joint_ids = {}
    for fi, name in enumerate(FINGERS):
        base, d, lens, _ = finger_params[name]
        d = np.asarray(d, float)
        d = d / np.linalg.norm(d)
        pos = np.asarray(base, float)
        ids = []
        parent = 0
        for li, ln in enumerate(lens):
            parents.append(parent)
            rest_pos.append(pos.copy())
            parent = len(parents) - 1
            ids.append(parent)
            pos = pos + d * ln
        finger_joint_ids[name] = ids
        tip_parent.append(ids[-1])
        tip_offsets.append(d * lens[-1] * 0.0 + (pos - rest_pos[ids[-1]]))
        # twist along the bone; bend curls toward the palm side
        if name == "thumb":
            target = np.array([-0.4, 0.4, -0.8])
            target /= np.linalg.norm(target)
            bend = np.cross(d, target)
            bend /= np.linalg.norm(bend)
        else:
            bend = np.array([-1.0, 0.0, 0.0])
        splay = np.cross(bend, d)
        for _ in lens:
            axes.append(np.stack([d, splay, bend]))
    rest_pos = np.array(rest_pos)

    # template mesh: one capsule per finger segment + flattened palm capsule
    all_verts, all_faces = [], []
    vert_finger = []  # finger index (-1 = palm) per vertex
    vert_seg = []  # segment index within the finger (0..2), -1 for palm
    vert_meta = []
    offset = 0
    for fi, name in enumerate(FINGERS):
        ids = finger_joint_ids[name]
        _, _, lens, r0 = finger_params[name]
        radii = (r0, r0 * 0.9, r0 * 0.82)
        for si, jid in enumerate(ids):
            p0 = rest_pos[jid]
            p1 = rest_pos[jid + 1] if si < 2 else rest_pos[jid] + tip_offsets[fi]
            v, f, meta = _capsule(p0, p1, radii[si])
            all_verts.append(v)
            all_faces.append(f + offset)
            vert_finger += [fi] * len(v)
            vert_seg += [si] * len(v)
            vert_meta += meta
            offset += len(v)
    v, f, meta = _capsule((0.0, 0.012, 0.0), (0.0, 0.082, 0.0), 0.042,
                          n_around=12, flat=0.34)
    all_verts.append(v)
    all_faces.append(f + offset)
    vert_finger += [-1] * len(v)
    vert_seg += [-1] * len(v)
    vert_meta += meta
    template = TriMesh(np.vstack(all_verts), np.vstack(all_faces))

    # skinning: candidates restricted to the vertex's own finger chain + wrist
    V = len(template.vertices)
    skin_idx = np.zeros((V, 4), dtype=np.int64)
    skin_w = np.zeros((V, 4))
    sigma = 0.012
    palm_bone = (np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.09, 0.0]))
    for vi in range(V):
        p = template.vertices[vi]
        fi = vert_finger[vi]
        if fi < 0:
            skin_idx[vi, 0] = 0
            skin_w[vi, 0] = 1.0
            continue
        ids = finger_joint_ids[FINGERS[fi]]
        bones = []
        for si, jid in enumerate(ids):
            end = rest_pos[jid + 1] if si < 2 else rest_pos[jid] + tip_offsets[fi]
            bones.append((jid, rest_pos[jid], end))
        bones.append((0, *palm_bone))
        w = np.array([np.exp(-(_point_segment_distance(p, a, b) / sigma) ** 2)
                      for _, a, b in bones])
        w /= w.sum()
        for k, (jid, _, _) in enumerate(bones):
            skin_idx[vi, k] = jid
            skin_w[vi, k] = w[k]

    meta_s = np.array([m[0] for m in vert_meta])
    palmar = np.array([m[1] for m in vert_meta])
    vf = np.array(vert_finger)
    vs = np.array(vert_seg)
    fingertips = np.nonzero((vs == 2) & (meta_s > 0.9))[0]
    pads = np.nonzero((vs >= 1) & palmar & ~np.isin(np.arange(V), fingertips))[0]
    palm = np.nonzero((vf == -1) & palmar)[0]
    labels = {"fingertips": fingertips, "finger_pads": pads, "palm": palm}
    return HandRig(parents, rest_pos, tip_parent, tip_offsets, axes, template,
                   skin_idx, skin_w, labels, limits)


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------


def fk_batch(rig: HandRig, theta: torch.Tensor, wrist_R: torch.Tensor,
             wrist_t: torch.Tensor, scale: torch.Tensor):
    """Differentiable FK + linear blend skinning over a batch of frames.

    theta (T,15,3), wrist_R (T,3,3), wrist_t (T,3), scale scalar or (T,).
    Returns (verts (T,V,3), joints (T,21,3)) in world coordinates.
    """
    rt = rig.tensors(theta.dtype)
    T = theta.shape[0]
    n = rig.n_joints
    R_local = torchutil.axis_angle_to_matrix(theta)  # (T,15,3,3)
    eye = torch.eye(3, dtype=theta.dtype).expand(T, 3, 3)
    R_g = [eye]
    p_g = [torch.zeros(T, 3, dtype=theta.dtype)]
    for j in range(1, n):
        parent = int(rig.parents[j])
        off = rt["rest_pos"][j] - rt["rest_pos"][parent]
        R_g.append(R_g[parent] @ R_local[:, j - 1])
        p_g.append(p_g[parent] + (R_g[parent] @ off).reshape(T, 3))
    R_g = torch.stack(R_g, dim=1)  # (T,n,3,3)
    p_g = torch.stack(p_g, dim=1)  # (T,n,3)

    # LBS over <= 4 influences
    v0 = rt["verts"]  # (V,3)
    idx = rt["skin_idx"]  # (V,4)
    w = rt["skin_w"]  # (V,4)
    Rv = R_g[:, idx]  # (T,V,4,3,3)
    pv = p_g[:, idx]  # (T,V,4,3)
    local = (v0[None, :, None, :] - rt["rest_pos"][idx][None])  # (1,V,4,3)
    skinned = (Rv @ local[..., None]).squeeze(-1) + pv  # (T,V,4,3)
    verts_local = (w[None, ..., None] * skinned).sum(dim=2)  # (T,V,3)

    tips = p_g[:, rig.tip_parent] + (
        R_g[:, rig.tip_parent] @ rt["tip_offsets"][None, ..., None]
    ).squeeze(-1)
    joints_local = torch.cat([p_g, tips], dim=1)  # (T,21,3)

    s = scale if torch.is_tensor(scale) else torch.tensor(scale, dtype=theta.dtype)
    s = s.reshape(-1, 1, 1) if s.ndim else s
    verts = (wrist_R[:, None] @ (s * verts_local)[..., None]).squeeze(-1) + wrist_t[:, None]
    joints = (wrist_R[:, None] @ (s * joints_local)[..., None]).squeeze(-1) + wrist_t[:, None]
    return verts, joints


def forward_kinematics(rig: HandRig, state: HandState):
    """Pose the rig; returns (posed TriMesh, joints (21,3), candidate positions).

    The candidate positions are a dict {label: (K,3) array} for the three
    contact-candidate vertex sets.
    """
    theta = torch.tensor(state.theta, dtype=torch.float64)[None]
    R = torch.tensor(quat_to_matrix(state.wrist_rot), dtype=torch.float64)[None]
    t = torch.tensor(state.wrist_trans, dtype=torch.float64)[None]
    verts, joints = fk_batch(rig, theta, R, t, torch.tensor(state.scale, dtype=torch.float64))
    verts = verts[0].numpy()
    joints = joints[0].numpy()
    mesh = TriMesh(verts, rig.template.faces, validate=False)
    candidates = {k: verts[v] for k, v in rig.labels.items()}
    return mesh, joints, candidates


def fk_joints(rig: HandRig, state: HandState) -> np.ndarray:
    """Joints-only FK (21,3) in numpy; much cheaper than skinning the mesh."""
    from scipy.spatial.transform import Rotation

    n = rig.n_joints
    R_local = Rotation.from_rotvec(state.theta).as_matrix()  # (15,3,3)
    R_g = np.empty((n, 3, 3))
    p_g = np.empty((n, 3))
    R_g[0] = np.eye(3)
    p_g[0] = 0.0
    for j in range(1, n):
        parent = int(rig.parents[j])
        R_g[j] = R_g[parent] @ R_local[j - 1]
        p_g[j] = p_g[parent] + R_g[parent] @ (rig.rest_pos[j] - rig.rest_pos[parent])
    tips = p_g[rig.tip_parent] + np.einsum("fij,fj->fi", R_g[rig.tip_parent],
                                           rig.tip_offsets)
    joints = np.vstack([p_g, tips])
    Rw = quat_to_matrix(state.wrist_rot)
    return (state.scale * joints) @ Rw.T + state.wrist_trans


def fk_sequence(rig: HandRig, states) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized FK over a list of HandStates; returns (verts (T,V,3), joints (T,21,3))."""
    theta = torch.tensor(np.stack([s.theta for s in states]), dtype=torch.float64)
    R = torch.tensor(np.stack([quat_to_matrix(s.wrist_rot) for s in states]), dtype=torch.float64)
    t = torch.tensor(np.stack([s.wrist_trans for s in states]), dtype=torch.float64)
    sc = torch.tensor(np.array([s.scale for s in states]), dtype=torch.float64)
    verts, joints = fk_batch(rig, theta, R, t, sc)
    return verts.numpy(), joints.numpy()


# ---------------------------------------------------------------------------
# anatomy penalty
# ---------------------------------------------------------------------------


def anatomy_penalty(rig: HandRig, state: HandState):
    """Twist/splay/bend limit penalty and its analytic gradient w.r.t. theta.

    Each joint's axis-angle vector is projected onto the rig's local
    twist/splay/bend axes; out-of-limit components are penalized
    quadratically.
    """
    lm = rig.limits
    c = np.einsum("jkd,jd->jk", rig.axes, state.theta)  # (15,3) twist/splay/bend
    value = 0.0
    grad = np.zeros((15, 3))
    sym_limits = (lm.twist, lm.splay)
    for k in range(2):
        excess = np.maximum(0.0, np.abs(c[:, k]) - sym_limits[k])
        value += (excess ** 2).sum()
        grad += (2.0 * excess * np.sign(c[:, k]))[:, None] * rig.axes[:, k]
    hi = np.maximum(0.0, c[:, 2] - lm.bend_hi)
    lo = np.maximum(0.0, lm.bend_lo - c[:, 2])
    value += (hi ** 2).sum() + (lo ** 2).sum()
    grad += (2.0 * hi - 2.0 * lo)[:, None] * rig.axes[:, 2]
    return float(value), grad


def anatomy_penalty_torch(rig: HandRig, theta: torch.Tensor) -> torch.Tensor:
    """Batched differentiable anatomy penalty; theta (..., 15, 3) -> (...)."""
    lm = rig.limits
    axes = rig.tensors(theta.dtype)["axes"]
    c = torch.einsum("jkd,...jd->...jk", axes, theta)
    pen = (
        torch.clamp(c[..., 0].abs() - lm.twist, min=0) ** 2
        + torch.clamp(c[..., 1].abs() - lm.splay, min=0) ** 2
        + torch.clamp(c[..., 2] - lm.bend_hi, min=0) ** 2
        + torch.clamp(lm.bend_lo - c[..., 2], min=0) ** 2
    )
    return pen.sum(dim=-1)


# ---------------------------------------------------------------------------
# interaction-frame selection
# ---------------------------------------------------------------------------


def fingertip_speed_profile(joints_over_time: np.ndarray) -> np.ndarray:
    """Mean fingertip speed per frame, box-smoothed (centered, 5 frames)."""
    tips = joints_over_time[:, 16:21]  # (T,5,3)
    step = np.linalg.norm(np.diff(tips, axis=0), axis=2).mean(axis=1)  # (T-1,)
    speed = np.concatenate([step[:1], step])  # frame 0 copies frame 1
    kernel = np.ones(5)
    num = np.convolve(speed, kernel, mode="same")
    den = np.convolve(np.ones_like(speed), kernel, mode="same")
    return num / den


def first_strict_local_min(profile: np.ndarray) -> int:
    """Index of the first strict local minimum; argmin if there is none."""
    p = np.asarray(profile, dtype=float)
    for i in range(1, len(p) - 1):
        if p[i] < p[i - 1] and p[i] < p[i + 1]:
            return i
    return int(np.argmin(p))


def select_interaction_frame(joints_over_time: np.ndarray) -> int:
    """Frame where the fingertips decelerate into the grasp."""
    T = len(joints_over_time)
    if T < 3:
        raise TooShort("need at least 3 frames")
    return first_strict_local_min(fingertip_speed_profile(joints_over_time))
