"""Object pose-sequence machinery: guarded acceptance, gap interpolation,
phase segmentation, static-segment initialization, and ray-scale alignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import hand as hand_mod
from . import torchutil
from .errors import EmptyInteractionSet, NoValidFrames, TooShort
from .geometry import Pose6D, TriMesh, fit_similarity, matrix_to_quat, quat_angle, slerp
from .optim import EmaBank, adam_step
from .render import (Camera, SilhouetteGrid, depth_at_pixels, render_depth_faces,
                     soft_silhouette)

PHASES = ("pre_static", "approach", "interacting", "release", "post_static")
GUARD_ANGLE = np.deg2rad(60.0)
GUARD_RETRIES = 3


@dataclass
class ObjectTrack:
    """Canonical object mesh + metric scale + per-frame optional world pose."""

    mesh: TriMesh
    scale: float
    poses: list  # Pose6D | None per frame
    provenance: list = None  # {"accepted", "interpolated", "rejected"}
    mesh_ref: str = "object"

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.provenance is None:
            self.provenance = ["rejected" if p is None else "accepted" for p in self.poses]
        if len(self.provenance) != len(self.poses):
            raise ValueError("provenance length mismatch")
        for pose, prov in zip(self.poses, self.provenance):
            if (pose is None) == (prov in ("accepted", "interpolated")):
                raise ValueError("validity flag inconsistent with pose presence")
        self._reference = None  # index of last accepted frame (guard state)

    def __len__(self):
        return len(self.poses)

    @property
    def validity(self) -> np.ndarray:
        return np.array([p is not None for p in self.poses])

    def posed_mesh(self, frame: int) -> TriMesh:
        return self.mesh.transformed(self.poses[frame], self.scale)

    def centroids(self) -> np.ndarray:
        c = self.mesh.centroid() * self.scale
        return np.array([p.apply(c) if p is not None else np.full(3, np.nan)
                         for p in self.poses])

    def copy(self) -> "ObjectTrack":
        t = ObjectTrack(self.mesh, self.scale, list(self.poses),
                        list(self.provenance), self.mesh_ref)
        t._reference = self._reference
        return t

    def to_json(self) -> str:
        frames = []
        for i, (pose, prov) in enumerate(zip(self.poses, self.provenance)):
            rec = {"idx": i, "provenance": prov}
            if pose is not None:
                rec["q"] = [float(x) for x in pose.q]
                rec["t"] = [float(x) for x in pose.t]
            frames.append(rec)
        return json.dumps({"frames": frames, "scale": self.scale,
                           "mesh_ref": self.mesh_ref})

    @staticmethod
    def from_json(text: str, mesh: TriMesh) -> "ObjectTrack":
        d = json.loads(text)
        poses, prov = [], []
        for rec in sorted(d["frames"], key=lambda r: r["idx"]):
            if "q" in rec:
                poses.append(Pose6D(np.array(rec["q"]), np.array(rec["t"])))
            else:
                poses.append(None)
            prov.append(rec["provenance"])
        return ObjectTrack(mesh, d["scale"], poses, prov, d["mesh_ref"])


def accept_pose(track: ObjectTrack, frame: int, candidate: Pose6D,
                retries_available: int = GUARD_RETRIES) -> str:
    """Guarded acceptance against the last accepted pose (60 deg, inclusive).

    Mutates the track on acceptance; a rejection changes nothing (the caller
    may retry with a re-seeded candidate while retries remain).
    """
    if not 0 <= frame < len(track):
        raise IndexError(frame)
    if track._reference is not None:
        ref = track.poses[track._reference]
        if quat_angle(candidate.q, ref.q) > GUARD_ANGLE + 1e-9:
            return "rejected"
    track.poses[frame] = candidate
    track.provenance[frame] = "accepted"
    track._reference = frame
    return "accepted"


def fill_gaps(track: ObjectTrack) -> ObjectTrack:
    """Interpolate missing frames (slerp/lerp interior, constant at the ends)."""
    valid = np.nonzero(track.validity)[0]
    if len(valid) == 0:
        raise NoValidFrames("no accepted poses to interpolate from")
    out = track.copy()
    for i in range(len(track)):
        if out.poses[i] is not None:
            continue
        prev = valid[valid < i]
        nxt = valid[valid > i]
        if len(prev) and len(nxt):
            a, b = int(prev[-1]), int(nxt[0])
            u = (i - a) / (b - a)
            out.poses[i] = slerp(track.poses[a], track.poses[b], u)
        else:
            k = int(nxt[0]) if len(nxt) else int(prev[-1])
            out.poses[i] = track.poses[k]
        out.provenance[i] = "interpolated"
    return out


# ---------------------------------------------------------------------------
# phase segmentation
# ---------------------------------------------------------------------------


@dataclass
class PhaseLabels:
    labels: list  # per-frame phase name

    def __post_init__(self):
        run_order = [lab for i, lab in enumerate(self.labels)
                     if i == 0 or lab != self.labels[i - 1]]
        if len(run_order) != len(set(run_order)):
            raise ValueError("phase runs not contiguous")
        ranks = [PHASES.index(lab) for lab in run_order]
        if ranks != sorted(ranks):
            raise ValueError("phase runs out of canonical order")

    def __len__(self):
        return len(self.labels)

    def frames_with(self, label: str) -> np.ndarray:
        return np.nonzero(np.array(self.labels) == label)[0]

    @property
    def interaction_frames(self) -> np.ndarray:
        return self.frames_with("interacting")

    def runs(self) -> list:
        out = []
        for i, lab in enumerate(self.labels):
            if out and out[-1][0] == lab:
                out[-1][2] = i
            else:
                out.append([lab, i, i])
        return [(lab, start, end) for lab, start, end in out]

    def to_json(self) -> str:
        return json.dumps([{"label": lab, "start": s, "end": e}
                           for lab, s, e in self.runs()])

    @staticmethod
    def from_json(text: str) -> "PhaseLabels":
        labels = []
        for rec in json.loads(text):
            labels += [rec["label"]] * (rec["end"] - rec["start"] + 1)
        return PhaseLabels(labels)


def _smooth5(x: np.ndarray) -> np.ndarray:
    k = np.ones(5)
    return np.convolve(x, k, mode="same") / np.convolve(np.ones_like(x), k, mode="same")


def segment_phases(object_centroid_track: np.ndarray, mask_iou_deltas: np.ndarray,
                   hand_joints: np.ndarray, tau_move: float = 0.5,
                   tau_iou: float = 0.02, tau_hand: float = 0.002) -> PhaseLabels:
    """Label each frame with one of the five canonical interaction phases.

    object motion = smoothed 2D centroid speed above tau_move px/frame or
    smoothed consecutive-mask IoU change (1 - IoU) above tau_iou; the
    interacting run spans first to last object-moving frame.  Hand-moving
    runs (mean 3D joint speed above tau_hand m/frame) flanking it become
    approach/release; the remaining head/tail frames are pre/post_static.
    """
    T = len(object_centroid_track)
    if T < 3:
        raise TooShort("need at least 3 frames for phase segmentation")
    speed = np.linalg.norm(np.diff(object_centroid_track, axis=0), axis=1)
    speed = _smooth5(np.concatenate([speed[:1], speed]))
    iou = _smooth5(np.concatenate([[0.0], np.abs(np.asarray(mask_iou_deltas, float))]))
    moving = (speed > tau_move) | (iou > tau_iou)

    labels = ["pre_static"] * T
    if not moving.any():
        return PhaseLabels(labels)
    first, last = int(np.argmax(moving)), T - 1 - int(np.argmax(moving[::-1]))
    for i in range(first, last + 1):
        labels[i] = "interacting"

    hspeed = np.linalg.norm(np.diff(hand_joints, axis=0), axis=2).mean(axis=1)
    hspeed = _smooth5(np.concatenate([hspeed[:1], hspeed]))
    hand_moving = hspeed > tau_hand
    i = first - 1
    while i >= 0 and hand_moving[i]:
        labels[i] = "approach"
        i -= 1
    i = last + 1
    while i < T and hand_moving[i]:
        labels[i] = "release"
        i += 1
    while i < T:
        labels[i] = "post_static"
        i += 1
    return PhaseLabels(labels)


# ---------------------------------------------------------------------------
# static-segment initialization
# ---------------------------------------------------------------------------


def _backproject(cam: Camera, us, vs, depth):
    rays = np.stack([(us + 0.5 - cam.cx) / cam.fx,
                     (vs + 0.5 - cam.cy) / cam.fy,
                     np.ones(len(us))], axis=1)
    pts_cam = rays * depth[:, None]
    inv = cam.pose.inverse()
    return inv.apply(pts_cam)


def static_init(cam: Camera, mesh: TriMesh, target_masks, target_depths, frames,
                init_pose: Pose6D, init_scale: float = 1.0, iters: int = 500,
                lr: float = 1e-3):
    """Fit one shared pose + scale to the static-segment masks and depths.

    Minimizes EMA-normalized soft-silhouette MSE plus depth MSE (on pixels
    both rendered and inside the modal mask) with Adam.  A sanity gate then
    checks the similarity-fit scale between backprojected rendered and target
    depths (must lie in [0.7, 1.3]) and the final mask IoU (>= 0.8); on gate
    failure the input pose is returned with accepted=False.

    Returns (pose, scale, accepted).
    """
    frames = list(frames)
    if not frames:
        raise NoValidFrames("empty static segment")
    masks = [target_masks[f] for f in frames]
    depths = [target_depths[f] for f in frames]
    mask_t = [torch.tensor(m.values, dtype=torch.float64) for m in masks]

    v0 = torch.tensor(mesh.vertices, dtype=torch.float64)
    q_ref = torch.tensor(init_pose.q, dtype=torch.float64)
    t0 = torch.tensor(init_pose.t, dtype=torch.float64)
    params = np.zeros(7)  # rotation tangent (3), translation delta (3), log-scale
    state = None
    bank = EmaBank()

    def world_verts(p: torch.Tensor):
        R = torchutil.retract(q_ref, p[0:3])
        s = torch.exp(p[6]) * init_scale
        return (s * v0) @ R.T + t0 + p[3:6]

    for _ in range(iters):
        p = torch.tensor(params, requires_grad=True)
        verts = world_verts(p)
        mask_mse = sum(((soft_silhouette(cam, verts, mesh.faces, gamma=1.0) - mt) ** 2).mean()
                       for mt in mask_t) / len(mask_t)
        with torch.no_grad():
            det_mesh = TriMesh(verts.detach().numpy(), mesh.faces, validate=False)
            rd, fidx = render_depth_faces(cam, det_mesh)
        depth_terms = []
        for mt, dt in zip(masks, depths):
            sel = np.isfinite(rd) & mt.mask & np.isfinite(dt)
            if not sel.any():
                continue
            vsel, usel = np.nonzero(sel)
            pix = torch.tensor(np.stack([usel + 0.5, vsel + 0.5], axis=1),
                               dtype=torch.float64)
            z = depth_at_pixels(cam, verts, mesh.faces, pix, fidx[vsel, usel])
            depth_terms.append(((z - torch.tensor(dt[vsel, usel])) ** 2).mean())
        total = bank.normalize("mask", mask_mse)
        if depth_terms:
            total = total + bank.normalize("depth", sum(depth_terms) / len(depth_terms))
        total.backward()
        params, state = adam_step(params, p.grad.numpy(), state, lr)

    p_final = torch.tensor(params)
    R = torchutil.retract(q_ref, p_final[0:3]).numpy()
    pose = Pose6D(matrix_to_quat(R), init_pose.t + params[3:6])
    scale = float(np.exp(params[6]) * init_scale)

    # gate: similarity-fit between backprojected rendered/target depths
    fitted = mesh.transformed(pose, scale)
    rd, _ = render_depth_faces(cam, fitted)
    rendered_mask = SilhouetteGrid(np.isfinite(rd).astype(float), "hard")
    ious = [rendered_mask.iou(m) for m in masks]
    scale_ok = True
    for dt, mt in zip(depths, masks):
        sel = np.isfinite(rd) & mt.mask & np.isfinite(dt)
        if sel.sum() < 3:
            continue
        vsel, usel = np.nonzero(sel)
        try:
            s_fit, _, _ = fit_similarity(
                _backproject(cam, usel.astype(float), vsel.astype(float), rd[vsel, usel]),
                _backproject(cam, usel.astype(float), vsel.astype(float), dt[vsel, usel]))
        except Exception:
            scale_ok = False
            continue
        if not 0.7 <= s_fit <= 1.3:
            scale_ok = False
    accepted = scale_ok and (np.mean(ious) >= 0.8)
    if not accepted:
        return init_pose, init_scale, False
    return pose, scale, True


# ---------------------------------------------------------------------------
# ray-scale alignment
# ---------------------------------------------------------------------------


def align_ray_scale(hand_states, track: ObjectTrack, cam: Camera,
                    interaction_frames, rig=None):
    """Slide the whole object track along the camera ray so interaction-frame
    median object depth matches the median palm depth.

    Returns (new ObjectTrack, diagnostics dict).  The same translation is
    applied to every frame, so relative object motion is untouched.
    """
    frames = sorted(set(int(f) for f in interaction_frames))
    if not frames:
        raise EmptyInteractionSet("no interaction frames for ray-scale alignment")
    rig = rig or _default_rig_cached()
    centroids = track.centroids()[frames]
    obj_depths = cam.to_camera(centroids)[:, 2]

    _, joints = hand_mod.fk_sequence(rig, [hand_states[f] for f in frames])
    palm = joints[:, [0, 4, 7, 10, 13]].mean(axis=1)  # wrist + four finger MCPs
    palm_depths = cam.to_camera(palm)[:, 2]

    origin = cam.center_world()
    rays = centroids - origin
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    ray = rays.mean(axis=0)
    ray /= np.linalg.norm(ray)
    rz = float(cam.pose.R[2] @ ray)  # depth change per unit step along the ray
    delta = float((np.median(palm_depths) - np.median(obj_depths)) / rz)

    out = track.copy()
    shift = delta * ray
    out.poses = [Pose6D(p.q, p.t + shift) if p is not None else None
                 for p in track.poses]
    new_depths = obj_depths + delta * rz
    diag = {
        "delta": delta,
        "ray": [float(x) for x in ray],
        "median_object_depth_before": float(np.median(obj_depths)),
        "median_palm_depth": float(np.median(palm_depths)),
        "median_object_depth_after": float(np.median(new_depths)),
    }
    return out, diag


_RIG_CACHE = {}


def _default_rig_cached():
    if "rig" not in _RIG_CACHE:
        _RIG_CACHE["rig"] = hand_mod.default_rig()
    return _RIG_CACHE["rig"]
