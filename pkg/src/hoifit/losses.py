"""Fitting objectives and the two optimization drivers.

Everything the isolated stage (object mask/attraction fitting, hand 2D/depth
fitting) and the joint contact-aware stage optimize lives here: a flat
parameter vector with a documented layout, loss terms with analytic gradients
obtained by reverse-mode differentiation of the exact forward expressions,
EMA-based term normalization, and a from-scratch Adam with per-group learning
rates expressed as an elementwise lr vector.

Rotations are optimized as tangent-space increments applied to the reference
quaternion through the exponential map, so unit norm is preserved by
construction; absolute quantities (translations, finger angles) are stored
directly in the vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import torchutil
from .contact import ContactCache, rebuild_cache
from .errors import MissingMask, MissingObservation
from .geometry import Pose6D, matrix_to_quat
from .hand import HandRig, HandState, anatomy_penalty_torch, fk_batch
from .optim import (AdamState, EmaBank, EmaState,  # noqa: F401 (re-export)
                    adam_step, ema_normalize)
from .render import Camera, project_torch, soft_silhouette
from .tracking import ObjectTrack, align_ray_scale

N_ATTRACTION_SAMPLES = 2000
ALPHA_UNCOVER = 20.0
PEN_DEAD_ZONE = 0.005
PEN_CLIP = 0.04


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Index map for the flat optimization vector.

    Blocks, in order: object rotation increments (T,3), object translations
    (T,3), finger angles theta (T,15,3), wrist rotation increments (T,3),
    wrist translations (T,3).  Rotation blocks hold tangent increments
    relative to the reference quaternions captured at packing time.
    """

    n_frames: int

    @property
    def size(self) -> int:
        return 57 * self.n_frames

    def _block(self, start_units: int, units: int):
        a = start_units * self.n_frames
        return slice(a, a + units * self.n_frames)

    @property
    def obj_rot(self):
        return self._block(0, 3)

    @property
    def obj_trans(self):
        return self._block(3, 3)

    @property
    def theta(self):
        return self._block(6, 45)

    @property
    def wrist_rot(self):
        return self._block(51, 3)

    @property
    def wrist_trans(self):
        return self._block(54, 3)

    @property
    def object_slots(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.obj_rot] = mask[self.obj_trans] = True
        return mask

    @property
    def hand_slots(self) -> np.ndarray:
        return ~self.object_slots

    def lr_vector(self, lr_object: float, lr_finger: float, lr_wrist: float) -> np.ndarray:
        lr = np.empty(self.size)
        lr[self.obj_rot] = lr[self.obj_trans] = lr_object
        lr[self.theta] = lr_finger
        lr[self.wrist_rot] = lr[self.wrist_trans] = lr_wrist
        return lr


class FitProblem:
    """Reference geometry + quaternion bases for one optimization run.

    ``pack`` produces the flat vector (rotation tangents zero at the
    reference), ``unpack`` maps any vector back to a track and hand states,
    and ``torch_eval`` builds the differentiable world-space quantities the
    loss terms consume.
    """

    def __init__(self, rig: HandRig, track: ObjectTrack, hand_states):
        if any(p is None for p in track.poses):
            raise ValueError("all track poses must be valid (fill gaps first)")
        if len(hand_states) != len(track.poses):
            raise ValueError("hand/object frame count mismatch")
        self.rig = rig
        self.track = track
        self.hand_states = list(hand_states)
        self.layout = ParamLayout(len(hand_states))
        T = self.layout.n_frames
        self.base_obj_q = np.stack([p.q for p in track.poses])
        self.base_wrist_q = np.stack([s.wrist_rot for s in hand_states])
        self.hand_scales = np.array([s.scale for s in hand_states])
        self._tq_obj = torch.tensor(self.base_obj_q, dtype=torch.float64)
        self._tq_wrist = torch.tensor(self.base_wrist_q, dtype=torch.float64)
        self._canon = torch.tensor(track.mesh.vertices * track.scale,
                                   dtype=torch.float64)
        self._canon_normals = torch.tensor(track.mesh.vertex_normals,
                                           dtype=torch.float64)

    def pack(self) -> np.ndarray:
        lay = self.layout
        v = np.zeros(lay.size)
        v[lay.obj_trans] = np.stack([p.t for p in self.track.poses]).ravel()
        v[lay.theta] = np.stack([s.theta for s in self.hand_states]).ravel()
        v[lay.wrist_trans] = np.stack(
            [s.wrist_trans for s in self.hand_states]).ravel()
        return v

    def unpack(self, v: np.ndarray):
        lay = self.layout
        T = lay.n_frames
        vt = torch.tensor(np.asarray(v, dtype=float))
        obj_R = torchutil.retract(self._tq_obj, vt[lay.obj_rot].reshape(T, 3))
        wrist_R = torchutil.retract(self._tq_wrist,
                                    vt[lay.wrist_rot].reshape(T, 3))
        poses = [Pose6D(matrix_to_quat(obj_R[t].numpy()),
                        v[lay.obj_trans].reshape(T, 3)[t]) for t in range(T)]
        track = ObjectTrack(self.track.mesh, self.track.scale, poses,
                            provenance=list(self.track.provenance),
                            mesh_ref=self.track.mesh_ref)
        theta = v[lay.theta].reshape(T, 15, 3)
        wt = v[lay.wrist_trans].reshape(T, 3)
        states = [replace(self.hand_states[t], theta=theta[t],
                          wrist_rot=matrix_to_quat(wrist_R[t].numpy()),
                          wrist_trans=wt[t]) for t in range(T)]
        return track, states

    def torch_eval(self, vt: torch.Tensor, with_hand=True, with_object=True) -> dict:
        lay = self.layout
        T = lay.n_frames
        out = {}
        if with_object:
            obj_R = torchutil.retract(self._tq_obj, vt[lay.obj_rot].reshape(T, 3))
            obj_t = vt[lay.obj_trans].reshape(T, 3)
            out["obj_R"] = obj_R
            out["obj_t"] = obj_t
            out["obj_verts"] = (self._canon[None] @ obj_R.transpose(1, 2)
                                + obj_t[:, None])
            out["obj_normals"] = self._canon_normals[None] @ obj_R.transpose(1, 2)
        if with_hand:
            theta = vt[lay.theta].reshape(T, 15, 3)
            wrist_R = torchutil.retract(self._tq_wrist,
                                        vt[lay.wrist_rot].reshape(T, 3))
            wrist_t = vt[lay.wrist_trans].reshape(T, 3)
            scale = torch.tensor(self.hand_scales, dtype=torch.float64)
            verts, joints = fk_batch(self.rig, theta, wrist_R, wrist_t, scale)
            out.update(theta=theta, wrist_R=wrist_R, wrist_t=wrist_t,
                       hand_verts=verts, joints=joints)
        return out


# ---------------------------------------------------------------------------
# weights and reports
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    """Every term weight with its published default."""

    # isolated object fitting
    rep: float = 1.5
    attr: float = 1.0
    temp_o: float = 10.0
    stat: float = 1.0
    stat_inline: float = 100.0
    # isolated hand fitting
    joints_2d: float = 1.0
    anat: float = 5.0
    prior: float = 1.0
    depth: float = 10.0
    # joint stage
    contact: float = 1e3
    pen: float = 500.0
    sil: float = 500.0
    anchor_2d: float = 0.5
    anchor_anat: float = 30.0
    anchor_hand_pose: float = 100.0
    anchor_obj_iso: float = 100.0
    anchor_obj_rect: float = 100.0
    t_pose_vel: float = 500.0
    t_obj_vel: float = 500.0
    t_wrist_anchor: float = 200.0
    t_trans_vel: float = 200.0
    t_root_vel: float = 500.0
    t_pose_acc: float = 1000.0
    t_trans_acc: float = 5000.0
    t_root_acc: float = 3000.0
    ema_decay: float = 0.99

    def __post_init__(self):
        for f in fields(self):
            if f.name == "ema_decay":
                continue
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")

    @property
    def temp_h(self) -> float:
        # reproduced literally from the published schedule even though it
        # collapses to 1.0 at the default temp_o = 10
        return max(0.1 * self.temp_o, 1.0)

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


@dataclass
class LossReport:
    raw: dict
    weighted: dict
    total: float
    grad: np.ndarray | None = None
    normalizers: dict = field(default_factory=dict)
    skipped: tuple = ()

    def __post_init__(self):
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise ValueError("non-finite gradient")
        if not np.isfinite(self.total):
            raise ValueError("non-finite total loss")


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def history_to_csv(history, path):
    """Loss history rows -> CSV (iteration, raw terms, weighted terms, total)."""
    if not history:
        raise ValueError("empty history")
    names = sorted({k for _, r in history for k in r.raw})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"raw_{n}" for n in names]
                   + [f"weighted_{n}" for n in names] + ["total"])
        for it, r in history:
            w.writerow([it]
                       + [r.raw.get(n, "") for n in names]
                       + [r.weighted.get(n, "") for n in names]
                       + [r.total])


# ---------------------------------------------------------------------------
# differentiable rotation utilities
# ---------------------------------------------------------------------------


def _exp_quat(delta: torch.Tensor) -> torch.Tensor:
    """Tangent increment (...,3) -> unit quaternion (...,4), smooth at 0."""
    sq = (delta ** 2).sum(-1, keepdim=True)
    angle = torch.sqrt(torch.clamp(sq, min=1e-32))
    half = 0.5 * angle
    small = sq < 1e-16
    sinc = torch.where(small, 0.5 - sq / 48.0, torch.sin(half) / angle)
    w = torch.where(small, 1.0 - sq / 8.0, torch.cos(half))
    return torch.cat([w, sinc * delta], dim=-1)


def _quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def _quat_conj(q: torch.Tensor) -> torch.Tensor:
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def _geodesic_sq(qa: torch.Tensor, qb: torch.Tensor) -> torch.Tensor:
    """Squared geodesic angle between unit quaternions, smooth at 0."""
    rel = _quat_mul(_quat_conj(qa), qb)
    x = (rel[..., 1:] ** 2).sum(-1)
    xs = torch.clamp(x, min=1e-32, max=1.0 - 1e-12)
    return (2.0 * torch.asin(torch.sqrt(xs))) ** 2


def _retracted_quats(base_q: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    return _quat_mul(base_q, _exp_quat(delta))


def _rot6d(R: torch.Tensor) -> torch.Tensor:
    return torchutil.matrix_to_6d(R)


# ---------------------------------------------------------------------------
# isolated object loss
# ---------------------------------------------------------------------------


def _check_masks(amodal_masks, n_frames):
    missing = [t for t in range(n_frames)
               if t >= len(amodal_masks) or amodal_masks[t] is None]
    if missing:
        raise MissingMask(missing)


def _stage1_object_terms(problem: FitProblem, vt, cam, amodal_masks,
                         phase_labels, rng=None, attr_pixels=None) -> dict:
    lay = problem.layout
    T = lay.n_frames
    ev = problem.torch_eval(vt, with_hand=False)
    faces = problem.track.mesh.faces
    terms = {}

    rep = vt.new_zeros(())
    attr = vt.new_zeros(())
    for t in range(T):
        target = torch.tensor(np.asarray(amodal_masks[t], dtype=float))
        soft = soft_silhouette(cam, ev["obj_verts"][t], faces, gamma=1.0)
        rep = rep + (torch.clamp(soft - target, min=0.0) ** 2).mean()

        # attraction samples: target-mask pixels, uncovered regions boosted
        if attr_pixels is not None:
            if attr_pixels[t] is None:
                continue
            pix = torch.tensor(attr_pixels[t], dtype=torch.float64)
        else:
            tgt = np.asarray(amodal_masks[t], dtype=float)
            rendered = (soft.detach().numpy() >= 0.5).astype(float)
            w = tgt + ALPHA_UNCOVER * tgt * (1.0 - rendered) + 1e-6
            w = np.where(tgt > 0, w, 0.0)
            support = np.flatnonzero(w.ravel())
            if len(support) == 0:
                continue
            p = w.ravel()[support]
            picks = rng.choice(support, size=N_ATTRACTION_SAMPLES,
                               p=p / p.sum())
            py, px = np.divmod(picks, cam.width)
            pix = torch.tensor(np.stack([px + 0.5, py + 0.5], axis=1),
                               dtype=torch.float64)
        uv, _ = project_torch(cam, ev["obj_verts"][t])
        d2 = ((pix[:, None, :] - uv[None]) ** 2).sum(-1)  # (S,V)
        attr = attr + d2.min(dim=1).values.mean()
    terms["rep"] = rep / T
    terms["attr"] = attr / T

    q = _retracted_quats(problem._tq_obj, vt[lay.obj_rot].reshape(T, 3))
    tr = ev["obj_t"]
    if T > 1:
        terms["temp_o"] = (_geodesic_sq(q[:-1], q[1:]).sum()
                           + ((tr[1:] - tr[:-1]) ** 2).sum(-1).sum()) / (T - 1)
    else:
        terms["temp_o"] = vt.new_zeros(())

    stat = vt.new_zeros(())
    n_static = 0
    for lab, a, b in phase_labels.runs():
        if lab in ("pre_static", "post_static"):
            seg = list(range(a, b + 1))
            if len(seg) < 2:
                continue
            # rotation deviation in the tangent at the segment's first pose
            rel = _quat_mul(_quat_conj(q[seg[0]]).expand(len(seg), 4), q[seg])
            tang = rel[:, 1:] * torch.sign(rel[:, :1] + 1e-12)
            stat = stat + ((tang - tang.mean(0)) ** 2).sum()
            stat = stat + ((tr[seg] - tr[seg].mean(0)) ** 2).sum()
            n_static += len(seg)
    terms["stat"] = stat / max(n_static, 1)
    return terms


def loss_stage1_object(track: ObjectTrack, cam: Camera, amodal_masks,
                       phase_labels, weights: LossWeights, rig: HandRig = None,
                       ema: EmaBank = None, seed: int = 0) -> LossReport:
    """Isolated object objective at the track's current poses, with gradient."""
    from .hand import default_rig
    rig = rig or default_rig()
    _check_masks(amodal_masks, len(track.poses))
    problem = FitProblem(rig, track, [HandState.rest()] * len(track.poses))
    ema = ema if ema is not None else EmaBank(decay=weights.ema_decay)
    rng = np.random.default_rng(seed)
    vt = torch.tensor(problem.pack(), requires_grad=True)
    total, report = _object_report(problem, vt, cam, amodal_masks,
                                   phase_labels, weights, ema, rng)
    total.backward()
    report.grad = vt.grad.numpy().copy()
    return report


def _object_report(problem, vt, cam, amodal_masks, phase_labels, weights,
                   ema, rng):
    terms = _stage1_object_terms(problem, vt, cam, amodal_masks,
                                 phase_labels, rng)
    rep_n = ema.normalize("rep", terms["rep"])
    attr_n = ema.normalize("attr", terms["attr"])
    weighted = {
        "rep": weights.rep * rep_n,
        "attr": weights.attr * attr_n,
        "temp_o": weights.temp_o * terms["temp_o"],
        "stat": weights.stat * weights.stat_inline * terms["stat"],
    }
    total = sum(weighted.values())
    report = LossReport(
        raw={k: _scalar(v) for k, v in terms.items()},
        weighted={k: _scalar(v) for k, v in weighted.items()},
        total=_scalar(total),
        normalizers={k: ema.states[k].corrected for k in ("rep", "attr")})
    return total, report


# ---------------------------------------------------------------------------
# isolated hand loss
# ---------------------------------------------------------------------------


def _check_observations(obs_joints_2d, obs_wrist_depth, n_frames):
    joints = np.asarray(obs_joints_2d, dtype=float)
    depth = np.asarray(obs_wrist_depth, dtype=float)
    if joints.shape != (n_frames, 21, 2) or depth.shape != (n_frames,):
        raise MissingObservation(list(range(n_frames)))
    missing = [t for t in range(n_frames)
               if not (np.all(np.isfinite(joints[t])) and np.isfinite(depth[t]))]
    if missing:
        raise MissingObservation(missing)
    return joints, depth


def _stage1_hand_terms(problem: FitProblem, vt, cam, obs_joints, obs_depth,
                       prior_states) -> dict:
    lay = problem.layout
    T = lay.n_frames
    ev = problem.torch_eval(vt, with_object=False)
    terms = {}

    joints = ev["joints"]  # (T,21,3)
    uv, _ = project_torch(cam, joints.reshape(-1, 3))
    obs = torch.tensor(obs_joints.reshape(-1, 2))
    terms["joints_2d"] = ((uv - obs) ** 2).sum(-1).mean()

    Rc, tc = cam.torch_pose(vt.dtype)
    wrist_cam = ev["joints"][:, 0] @ Rc.T + tc
    terms["depth"] = ((wrist_cam[:, 2] - torch.tensor(obs_depth)) ** 2).mean()

    terms["anat"] = anatomy_penalty_torch(problem.rig, ev["theta"]).mean()

    prior_theta = torch.tensor(np.stack([s.theta for s in prior_states]))
    R = torchutil.axis_angle_to_matrix(ev["theta"])
    R_prior = torchutil.axis_angle_to_matrix(prior_theta)
    terms["prior"] = ((_rot6d(R) - _rot6d(R_prior)) ** 2).sum(-1).mean()

    if T > 1:
        terms["temp_h"] = ((joints[1:] - joints[:-1]) ** 2).sum(-1).mean()
    else:
        terms["temp_h"] = vt.new_zeros(())
    return terms


def loss_stage1_hand(rig: HandRig, hand_states, cam: Camera, obs_joints_2d,
                     obs_wrist_depth, prior_states, weights: LossWeights,
                     ema: EmaBank = None) -> LossReport:
    """Isolated hand objective at the given states, with gradient."""
    T = len(hand_states)
    obs_joints, obs_depth = _check_observations(obs_joints_2d,
                                                obs_wrist_depth, T)
    from .geometry import make_box
    dummy = ObjectTrack(make_box((0.02, 0.02, 0.02)), 1.0,
                        [Pose6D.identity()] * T)
    problem = FitProblem(rig, dummy, hand_states)
    ema = ema if ema is not None else EmaBank(decay=weights.ema_decay)
    vt = torch.tensor(problem.pack(), requires_grad=True)
    total, report = _hand_report(problem, vt, cam, obs_joints, obs_depth,
                                 prior_states, weights, ema)
    total.backward()
    report.grad = vt.grad.numpy().copy()
    return report


def _hand_report(problem, vt, cam, obs_joints, obs_depth, prior_states,
                 weights, ema):
    terms = _stage1_hand_terms(problem, vt, cam, obs_joints, obs_depth,
                               prior_states)
    j2d_n = ema.normalize("joints_2d", terms["joints_2d"])
    weighted = {
        "joints_2d": weights.joints_2d * j2d_n,
        "depth": weights.depth * terms["depth"],
        "anat": weights.anat * terms["anat"],
        "prior": weights.prior * terms["prior"],
        "temp_h": weights.temp_h * terms["temp_h"],
    }
    total = sum(weighted.values())
    report = LossReport(
        raw={k: _scalar(v) for k, v in terms.items()},
        weighted={k: _scalar(v) for k, v in weighted.items()},
        total=_scalar(total),
        normalizers={"joints_2d": ema.states["joints_2d"].corrected})
    return total, report


# ---------------------------------------------------------------------------
# joint contact-aware loss
# ---------------------------------------------------------------------------


@dataclass
class Stage3Refs:
    """Frozen reference trajectories the joint stage is anchored to."""

    input_hand: list          # rectified hand states (pose + wrist anchors)
    iso_track: ObjectTrack    # isolated fit, anchors non-interaction frames
    rect_track: ObjectTrack   # rectified fit, anchors interaction frames
    obs_joints_2d: np.ndarray
    interaction_frames: tuple

    def __post_init__(self):
        self.obs_joints_2d = np.asarray(self.obs_joints_2d, dtype=float)
        self.interaction_frames = tuple(int(f) for f in self.interaction_frames)


def _stage3_terms(problem: FitProblem, vt, cam, amodal_masks,
                  cache: ContactCache, refs: Stage3Refs, weights) -> tuple:
    lay = problem.layout
    T = lay.n_frames
    ev = problem.torch_eval(vt)
    faces = problem.track.mesh.faces
    terms = {}
    skipped = []

    # soft contact correspondence
    num = vt.new_zeros(())
    csum = 0.0
    for (t, vid), pair in cache.pairs.items():
        if pair.confidence == 0.0:
            continue
        a_canon = torch.tensor(
            np.stack([a.position(problem.track.mesh) for a in pair.anchors])
            * problem.track.scale)
        a_world = a_canon @ ev["obj_R"][t].T + ev["obj_t"][t]
        d2 = ((ev["hand_verts"][t, vid] - a_world) ** 2).sum(-1)
        num = num + pair.confidence * (torch.tensor(pair.omegas) * d2).sum()
        csum += pair.confidence
    if csum > 0.0:
        terms["contact"] = num / csum
    else:
        terms["contact"] = vt.new_zeros(())
        skipped.append("contact")

    # clipped penetration beyond the dead zone, nearest object vertex + normal
    pen = vt.new_zeros(())
    obj_v = ev["obj_verts"]
    for t in range(T):
        nn = cKDTree(obj_v[t].detach().numpy()).query(
            ev["hand_verts"][t].detach().numpy())[1]
        depth = ((obj_v[t][nn] - ev["hand_verts"][t])
                 * ev["obj_normals"][t][nn]).sum(-1)
        pen = pen + torch.clamp(torch.clamp(depth - PEN_DEAD_ZONE, min=0.0),
                                max=PEN_CLIP).sum()
    terms["pen"] = pen / (T * ev["hand_verts"].shape[1])

    sil = vt.new_zeros(())
    for t in range(T):
        target = torch.tensor(np.asarray(amodal_masks[t], dtype=float))
        soft = soft_silhouette(cam, obj_v[t], faces, gamma=1.0)
        sil = sil + ((soft - target) ** 2).mean()
    terms["sil"] = sil / T

    # anchors to the observations and the per-stage reference trajectories
    uv, _ = project_torch(cam, ev["joints"].reshape(-1, 3))
    obs = torch.tensor(refs.obs_joints_2d.reshape(-1, 2))
    terms["anchor_2d"] = ((uv - obs) ** 2).sum(-1).mean()
    terms["anchor_anat"] = anatomy_penalty_torch(problem.rig, ev["theta"]).mean()

    theta_ref = torch.tensor(np.stack([s.theta for s in refs.input_hand]))
    terms["anchor_hand_pose"] = ((_rot6d(torchutil.axis_angle_to_matrix(ev["theta"]))
                                  - _rot6d(torchutil.axis_angle_to_matrix(theta_ref)))
                                 ** 2).sum(-1).mean()

    inter = set(refs.interaction_frames)
    q = _retracted_quats(problem._tq_obj, vt[lay.obj_rot].reshape(T, 3))
    iso = vt.new_zeros(())
    rect = vt.new_zeros(())
    n_iso = n_rect = 0
    for t in range(T):
        ref_track = refs.rect_track if t in inter else refs.iso_track
        ref_pose = ref_track.poses[t]
        qt = torch.tensor(ref_pose.q)
        dev = _geodesic_sq(q[t], qt) + ((ev["obj_t"][t]
                                         - torch.tensor(ref_pose.t)) ** 2).sum()
        if t in inter:
            rect = rect + dev
            n_rect += 1
        else:
            iso = iso + dev
            n_iso += 1
    terms["anchor_obj_iso"] = iso / max(n_iso, 1)
    terms["anchor_obj_rect"] = rect / max(n_rect, 1)

    # the eight temporal terms, rotations differenced in the 6D representation
    pose6 = _rot6d(torchutil.axis_angle_to_matrix(ev["theta"]))  # (T,15,6)
    obj6 = _rot6d(ev["obj_R"])
    root6 = _rot6d(ev["wrist_R"])
    wt = ev["wrist_t"]
    wrist_ref = torch.tensor(np.stack([s.wrist_trans for s in refs.input_hand]))
    terms["t_wrist_anchor"] = ((wt - wrist_ref) ** 2).sum(-1).mean()
    zero = vt.new_zeros(())

    def vel(x):
        return ((x[1:] - x[:-1]) ** 2).sum(-1).mean() if T > 1 else zero

    def acc(x):
        return ((x[2:] - 2 * x[1:-1] + x[:-2]) ** 2).sum(-1).mean() if T > 2 else zero

    obj_motion6 = torch.cat([obj6, ev["obj_t"]], dim=-1)
    terms["t_pose_vel"] = vel(pose6)
    terms["t_obj_vel"] = vel(obj_motion6)
    terms["t_trans_vel"] = vel(wt)
    terms["t_root_vel"] = vel(root6)
    terms["t_pose_acc"] = acc(pose6)
    terms["t_trans_acc"] = acc(wt)
    terms["t_root_acc"] = acc(root6)
    return terms, skipped


_STAGE3_WEIGHT_KEYS = (
    "contact", "pen", "sil", "anchor_2d", "anchor_anat", "anchor_hand_pose",
    "anchor_obj_iso", "anchor_obj_rect", "t_pose_vel", "t_obj_vel",
    "t_wrist_anchor", "t_trans_vel", "t_root_vel", "t_pose_acc",
    "t_trans_acc", "t_root_acc")


def loss_stage3(rig: HandRig, hand_states, track: ObjectTrack, cam: Camera,
                amodal_masks, cache: ContactCache, refs: Stage3Refs,
                weights: LossWeights) -> LossReport:
    """Joint contact-aware objective at the given states, with gradient."""
    _check_masks(amodal_masks, len(track.poses))
    problem = FitProblem(rig, track, hand_states)
    vt = torch.tensor(problem.pack(), requires_grad=True)
    total, report = _stage3_report(problem, vt, cam, amodal_masks, cache,
                                   refs, weights)
    total.backward()
    report.grad = vt.grad.numpy().copy()
    return report


def _stage3_report(problem, vt, cam, amodal_masks, cache, refs, weights):
    terms, skipped = _stage3_terms(problem, vt, cam, amodal_masks, cache,
                                   refs, weights)
    weighted = {k: getattr(weights, k) * terms[k] for k in _STAGE3_WEIGHT_KEYS}
    total = sum(weighted.values())
    report = LossReport(
        raw={k: _scalar(v) for k, v in terms.items()},
        weighted={k: _scalar(v) for k, v in weighted.items()},
        total=_scalar(total), skipped=tuple(skipped))
    return total, report


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def run_stage1(rig: HandRig, hand_states, track: ObjectTrack, cam: Camera,
               amodal_masks, phase_labels, obs_joints_2d, obs_wrist_depth,
               weights: LossWeights = None, iters: int = 400, block: int = 50,
               lr_object: float = 1e-3, lr_hand: float = 1e-3, seed: int = 0,
               interaction_frames=None):
    """Isolated fitting: alternating object/hand Adam blocks, then the
    ray-depth scale alignment.  Returns (hand_states, track, history, diag).
    """
    weights = weights or LossWeights()
    T = len(track.poses)
    _check_masks(amodal_masks, T)
    obs_joints, obs_depth = _check_observations(obs_joints_2d,
                                                obs_wrist_depth, T)
    prior_states = list(hand_states)
    ema = EmaBank(decay=weights.ema_decay)
    rng = np.random.default_rng(seed)
    history = []

    obj_problem = FitProblem(rig, track, hand_states)
    v_obj = obj_problem.pack()
    st_obj = None
    hand_problem = obj_problem
    v_hand = v_obj.copy()
    st_hand = None
    obj_mask = obj_problem.layout.object_slots
    hand_mask = obj_problem.layout.hand_slots

    it = 0
    while it < iters:
        optimize_object = ((it // block) % 2) == 0
        for _ in range(min(block, iters - it)):
            if optimize_object:
                vt = torch.tensor(v_obj, requires_grad=True)
                total, report = _object_report(obj_problem, vt, cam,
                                               amodal_masks, phase_labels,
                                               weights, ema, rng)
                total.backward()
                grad = vt.grad.numpy()
                grad[hand_mask] = 0.0
                v_obj, st_obj = adam_step(v_obj, grad, st_obj, lr_object)
            else:
                vt = torch.tensor(v_hand, requires_grad=True)
                total, report = _hand_report(hand_problem, vt, cam, obs_joints,
                                             obs_depth, prior_states, weights,
                                             ema)
                total.backward()
                grad = vt.grad.numpy()
                grad[obj_mask] = 0.0
                v_hand, st_hand = adam_step(v_hand, grad, st_hand, lr_hand)
            history.append((it, report))
            it += 1

    track, _ = obj_problem.unpack(v_obj)
    _, hand_states = hand_problem.unpack(v_hand)
    if interaction_frames is None:
        interaction_frames = phase_labels.interaction_frames
    if len(interaction_frames):
        track, diag = align_ray_scale(hand_states, track, cam,
                                      interaction_frames, rig=rig)
    else:
        diag = {"delta": 0.0}
    return hand_states, track, history, diag


def run_stage3(rig: HandRig, hand_states, track: ObjectTrack, cam: Camera,
               amodal_masks, refs: Stage3Refs, weights: LossWeights = None,
               iters: int = 800, rebuild_every: int = 50,
               lr_object: float = 3e-4, lr_finger: float = 5e-4,
               lr_wrist: float = 5e-5, cache_seed: int = 0):
    """Joint contact-aware optimization with periodic cache rebuilds.

    Returns (hand_states, track, history, final cache).
    """
    weights = weights or LossWeights()
    _check_masks(amodal_masks, len(track.poses))
    problem = FitProblem(rig, track, hand_states)
    v = problem.pack()
    lr = problem.layout.lr_vector(lr_object, lr_finger, lr_wrist)
    state = None
    history = []
    cache = ContactCache()
    cur_track, cur_states = track, list(hand_states)

    for it in range(iters):
        if it % rebuild_every == 0:
            cur_track, cur_states = problem.unpack(v)
            cache = rebuild_cache(rig, cur_states, cur_track,
                                  refs.interaction_frames, previous=cache,
                                  seed=cache_seed)
        vt = torch.tensor(v, requires_grad=True)
        total, report = _stage3_report(problem, vt, cam, amodal_masks, cache,
                                       refs, weights)
        total.backward()
        v, state = adam_step(v, vt.grad.numpy(), state, lr)
        history.append((it, report))

    cur_track, cur_states = problem.unpack(v)
    return cur_states, cur_track, history, cache
