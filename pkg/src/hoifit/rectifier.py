"""Generative ray-depth rectification: synthetic grasp pairs, a conditional
flow-matching model over a scalar camera-ray offset, training, and sampling.

The model learns to predict the velocity that carries a hand placed at a
noisy depth along the viewing ray back to a contact-consistent depth, given
the hand joints, ray, object scale, and a pooled encoding of the object
surface.  At inference the current placement defines the origin of the
offset axis (z_init = 0), so the integrated offset is directly a correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from . import hand as hand_mod
from . import torchutil
from .errors import ModelUntrained, NonFiniteLoss
from .geometry import (TriMesh, make_box, make_cylinder, make_icosphere,
                       matrix_to_quat, sample_surface, signed_distance,
                       signed_distances)
from .optim import AdamState, adam_step

N_SURFACE = 512
SIGMA_RAY = 0.03  # m, ray-depth noise
SIGMA_PLANE = 0.005  # m, in-plane jitter
SIGMA_JOINT = 0.05  # rad, joint jitter
GRASP_RETRIES = 50


@dataclass(frozen=True)
class GraspCondition:
    """Conditioning tuple: joints (21,3) in the object-centered frame (meters),
    unit ray, metric scale (object unit-sphere normalization folded in),
    surface points on the unit sphere-normalized object, and unit normals."""

    hand_joints: np.ndarray
    ray: np.ndarray
    scale: float
    surface: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hand_joints", np.asarray(self.hand_joints, float).reshape(21, 3))
        object.__setattr__(self, "ray", np.asarray(self.ray, float).reshape(3))
        object.__setattr__(self, "surface", np.asarray(self.surface, float))
        object.__setattr__(self, "normals", np.asarray(self.normals, float))
        if abs(np.linalg.norm(self.ray) - 1.0) > 1e-9:
            raise ValueError("ray must be unit length")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.surface.shape != self.normals.shape or self.surface.ndim != 2:
            raise ValueError("surface/normals shape mismatch")

    def to_dict(self) -> dict:
        return {"hand_joints": self.hand_joints.tolist(), "ray": self.ray.tolist(),
                "scale": self.scale, "surface": self.surface.tolist(),
                "normals": self.normals.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "GraspCondition":
        return GraspCondition(np.array(d["hand_joints"]), np.array(d["ray"]),
                              d["scale"], np.array(d["surface"]), np.array(d["normals"]))


@dataclass(frozen=True)
class FlowState:
    z: float
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau outside [0, 1]")


@dataclass
class GraspPair:
    condition: GraspCondition  # built from the noisy source hand
    z0: float  # source offset along the ray
    z1: float  # target offset along the ray
    source: hand_mod.HandState
    target: hand_mod.HandState
    object_ref: str = ""

    def to_json(self) -> str:
        return json.dumps({"condition": self.condition.to_dict(), "z0": self.z0,
                           "z1": self.z1, "source": self.source.to_dict(),
                           "target": self.target.to_dict(), "object_ref": self.object_ref})

    @staticmethod
    def from_json(text: str) -> "GraspPair":
        d = json.loads(text)
        return GraspPair(GraspCondition.from_dict(d["condition"]), d["z0"], d["z1"],
                         hand_mod.HandState.from_dict(d["source"]),
                         hand_mod.HandState.from_dict(d["target"]), d["object_ref"])


def save_pairs(pairs, path):
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")


def load_pairs(path):
    with open(path) as fh:
        return [GraspPair.from_json(line) for line in fh if line.strip()]


def farthest_point_downsample(points: np.ndarray, n: int) -> np.ndarray:
    """Deterministic greedy FPS starting from index 0; returns indices."""
    if len(points) <= n:
        return np.arange(len(points))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    d = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


def build_condition(joints_obj: np.ndarray, ray_obj: np.ndarray, mesh: TriMesh,
                    scale: float, seed: int = 0) -> GraspCondition:
    """Build a conditioning tuple in the object-centered frame.

    The canonical surface is unit-sphere normalized (centroid to origin,
    max radius to 1) and the normalization radius is folded into the scale.
    """
    samples = sample_surface(mesh, 4 * N_SURFACE, seed=seed)
    idx = farthest_point_downsample(samples.points, N_SURFACE)
    pts = samples.points[idx]
    normals = samples.normals[idx]
    center = mesh.centroid()
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    return GraspCondition((joints_obj - center) / 1.0, ray_obj,
                          scale * radius, (pts - center) / radius, normals)


# ---------------------------------------------------------------------------
# velocity model
# ---------------------------------------------------------------------------


class VelocityModel(torch.nn.Module):
    """Pooled-point-feature conditional velocity field v(z, tau | condition)."""

    TAU_DIM = 16

    def __init__(self, seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.point_mlp = torch.nn.Sequential(
            torch.nn.Linear(6, 64), torch.nn.SiLU(), torch.nn.Linear(64, 64))
        self.geom_head = torch.nn.Linear(64, 128)
        in_dim = 128 + 63 + 3 + 1 + 1 + self.TAU_DIM
        self.trunk = torch.nn.Sequential(
            torch.nn.Linear(in_dim, 256), torch.nn.SiLU(),
            torch.nn.Linear(256, 256), torch.nn.SiLU(),
            torch.nn.Linear(256, 256), torch.nn.SiLU(),
            torch.nn.Linear(256, 1))
        for mod in self.modules():
            if isinstance(mod, torch.nn.Linear):
                torch.nn.init.xavier_uniform_(mod.weight, generator=gen)
                torch.nn.init.zeros_(mod.bias)
        self.to(dtype)
        self._dtype = dtype
        self.trained = False

    def forward(self, z: torch.Tensor, tau: torch.Tensor, joints: torch.Tensor,
                ray: torch.Tensor, scale: torch.Tensor, surface: torch.Tensor,
                normals: torch.Tensor) -> torch.Tensor:
        """Batched: z (B,), tau (B,), joints (B,21,3), ray (B,3), scale (B,),
        surface/normals (B,N,3) -> velocity (B,)."""
        feat = self.point_mlp(torch.cat([surface, normals], dim=-1))  # (B,N,64)
        geom = self.geom_head(feat.max(dim=1).values)  # (B,128)
        emb = torchutil.sinusoidal_embedding(tau, self.TAU_DIM)
        x = torch.cat([geom, joints.reshape(len(z), -1), ray,
                       scale[:, None], z[:, None], emb], dim=-1)
        return self.trunk(x).squeeze(-1)

    # -- flat-weight plumbing (shared Adam + serialization) -----------------

    def weights_vector(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for p in self.parameters()])

    def load_vector(self, v: np.ndarray):
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.tensor(v[i:i + n].reshape(p.shape), dtype=p.dtype))
                i += n
        assert i == len(v)

    def grad_vector(self) -> np.ndarray:
        out = []
        for p in self.parameters():
            out.append((p.grad if p.grad is not None else torch.zeros_like(p))
                       .detach().numpy().ravel())
        return np.concatenate(out)

    def save(self, base_path):
        base_path = str(base_path)
        w = self.weights_vector().astype(np.float32)
        with open(base_path + ".raw", "wb") as fh:
            fh.write(w.tobytes())
        with open(base_path + ".json", "w") as fh:
            json.dump({"seed": self.seed, "n_weights": len(w),
                       "n_surface": N_SURFACE, "tau_dim": self.TAU_DIM,
                       "shapes": [list(p.shape) for p in self.parameters()],
                       "trained": self.trained}, fh)

    @staticmethod
    def load(base_path, dtype=torch.float32) -> "VelocityModel":
        base_path = str(base_path)
        with open(base_path + ".json") as fh:
            hdr = json.load(fh)
        model = VelocityModel(seed=hdr["seed"], dtype=dtype)
        w = np.fromfile(base_path + ".raw", dtype=np.float32)
        model.load_vector(w.astype(np.float64) if dtype == torch.float64 else w)
        model.trained = hdr["trained"]
        return model


def _stack_conditions(pairs, dtype):
    joints = torch.tensor(np.stack([p.condition.hand_joints for p in pairs]), dtype=dtype)
    ray = torch.tensor(np.stack([p.condition.ray for p in pairs]), dtype=dtype)
    scale = torch.tensor(np.array([p.condition.scale for p in pairs]), dtype=dtype)
    surface = torch.tensor(np.stack([p.condition.surface for p in pairs]), dtype=dtype)
    normals = torch.tensor(np.stack([p.condition.normals for p in pairs]), dtype=dtype)
    return joints, ray, scale, surface, normals


def flow_matching_loss(model: VelocityModel, pairs, tau: np.ndarray) -> torch.Tensor:
    """Conditional flow-matching objective on the linear path z_tau."""
    dtype = model._dtype
    z0 = np.array([p.z0 for p in pairs])
    z1 = np.array([p.z1 for p in pairs])
    z_tau = torch.tensor((1 - tau) * z0 + tau * z1, dtype=dtype)
    target = torch.tensor(z1 - z0, dtype=dtype)
    v = model(z_tau, torch.tensor(tau, dtype=dtype), *_stack_conditions(pairs, dtype))
    return ((v - target) ** 2).mean()


def train_flow(model: VelocityModel, pairs, epochs: int = 50, lr: float = 1e-3,
               seed: int = 0, batch_size: int = 64):
    """Train with the shared from-scratch Adam; returns (model, loss curve)."""
    if not pairs:
        raise ValueError("need at least one training pair")
    rng = np.random.default_rng(seed)
    params = model.weights_vector().astype(np.float64)
    state = AdamState.zeros_like(params)
    curve = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start:start + batch_size]]
            tau = rng.uniform(0.0, 1.0, size=len(batch))
            model.load_vector(params)
            model.zero_grad()
            loss = flow_matching_loss(model, batch, tau)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step)
            loss.backward()
            params, state = adam_step(params, model.grad_vector().astype(np.float64),
                                      state, lr)
            epoch_losses.append(float(loss.detach()))
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    model.load_vector(params)
    model.trained = True
    return model, curve


def sample_offset(model: VelocityModel, cond: GraspCondition, z_init: float = 0.0,
                  steps: int = 20) -> float:
    """Explicit Euler integration of dz/dtau from tau=0 to 1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dtype = model._dtype
    args = _stack_conditions([GraspPair(cond, 0.0, 0.0, None, None)], dtype)
    z = float(z_init)
    h = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            tau = torch.tensor([k * h], dtype=dtype)
            v = model(torch.tensor([z], dtype=dtype), tau, *args)
            z += h * float(v[0])
    return z


# ---------------------------------------------------------------------------
# frame rectification
# ---------------------------------------------------------------------------


def rectify_frames(model: VelocityModel, hand_states, track, cam,
                   interaction_frames, rig=None, steps: int = 20,
                   ramp: int = 5):
    """Apply the rectified ray-depth offset to interaction-frame wrists.

    Each interaction frame gets its own sampled offset along the world ray
    from the camera center through the wrist; frames outside the interaction
    range receive the boundary offset faded linearly over ``ramp`` frames.
    Returns (new hand_states list, offsets dict frame->meters).
    """
    if not model.trained:
        raise ModelUntrained("velocity model has not been trained")
    rig = rig or hand_mod.default_rig()
    frames = sorted(set(int(f) for f in interaction_frames))
    T = len(hand_states)
    origin = cam.center_world()

    shifts = {}
    offsets = {}
    for f in frames:
        st = hand_states[f]
        pose = track.poses[f]
        joints = hand_mod.fk_joints(rig, st)
        ray_w = st.wrist_trans - origin
        ray_w = ray_w / np.linalg.norm(ray_w)
        inv = pose.inverse()
        joints_obj = inv.apply(joints)
        ray_obj = inv.R @ ray_w
        cond = build_condition(joints_obj, ray_obj, track.mesh, track.scale,
                               seed=model.seed)
        off = sample_offset(model, cond, z_init=0.0, steps=steps)
        offsets[f] = off
        shifts[f] = off * ray_w

    out = list(hand_states)
    for f in frames:
        out[f] = out[f].replace(wrist_trans=out[f].wrist_trans + shifts[f])
    first, last = frames[0], frames[-1]
    for k in range(1, ramp + 1):
        w = 1.0 - k / (ramp + 1)
        for f, shift in ((first - k, shifts[first]), (last + k, shifts[last])):
            if 0 <= f < T and f not in frames:
                out[f] = out[f].replace(wrist_trans=out[f].wrist_trans + w * shift)
    return out, offsets


# ---------------------------------------------------------------------------
# synthetic grasp-pair generation
# ---------------------------------------------------------------------------


def _random_primitive(rng) -> tuple[TriMesh, str]:
    kind = rng.choice(["sphere", "box", "cylinder"])
    if kind == "sphere":
        r = rng.uniform(0.02, 0.06)
        return make_icosphere(r, 1), f"sphere_r{r:.3f}"
    if kind == "box":
        e = rng.uniform(0.04, 0.12, size=3)
        return make_box(tuple(e)), "box_" + "x".join(f"{x:.3f}" for x in e)
    r = rng.uniform(0.02, 0.06)
    h = rng.uniform(0.04, 0.12)
    return make_cylinder(r, h, 12), f"cyl_r{r:.3f}_h{h:.3f}"


def _surface_hit(mesh: TriMesh, direction: np.ndarray) -> float:
    """Distance from the centroid to the surface along ``direction`` (unit);
    vectorized Moller-Trumbore over all faces, furthest hit."""
    o = mesh.centroid()
    d = direction / np.linalg.norm(direction)
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("fi,fi->f", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - tri[:, 0]
    u = np.einsum("fi,fi->f", s, p) * inv
    qv = np.cross(s, e1)
    v = np.einsum("i,fi->f", d, qv) * inv
    t = np.einsum("fi,fi->f", e2, qv) * inv
    hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > 0)
    if not hit.any():
        return float(np.linalg.norm(mesh.vertices - o, axis=1).max())
    return float(t[hit].max())


def _vertex_finger(rig) -> np.ndarray:
    """Dominant-joint finger index per template vertex (-1 = palm/wrist)."""
    jid = rig.skin_idx[np.arange(len(rig.skin_idx)), rig.skin_w.argmax(axis=1)]
    return np.where(jid == 0, -1, (jid - 1) // 3)


def _wrap_grasp(rig, mesh: TriMesh, approach: np.ndarray, rng) -> hand_mod.HandState:
    """Procedural wrap grasp: palm planted near the surface facing
    ``approach``, fingers closed until fingertip contact (vectorized
    bisection), then relaxed finger-by-finger until nothing penetrates more
    than 2 mm."""
    d = approach / np.linalg.norm(approach)
    # wrist frame: hand palm normal (-z) maps onto d
    up = np.array([0.0, 0.0, 1.0])
    if abs(d @ up) > 0.9:
        up = np.array([1.0, 0.0, 0.0])
    fingers_dir = np.cross(d, up)
    fingers_dir /= np.linalg.norm(fingers_dir)
    side = np.cross(fingers_dir, -d)  # completes a right-handed frame
    R = np.stack([side, fingers_dir, -d], axis=1)  # hand x,y,z -> world columns
    q = matrix_to_quat(R)

    hit = _surface_hit(mesh, -d)
    palm_center_local = np.array([0.0, 0.05, -0.0145])  # palm surface point
    wrist = mesh.centroid() + (hit + 0.002) * (-d) - R @ palm_center_local

    curl_scale = np.array([1.0, 0.8, 0.6])  # mcp, pip, dip
    finger_rows = np.array([[int(rig.tip_parent[f]) - 1 - k for k in (2, 1, 0)]
                            for f in range(5)])  # theta rows per finger

    def theta_of(alphas):
        th = np.zeros((15, 3))
        for f in range(5):
            for r_i, cs in zip(finger_rows[f], curl_scale):
                th[r_i] = rig.axes[r_i, 2] * alphas[f] * cs
        return th

    def tip_depths(alphas):
        joints = hand_mod.fk_joints(rig, hand_mod.HandState(theta_of(alphas), q, wrist))
        return signed_distances(mesh, joints[16:21]) + 0.008  # tip capsule radius

    # sweep all five fingers closed at once (chains are independent),
    # freezing each at its first surface contact; tip depth is not monotone
    # in the curl (tips overshoot past small objects), so stop at the first
    # crossing rather than bisecting the full range
    step = 0.06
    alphas = np.zeros(5)
    closing = tip_depths(alphas) < 0.0
    while closing.any() and alphas.max() < 1.8 - 1e-9:
        trial = np.where(closing, np.minimum(alphas + step, 1.8), alphas)
        depth = tip_depths(trial)
        contacted = closing & (depth >= 0.0)
        alphas = np.where(closing & ~contacted, trial, alphas)
        # refine contacted fingers inside their last step
        for f in np.nonzero(contacted)[0]:
            lo_f, hi_f = alphas[f], trial[f]
            for _ in range(8):
                mid = 0.5 * (lo_f + hi_f)
                probe = alphas.copy()
                probe[f] = mid
                if tip_depths(probe)[f] < 0.0:
                    lo_f = mid
                else:
                    hi_f = mid
            alphas[f] = 0.5 * (lo_f + hi_f)
        closing &= ~contacted
        closing &= alphas < 1.8 - 1e-9

    # relax: open penetrating fingers, back the palm off if it penetrates
    vf_all = _vertex_finger(rig)
    cand = rig.candidate_vertices
    vf = vf_all[cand]
    for _ in range(12):
        state = hand_mod.HandState(theta_of(alphas), q, wrist)
        posed, _, _ = hand_mod.forward_kinematics(rig, state)
        sd = signed_distances(mesh, posed.vertices[cand])
        if sd.max() <= 0.0015:
            break
        palm_pen = sd[vf < 0].max() if (vf < 0).any() else -np.inf
        if palm_pen > 0.0015:
            wrist = wrist - (palm_pen + 0.001) * d
        for f in range(5):
            sel = vf == f
            if sel.any() and sd[sel].max() > 0.0015:
                alphas[f] = max(0.0, alphas[f] - 0.08)
    return hand_mod.HandState(theta_of(alphas), q, wrist)


def _contact_valid(rig, mesh: TriMesh, state: hand_mod.HandState,
                   near: float = 0.005, deep: float = 0.002) -> bool:
    posed, _, _ = hand_mod.forward_kinematics(rig, state)
    cand = posed.vertices[rig.candidate_vertices]
    sd = signed_distances(mesh, cand)
    touching = np.count_nonzero(np.abs(sd) <= near)
    return touching >= 3 and not np.any(sd > deep)


def _clip_to_limits(rig, theta: np.ndarray) -> np.ndarray:
    lm = rig.limits
    c = np.einsum("jkd,jd->jk", rig.axes, theta)
    c[:, 0] = np.clip(c[:, 0], -lm.twist, lm.twist)
    c[:, 1] = np.clip(c[:, 1], -lm.splay, lm.splay)
    c[:, 2] = np.clip(c[:, 2], lm.bend_lo, lm.bend_hi)
    return np.einsum("jk,jkd->jd", c, rig.axes)


def generate_pairs(n_pairs: int, seed: int = 0, rig=None, objects=None,
                   condition_samples: int = N_SURFACE):
    """Procedurally generate contact-valid grasp pairs; deterministic in seed.

    Returns (pairs, skipped_count).  Each rejected candidate is retried up to
    50 times before the object sample is skipped and counted.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    rig = rig or hand_mod.default_rig()
    pairs = []
    skipped = 0
    while len(pairs) < n_pairs:
        for attempt in range(GRASP_RETRIES + 1):
            if attempt == GRASP_RETRIES:
                skipped += 1
                break
            if objects is None:
                mesh, ref = _random_primitive(rng)
            else:
                mesh, ref = objects[rng.integers(len(objects))]
            ray = rng.normal(size=3)
            ray /= np.linalg.norm(ray)
            try:
                target = _wrap_grasp(rig, mesh, -ray, rng)
            except Exception:
                continue
            if not _contact_valid(rig, mesh, target):
                continue

            eps_ray = rng.normal(scale=SIGMA_RAY)
            plane = rng.normal(scale=SIGMA_PLANE, size=3)
            plane -= (plane @ ray) * ray
            theta = _clip_to_limits(rig, target.theta
                                    + rng.normal(scale=SIGMA_JOINT, size=(15, 3)))
            source = hand_mod.HandState(theta, target.wrist_rot,
                                        target.wrist_trans + eps_ray * ray + plane)
            joints = hand_mod.fk_joints(rig, source)
            cond = build_condition(joints, ray, mesh, 1.0, seed=seed)
            # offsets measured from the source placement: z0 = 0, z1 = -eps_ray
            pairs.append(GraspPair(cond, 0.0, -eps_ray, source, target, ref))
            break
        else:  # pragma: no cover
            continue
    return pairs, skipped
