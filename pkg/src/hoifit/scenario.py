"""Synthetic grasp-lift-place scenarios with a noisy observation channel.

A scenario script describes one manipulation clip: a primitive object, five
canonical phases with per-phase durations, a grasp approach direction, and
the lift/place displacements.  Generation produces

* ground truth: hand states, object track, per-frame phase labels;
* renders: amodal object masks (object alone), modal masks (object minus
  hand-occluded pixels), joint hand+object masks, and object depth maps;
* observations: noisy 2D joints, noisy wrist depth, noisy initial object
  poses (a shared ray-depth bias plus per-frame jitter) and noisy initial
  hand states whose wrist carries its own ray-depth bias -- the stand-in
  for a monocular hand regressor, whose depth is systematically wrong.

The observed wrist depth is measured on the *biased* initial hand, so the
depth channel is consistent with the initial states and the ray-depth error
survives isolated fitting; recovering it is the rectifier's job.

Everything is a pure function of (script, seed): the same pair twice writes
a byte-identical directory, and an all-zero noise spec reproduces ground
truth exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidScript
from .geometry import (Pose6D, TriMesh, axis_angle_to_quat, load_obj,
                       make_box, make_cylinder, make_icosphere, quat_mul,
                       save_obj)
from .hand import HandRig, HandState, default_rig, fk_sequence
from .rectifier import _wrap_grasp
from .render import (Camera, SilhouetteGrid, load_pgm, render_depth_faces,
                     save_pgm)
from .tracking import PHASES, ObjectTrack, PhaseLabels

DEPTH_UNIT = 1e-4       # meters per depth-PGM count (0.1 mm)
APPROACH_RETREAT = 0.12  # m the hand travels during approach/release


# ---------------------------------------------------------------------------
# script
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise levels; all zero reproduces ground truth."""

    joints_px: float = 2.0       # 2D joint Gaussian sigma (pixels)
    wrist_depth: float = 0.005   # wrist depth Gaussian sigma (m)
    ray_bias: float = 0.03       # uniform +-bound of the ray-depth bias (m)
    rot_jitter_deg: float = 2.0  # per-frame pose jitter
    trans_jitter: float = 0.005
    theta_jitter: float = 0.03   # per-frame joint-angle jitter (rad)

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidScript(f"noise.{f.name}", "must be >= 0")

    @staticmethod
    def zero() -> "NoiseSpec":
        return NoiseSpec(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "NoiseSpec":
        known = {f.name for f in fields(NoiseSpec)}
        for k in d:
            if k not in known:
                raise InvalidScript(f"noise.{k}", "unknown field")
        return NoiseSpec(**d)


_CAMERA_DEFAULTS = {"fx": 60.0, "fy": 60.0, "cx": 16.0, "cy": 16.0,
                    "width": 32, "height": 32, "distance": 0.45}


@dataclass(frozen=True)
class ScenarioScript:
    """Declarative description of one grasp-lift-place clip."""

    object_kind: str = "box"
    object_size: tuple = (0.06, 0.05, 0.06)
    phase_frames: tuple = ((    # canonical order, durations >= 1
        ("pre_static", 4), ("approach", 6), ("interacting", 14),
        ("release", 6), ("post_static", 4)))
    start_pos: tuple = (0.0, 0.04, 0.0)
    lift: tuple = (0.0, -0.05, 0.0)       # image up is -y
    place: tuple = (0.05, 0.0, 0.0)
    approach_dir: tuple = (0.8, -0.4, 0.8)
    camera: tuple = tuple(sorted(_CAMERA_DEFAULTS.items()))
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.object_kind not in ("box", "sphere", "cylinder"):
            raise InvalidScript("object_kind", f"unknown kind {self.object_kind!r}")
        need = {"box": 3, "sphere": 1, "cylinder": 2}[self.object_kind]
        if len(self.object_size) != need:
            raise InvalidScript("object_size",
                                f"{self.object_kind} needs {need} size values")
        if any(s <= 0 for s in self.object_size):
            raise InvalidScript("object_size", "sizes must be positive")
        names = [n for n, _ in self.phase_frames]
        if names != list(PHASES):
            raise InvalidScript("phase_frames",
                                f"phases must be {list(PHASES)} in order, got {names}")
        for name, dur in self.phase_frames:
            if dur < 1:
                raise InvalidScript(f"phase_frames.{name}", "duration must be >= 1")
        if np.linalg.norm(self.approach_dir) < 1e-9:
            raise InvalidScript("approach_dir", "must be nonzero")
        cam = dict(self.camera)
        if set(cam) != set(_CAMERA_DEFAULTS):
            raise InvalidScript("camera",
                                f"fields must be {sorted(_CAMERA_DEFAULTS)}")

    @property
    def n_frames(self) -> int:
        return sum(d for _, d in self.phase_frames)

    def phase_labels(self) -> PhaseLabels:
        labels = []
        for name, dur in self.phase_frames:
            labels += [name] * dur
        return PhaseLabels(labels)

    def make_camera(self) -> Camera:
        c = dict(self.camera)
        return Camera(c["fx"], c["fy"], c["cx"], c["cy"],
                      int(c["width"]), int(c["height"]),
                      Pose6D(np.array([1.0, 0, 0, 0]),
                             np.array([0.0, 0.0, c["distance"]])))

    def make_mesh(self) -> TriMesh:
        if self.object_kind == "box":
            return make_box(tuple(self.object_size))
        if self.object_kind == "sphere":
            return make_icosphere(self.object_size[0], 2)
        return make_cylinder(self.object_size[0], self.object_size[1], 12)

    def to_dict(self) -> dict:
        return {
            "object_kind": self.object_kind,
            "object_size": list(self.object_size),
            "phase_frames": [[n, d] for n, d in self.phase_frames],
            "start_pos": list(self.start_pos),
            "lift": list(self.lift),
            "place": list(self.place),
            "approach_dir": list(self.approach_dir),
            "camera": dict(self.camera),
            "noise": self.noise.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ScenarioScript":
        known = {f.name for f in fields(ScenarioScript)}
        for k in d:
            if k not in known:
                raise InvalidScript(k, "unknown field")
        kw = dict(d)
        if "noise" in kw:
            kw["noise"] = NoiseSpec.from_dict(kw["noise"])
        for name in ("object_size", "start_pos", "lift", "place", "approach_dir"):
            if name in kw:
                kw[name] = tuple(kw[name])
        if "phase_frames" in kw:
            kw["phase_frames"] = tuple((n, int(x)) for n, x in kw["phase_frames"])
        if "camera" in kw:
            kw["camera"] = tuple(sorted(kw["camera"].items()))
        return ScenarioScript(**kw)


# ---------------------------------------------------------------------------
# ground-truth motion
# ---------------------------------------------------------------------------


def _smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def _carry_offset(u: float, lift: np.ndarray, place: np.ndarray) -> np.ndarray:
    """Object displacement at progress u in [0, 1]: lift, carry, set down."""
    if u < 0.3:
        return _smoothstep(u / 0.3) * lift
    if u < 0.7:
        return lift + _smoothstep((u - 0.3) / 0.4) * place
    return place + (1.0 - _smoothstep((u - 0.7) / 0.3)) * lift


def _ground_truth(script: ScenarioScript, rig: HandRig, rng):
    mesh = script.make_mesh()
    p0 = np.asarray(script.start_pos, dtype=float)
    lift = np.asarray(script.lift, dtype=float)
    place = np.asarray(script.place, dtype=float)
    d = np.asarray(script.approach_dir, dtype=float)
    d = d / np.linalg.norm(d)

    pose0 = Pose6D(np.array([1.0, 0, 0, 0]), p0)
    grasp = _wrap_grasp(rig, mesh.transformed(pose0), d, rng)
    open_theta = np.zeros((15, 3))
    start_wrist = grasp.wrist_trans - APPROACH_RETREAT * d

    labels = script.phase_labels()
    runs = {name: (a, b) for name, a, b in labels.runs()}
    poses, states = [], []
    for f in range(script.n_frames):
        lab = labels.labels[f]
        a, b = runs[lab]
        u = 0.0 if b == a else (f - a) / (b - a)
        if lab == "pre_static":
            off = np.zeros(3)
            st = HandState(open_theta, grasp.wrist_rot, start_wrist)
        elif lab == "approach":
            off = np.zeros(3)
            s = _smoothstep(u)
            st = HandState(s * grasp.theta, grasp.wrist_rot,
                           (1 - s) * start_wrist + s * grasp.wrist_trans)
        elif lab == "interacting":
            off = _carry_offset(u, lift, place)
            st = grasp.replace(wrist_trans=grasp.wrist_trans + off)
        elif lab == "release":
            off = place
            s = _smoothstep(u)
            st = HandState((1 - s) * grasp.theta, grasp.wrist_rot,
                           grasp.wrist_trans + place + s * APPROACH_RETREAT * -d)
        else:  # post_static
            off = place
            st = HandState(open_theta, grasp.wrist_rot,
                           grasp.wrist_trans + place - APPROACH_RETREAT * d)
        poses.append(Pose6D(pose0.q, p0 + off))
        states.append(st)
    track = ObjectTrack(mesh, 1.0, poses, mesh_ref="object.obj")
    return track, states, labels


# ---------------------------------------------------------------------------
# depth-map I/O (16-bit PGM, 0.1 mm per count, 0 = uncovered)
# ---------------------------------------------------------------------------


def save_depth_pgm(depth: np.ndarray, path):
    counts = np.where(np.isfinite(depth),
                      np.clip(np.round(depth / DEPTH_UNIT), 1, 65535), 0)
    data = counts.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n65535\n".encode())
        fh.write(data.tobytes())


def load_depth_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError("not a P5 PGM file")
        w, h = (int(x) for x in fh.readline().split())
        if int(fh.readline()) != 65535:
            raise ValueError("depth PGM must be 16-bit")
        counts = np.frombuffer(fh.read(2 * w * h), dtype=">u2").reshape(h, w)
    return np.where(counts > 0, counts * DEPTH_UNIT, np.inf)


# ---------------------------------------------------------------------------
# scenario container + generation
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """One generated clip: ground truth, renders, and noisy observations."""

    script: ScenarioScript
    seed: int
    cam: Camera
    gt_track: ObjectTrack
    gt_hand_states: list
    phases: PhaseLabels
    amodal: list           # SilhouetteGrid per frame, object alone
    modal: list            # object minus hand-occluded pixels
    joint_masks: list      # hand union object
    object_depths: list    # (H, W) camera-space z, +inf uncovered
    obs_joints_2d: np.ndarray   # (T, 21, 2) pixels
    obs_wrist_depth: np.ndarray  # (T,)
    init_track: ObjectTrack
    init_hand_states: list
    diagnostics: dict

    @property
    def n_frames(self) -> int:
        return len(self.gt_track)


def _jitter_quat(rng, sigma_rad: float) -> np.ndarray:
    # axis-angle perturbation with expected magnitude ~= sigma_rad
    return axis_angle_to_quat(rng.normal(scale=sigma_rad / np.sqrt(3.0), size=3))


def _render_channels(cam: Camera, track: ObjectTrack, rig: HandRig, states):
    verts, _ = fk_sequence(rig, states)
    amodal, modal, joint, depths = [], [], [], []
    for f in range(len(track)):
        d_obj, _ = render_depth_faces(cam, track.posed_mesh(f))
        hand_mesh = TriMesh(verts[f], rig.template.faces, validate=False)
        d_hand, _ = render_depth_faces(cam, hand_mesh)
        obj_vis = np.isfinite(d_obj)
        occluded = np.isfinite(d_hand) & (d_hand < d_obj)
        amodal.append(SilhouetteGrid(obj_vis.astype(float), "hard"))
        modal.append(SilhouetteGrid((obj_vis & ~occluded).astype(float), "hard"))
        joint.append(SilhouetteGrid((obj_vis | np.isfinite(d_hand)).astype(float),
                                    "hard"))
        depths.append(d_obj)
    return amodal, modal, joint, depths


def generate_scenario(script: ScenarioScript, seed: int, out_dir,
                      rig: HandRig | None = None) -> Scenario:
    """Generate one scenario and write it under ``out_dir``; deterministic."""
    rig = rig or default_rig()
    cam = script.make_camera()
    rng = np.random.default_rng(seed)
    noise = script.noise

    gt_track, gt_states, phases = _ground_truth(script, rig, rng)
    T = script.n_frames
    amodal, modal, joint, depths = _render_channels(cam, gt_track, rig, gt_states)

    _, joints = fk_sequence(rig, gt_states)
    uv = np.empty((T, 21, 2))
    for f in range(T):
        uv[f], _, _ = cam.project_points(joints[f])
    obs_joints = uv + rng.normal(scale=noise.joints_px, size=uv.shape)

    # noisy initial object poses: one ray-depth bias for the clip plus
    # per-frame rotation/translation jitter
    origin = cam.center_world()
    bias_obj = rng.uniform(-noise.ray_bias, noise.ray_bias)
    init_poses = []
    for f in range(T):
        p = gt_track.poses[f]
        ray = p.t - origin
        ray = ray / np.linalg.norm(ray)
        q = quat_mul(_jitter_quat(rng, np.deg2rad(noise.rot_jitter_deg)), p.q)
        t = p.t + bias_obj * ray + rng.normal(scale=noise.trans_jitter, size=3)
        init_poses.append(Pose6D(q, t))
    init_track = ObjectTrack(gt_track.mesh, 1.0, init_poses,
                             mesh_ref="object.obj")

    # noisy initial hand states; the wrist-depth observation is taken from
    # the biased wrist so the depth channel shares the regressor's bias
    bias_hand = rng.uniform(-noise.ray_bias, noise.ray_bias)
    init_states = []
    obs_depth = np.empty(T)
    for f in range(T):
        st = gt_states[f]
        ray = st.wrist_trans - origin
        ray = ray / np.linalg.norm(ray)
        wrist = (st.wrist_trans + bias_hand * ray
                 + rng.normal(scale=noise.trans_jitter, size=3))
        rot = quat_mul(_jitter_quat(rng, np.deg2rad(noise.rot_jitter_deg)),
                       st.wrist_rot)
        theta = st.theta + rng.normal(scale=noise.theta_jitter, size=(15, 3))
        init_states.append(HandState(theta, rot, wrist))
        obs_depth[f] = (cam.to_camera(wrist[None])[0, 2]
                        + rng.normal(scale=noise.wrist_depth))

    scn = Scenario(script, seed, cam, gt_track, gt_states, phases,
                   amodal, modal, joint, depths, obs_joints, obs_depth,
                   init_track, init_states,
                   {"object_ray_bias": float(bias_obj),
                    "hand_ray_bias": float(bias_hand)})
    _write_scenario(scn, Path(out_dir))
    return scn


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_scenario(scn: Scenario, root: Path):
    root.mkdir(parents=True, exist_ok=True)
    for sub in ("gt", "masks", "depth", "obs"):
        (root / sub).mkdir(exist_ok=True)
    _dump({"script": scn.script.to_dict(), "seed": scn.seed,
           "camera": scn.cam.to_dict(), "diagnostics": scn.diagnostics},
          root / "scenario.json")
    save_obj(scn.gt_track.mesh, root / "object.obj")
    (root / "gt" / "track.json").write_text(scn.gt_track.to_json())
    _dump({"states": [s.to_dict() for s in scn.gt_hand_states]},
          root / "gt" / "hand_states.json")
    (root / "gt" / "phases.json").write_text(scn.phases.to_json())
    for f in range(scn.n_frames):
        save_pgm(scn.amodal[f], root / "masks" / f"amodal_{f:04d}.pgm")
        save_pgm(scn.modal[f], root / "masks" / f"modal_{f:04d}.pgm")
        save_pgm(scn.joint_masks[f], root / "masks" / f"joint_{f:04d}.pgm")
        save_depth_pgm(scn.object_depths[f], root / "depth" / f"object_{f:04d}.pgm")
    _dump({"joints_2d": scn.obs_joints_2d.tolist(),
           "wrist_depth": scn.obs_wrist_depth.tolist()},
          root / "obs" / "observations.json")
    (root / "obs" / "init_track.json").write_text(scn.init_track.to_json())
    _dump({"states": [s.to_dict() for s in scn.init_hand_states]},
          root / "obs" / "init_hand_states.json")


def load_scenario(root) -> Scenario:
    root = Path(root)
    head = json.loads((root / "scenario.json").read_text())
    script = ScenarioScript.from_dict(head["script"])
    cam = Camera.from_dict(head["camera"])
    mesh = load_obj(root / "object.obj")
    gt_track = ObjectTrack.from_json((root / "gt" / "track.json").read_text(), mesh)
    gt_states = [HandState.from_dict(d) for d in
                 json.loads((root / "gt" / "hand_states.json").read_text())["states"]]
    phases = PhaseLabels.from_json((root / "gt" / "phases.json").read_text())
    T = script.n_frames
    amodal = [load_pgm(root / "masks" / f"amodal_{f:04d}.pgm") for f in range(T)]
    modal = [load_pgm(root / "masks" / f"modal_{f:04d}.pgm") for f in range(T)]
    joint = [load_pgm(root / "masks" / f"joint_{f:04d}.pgm") for f in range(T)]
    depths = [load_depth_pgm(root / "depth" / f"object_{f:04d}.pgm")
              for f in range(T)]
    obs = json.loads((root / "obs" / "observations.json").read_text())
    init_track = ObjectTrack.from_json(
        (root / "obs" / "init_track.json").read_text(), mesh)
    init_states = [HandState.from_dict(d) for d in
                   json.loads((root / "obs" / "init_hand_states.json").read_text())["states"]]
    return Scenario(script, head["seed"], cam, gt_track, gt_states, phases,
                    amodal, modal, joint, depths,
                    np.array(obs["joints_2d"]), np.array(obs["wrist_depth"]),
                    init_track, init_states, head["diagnostics"])
