"""Run configuration and the staged reconstruction pipeline.

A run directory is the unit of reproducibility: every stage reads its
inputs from the scenario directory and earlier stage subdirectories, and
writes its outputs as plain files (JSON / JSONL / CSV / PGM).  The manifest
records the configuration, its hash, and per-stage status.  Wall-clock
timings are written to a sidecar file *next to* the run directory so that
two runs with identical configuration produce byte-identical run
directories.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import contact, hand, losses, metrics as metrics_mod, rectifier
from .errors import ConfigError, HoifitError, MissingStageOutput
from .hand import HandState
from .losses import LossWeights, Stage3Refs, history_to_csv
from .render import render_depth_faces, render_silhouette, save_pgm
from .scenario import Scenario, load_scenario, save_depth_pgm
from .tracking import (ObjectTrack, PhaseLabels, accept_pose, fill_gaps,
                       segment_phases, static_init)

STAGES = ("tracking", "static_init", "stage1", "rectify", "anchors",
          "stage3", "metrics", "report")

CONFIG_DEFAULTS = {
    "scenario_dir": "",
    "seed": 0,
    "tracking": {"smooth": 5, "tau_move": 0.6, "tau_iou": 0.04,
                 "tau_hand": 0.006},
    "static_init": {"iters": 500, "lr": 1e-3},
    "stage1": {"iters": 400, "block": 50, "lr_object": 1e-3, "lr_hand": 1e-3},
    "rectifier": {"model_path": "", "n_pairs": 200, "epochs": 60,
                  "lr": 1e-3, "batch_size": 64, "train_seed": 0,
                  "steps": 20, "ramp": 5},
    "stage3": {"iters": 800, "rebuild_every": 50, "lr_object": 3e-4,
               "lr_finger": 5e-4, "lr_wrist": 5e-5},
    "weights": {},
    "ablate": {"stage2": False, "contact": False, "pen": False, "attr": False},
}


def _merge(defaults: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k not in defaults:
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(defaults[k], dict) and k != "weights":
            if not isinstance(v, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[k] = _merge(defaults[k], v, path + ".")
        else:
            out[k] = v
    return out


class RunConfig:
    """Validated configuration document; unknown keys are rejected."""

    def __init__(self, overrides: dict | None = None):
        self.data = _merge(CONFIG_DEFAULTS, overrides or {})
        known_weights = set(LossWeights().to_dict())
        for k in self.data["weights"]:
            if k not in known_weights:
                raise ConfigError(f"unknown configuration key 'weights.{k}'")

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        return RunConfig(d)

    @staticmethod
    def from_json_file(path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return RunConfig(d)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def __getitem__(self, key):
        return self.data[key]

    def make_weights(self) -> LossWeights:
        w = LossWeights().to_dict()
        w.update(self.data["weights"])
        ab = self.data["ablate"]
        if ab["contact"]:
            w["contact"] = 0.0
        if ab["pen"]:
            w["pen"] = 0.0
        if ab["attr"]:
            w["attr"] = 0.0
        return LossWeights.from_dict(w)


# ---------------------------------------------------------------------------
# stage-output serialization helpers
# ---------------------------------------------------------------------------


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def save_states(states, path: Path):
    _dump({"states": [s.to_dict() for s in states]}, path)


def load_states(path: Path) -> list:
    return [HandState.from_dict(d)
            for d in json.loads(path.read_text())["states"]]


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStageOutput(f"{stage} output missing: {path}")
    return path


# ---------------------------------------------------------------------------
# stages (each reads/writes the run directory)
# ---------------------------------------------------------------------------


def _smooth_positions(x: np.ndarray, window: int) -> np.ndarray:
    """Moving average along the frame axis with edge renormalization.

    Applied to observed *positions* before phase segmentation: per-frame
    pose jitter would otherwise register as sustained motion, and averaging
    speeds cannot remove it (the mean of |noise| does not shrink)."""
    if window <= 1:
        return x
    flat = x.reshape(len(x), -1)
    k = np.ones(window)
    norm = np.convolve(np.ones(len(x)), k, mode="same")
    sm = np.stack([np.convolve(flat[:, j], k, mode="same") / norm
                   for j in range(flat.shape[1])], axis=1)
    return sm.reshape(x.shape)


def stage_tracking(scn: Scenario, cfg: RunConfig, out: Path):
    """Guarded acceptance of the observed poses, gap filling, and phase
    segmentation from observation-channel signals only."""
    track = ObjectTrack(scn.init_track.mesh, 1.0,
                        [None] * scn.n_frames, mesh_ref="object.obj")
    for f in range(scn.n_frames):
        accept_pose(track, f, scn.init_track.poses[f])
    track = fill_gaps(track)

    sub = cfg["tracking"]
    window = int(sub["smooth"])
    cents = np.array([p.apply(track.mesh.centroid()) for p in track.poses])
    cent2d, _, _ = scn.cam.project_points(cents)
    cent2d = _smooth_positions(cent2d, window)
    iou_deltas = np.array([1.0 - scn.amodal[f].iou(scn.amodal[f - 1])
                           for f in range(1, scn.n_frames)])
    _, joints = hand.fk_sequence(_rig(), scn.init_hand_states)
    joints = _smooth_positions(joints, window)
    phases = segment_phases(cent2d, iou_deltas, joints,
                            tau_move=float(sub["tau_move"]),
                            tau_iou=float(sub["tau_iou"]),
                            tau_hand=float(sub["tau_hand"]))

    d = out / "tracking"
    d.mkdir(parents=True, exist_ok=True)
    (d / "track.json").write_text(track.to_json())
    (d / "phases.json").write_text(phases.to_json())
    return track, phases


def stage_static_init(scn: Scenario, track: ObjectTrack, phases: PhaseLabels,
                      cfg: RunConfig, out: Path):
    """Shared pose + scale fit on the leading static segment."""
    static = phases.frames_with("pre_static")
    sub = cfg["static_init"]
    if len(static):
        pose, scale, accepted = static_init(
            scn.cam, track.mesh, scn.modal, scn.object_depths, static,
            track.poses[int(static[0])], init_scale=track.scale,
            iters=int(sub["iters"]), lr=float(sub["lr"]))
    else:
        pose, scale, accepted = None, track.scale, False
    track = track.copy()
    if accepted:
        track.scale = scale
        for f in static:
            track.poses[int(f)] = pose
    d = out / "static"
    d.mkdir(parents=True, exist_ok=True)
    (d / "track.json").write_text(track.to_json())
    _dump({"accepted": bool(accepted), "scale": float(track.scale)},
          d / "diag.json")
    return track


def stage_one(scn: Scenario, track: ObjectTrack, phases: PhaseLabels,
              cfg: RunConfig, out: Path):
    sub = cfg["stage1"]
    amodal = [m.values for m in scn.amodal]
    states, track, history, diag = losses.run_stage1(
        _rig(), scn.init_hand_states, track, scn.cam, amodal, phases,
        scn.obs_joints_2d, scn.obs_wrist_depth, weights=cfg.make_weights(),
        iters=int(sub["iters"]), block=int(sub["block"]),
        lr_object=float(sub["lr_object"]), lr_hand=float(sub["lr_hand"]),
        seed=int(cfg["seed"]))
    d = out / "stage1"
    d.mkdir(parents=True, exist_ok=True)
    save_states(states, d / "hand_states.json")
    (d / "track.json").write_text(track.to_json())
    history_to_csv(history, d / "history.csv")
    _dump(diag, d / "diag.json")
    return states, track


def get_model(cfg: RunConfig, out: Path) -> rectifier.VelocityModel:
    """Load the configured velocity model, or train one inside the run."""
    sub = cfg["rectifier"]
    if sub["model_path"]:
        return rectifier.VelocityModel.load(sub["model_path"])
    pairs, _ = rectifier.generate_pairs(int(sub["n_pairs"]),
                                        seed=int(sub["train_seed"]), rig=_rig())
    model = rectifier.VelocityModel(seed=int(sub["train_seed"]))
    model, _ = rectifier.train_flow(model, pairs, epochs=int(sub["epochs"]),
                                    lr=float(sub["lr"]),
                                    seed=int(sub["train_seed"]),
                                    batch_size=int(sub["batch_size"]))
    d = out / "model"
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / "velocity")
    return model


def stage_rectify(scn: Scenario, states, track: ObjectTrack,
                  phases: PhaseLabels, cfg: RunConfig, out: Path):
    sub = cfg["rectifier"]
    d = out / "stage2"
    d.mkdir(parents=True, exist_ok=True)
    if cfg["ablate"]["stage2"]:
        out_states, offsets = list(states), {}
    else:
        model = get_model(cfg, out)
        out_states, offsets = rectifier.rectify_frames(
            model, states, track, scn.cam, phases.interaction_frames,
            rig=_rig(), steps=int(sub["steps"]), ramp=int(sub["ramp"]))
    save_states(out_states, d / "hand_states.json")
    _dump({str(f): float(v) for f, v in sorted(offsets.items())},
          d / "offsets.json")
    return out_states


def stage_anchors(states, track: ObjectTrack, phases: PhaseLabels,
                  cfg: RunConfig, out: Path):
    anchors = contact.establish_anchors(_rig(), states, track,
                                        phases.interaction_frames,
                                        seed=int(cfg["seed"]))
    d = out / "anchors"
    d.mkdir(parents=True, exist_ok=True)
    contact.save_anchors(anchors, d / "anchors.jsonl")
    return anchors


def stage_three(scn: Scenario, states, track: ObjectTrack,
                phases: PhaseLabels, cfg: RunConfig, out: Path):
    sub = cfg["stage3"]
    refs = Stage3Refs(list(states), track, track, scn.obs_joints_2d,
                      phases.interaction_frames)
    amodal = [m.values for m in scn.amodal]
    out_states, out_track, history, cache = losses.run_stage3(
        _rig(), states, track, scn.cam, amodal, refs,
        weights=cfg.make_weights(), iters=int(sub["iters"]),
        rebuild_every=int(sub["rebuild_every"]),
        lr_object=float(sub["lr_object"]), lr_finger=float(sub["lr_finger"]),
        lr_wrist=float(sub["lr_wrist"]), cache_seed=int(cfg["seed"]))
    d = out / "stage3"
    d.mkdir(parents=True, exist_ok=True)
    save_states(out_states, d / "hand_states.json")
    (d / "track.json").write_text(out_track.to_json())
    if history:  # a zero-iteration pass-through has no loss curve
        history_to_csv(history, d / "history.csv")
    cache.to_jsonl(d / "cache.jsonl")
    return out_states, out_track


def stage_metrics(scn: Scenario, states, track: ObjectTrack, out: Path):
    rep = metrics_mod.compute_metrics(_rig(), states, track, scn.cam,
                                      scn.joint_masks)
    rep_input = metrics_mod.compute_metrics(_rig(), scn.init_hand_states,
                                            scn.init_track, scn.cam,
                                            scn.joint_masks)
    d = out / "metrics"
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.json").write_text(rep.to_json())
    rep.to_csv(d / "metrics.csv")
    (d / "input_metrics.json").write_text(rep_input.to_json())
    return rep


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _rig():
    from .tracking import _default_rig_cached
    return _default_rig_cached()


def run_pipeline(cfg: RunConfig, out_dir, scenario_dir=None):
    """Execute all stages; returns the manifest dict.

    Stage failures are recorded in the manifest (status "failed" with the
    error message) and abort the remaining stages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scn_dir = Path(scenario_dir or cfg["scenario_dir"])
    if not (scn_dir / "scenario.json").exists():
        raise ConfigError(f"scenario directory {scn_dir} not found")
    scn = load_scenario(scn_dir)

    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash,
                "scenario": scn_dir.name, "scenario_path": str(scn_dir),
                "stages": []}
    timings = {}
    state = {}

    def run(name, fn):
        t0 = time.perf_counter()
        try:
            fn()
        except HoifitError as exc:
            manifest["stages"].append({"name": name, "status": "failed",
                                       "error": str(exc)})
            raise
        finally:
            timings[name] = time.perf_counter() - t0
            _dump(manifest, out / "manifest.json")
            _dump(timings, out.parent / (out.name + ".timings.json"))
        manifest["stages"].append({"name": name, "status": "ok"})
        _dump(manifest, out / "manifest.json")

    (out / "config.json").write_text(cfg.canonical_json())

    def _tracking():
        state["track"], state["phases"] = stage_tracking(scn, cfg, out)

    def _static():
        state["track"] = stage_static_init(scn, state["track"],
                                           state["phases"], cfg, out)

    def _stage1():
        state["states"], state["track"] = stage_one(
            scn, state["track"], state["phases"], cfg, out)

    def _rectify():
        state["states"] = stage_rectify(scn, state["states"], state["track"],
                                        state["phases"], cfg, out)

    def _anchors():
        stage_anchors(state["states"], state["track"], state["phases"],
                      cfg, out)

    def _stage3():
        state["states"], state["track"] = stage_three(
            scn, state["states"], state["track"], state["phases"], cfg, out)

    def _metrics():
        state["report"] = stage_metrics(scn, state["states"],
                                        state["track"], out)

    def _report():
        from .report import write_report_figures
        write_report_figures(out)

    for name, fn in (("tracking", _tracking), ("static_init", _static),
                     ("stage1", _stage1), ("rectify", _rectify),
                     ("anchors", _anchors), ("stage3", _stage3),
                     ("metrics", _metrics), ("report", _report)):
        run(name, fn)
    return manifest


# ---------------------------------------------------------------------------
# view export
# ---------------------------------------------------------------------------


def _latest_states(run_dir: Path):
    """Most advanced stage outputs available (stage3, else stage2+stage1
    track, else stage1)."""
    manifest_path = _require(run_dir / "manifest.json", "pipeline")
    scn = load_scenario(json.loads(manifest_path.read_text())["scenario_path"])
    for stage in ("stage3", "stage2", "stage1"):
        states_path = run_dir / stage / "hand_states.json"
        if states_path.exists():
            track_dir = stage if (run_dir / stage / "track.json").exists() \
                else "stage1"
            track_path = _require(run_dir / track_dir / "track.json", track_dir)
            track = ObjectTrack.from_json(track_path.read_text(),
                                          scn.gt_track.mesh)
            return scn, load_states(states_path), track, stage
    raise MissingStageOutput(f"no fitted stages under {run_dir}")


def export_views(run_dir, frames, out_subdir: str = "export") -> dict:
    """Write hard hand/object silhouettes plus depth grids for ``frames``.

    Returns the JSON index (also written to disk).  The object silhouette
    is rendered exactly as the metric computation renders it.
    """
    run_dir = Path(run_dir)
    scn, states, track, stage = _latest_states(run_dir)
    d = run_dir / out_subdir
    d.mkdir(parents=True, exist_ok=True)
    rig = _rig()
    index = {"stage": stage, "frames": []}
    for f in sorted(int(f) for f in frames):
        hand_mesh, _, _ = hand.forward_kinematics(rig, states[f])
        obj = track.posed_mesh(f)
        entry = {"frame": f}
        for name, mesh in (("hand", hand_mesh), ("object", obj)):
            sil = render_silhouette(scn.cam, mesh, "hard")
            depth, _ = render_depth_faces(scn.cam, mesh)
            save_pgm(sil, d / f"{name}_mask_{f:04d}.pgm")
            save_depth_pgm(depth, d / f"{name}_depth_{f:04d}.pgm")
            entry[name + "_mask"] = f"{name}_mask_{f:04d}.pgm"
            entry[name + "_depth"] = f"{name}_depth_{f:04d}.pgm"
        index["frames"].append(entry)
    _dump(index, d / "index.json")
    return index
