"""Reference-free evaluation of a reconstructed hand-object sequence.

Four families of metrics, none of which needs ground truth:

* mIoU between the hard-rendered joint hand+object silhouette and the
  observed joint mask, in percent.
* Penetration ratio: the mean percentage of hand vertices strictly inside
  the object (winding-number sign test).
* Hand-object distance: per frame, the smallest distance from any hand
  vertex to the object surface, averaged over frames, in centimeters.
  The vertex-to-nearest-triangle distance is the primary figure; the
  vertex-to-vertex variant is reported alongside it because it
  over-estimates on coarse meshes.
* Accelerations: mean second-order finite differences of the 3D hand
  joints and of the object center, in cm/frame^2.

All averages run over the declared valid frames; accelerations run over
triplets of consecutive valid frames and are absent when no such triplet
exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import MissingMask, NoValidFrames
from .geometry import signed_distances, unsigned_distances
from .hand import HandRig, forward_kinematics
from .render import Camera, compose_max, render_silhouette
from .tracking import ObjectTrack

CSV_COLUMNS = ("mIoU", "Pen. Ratio", "H-O Dist.", "Acc_h", "Acc_o")

M_TO_CM = 100.0


@dataclass
class MetricReport:
    """Sequence-level metrics plus the per-frame values behind them."""

    miou: float                 # percent
    pen_ratio: float            # percent
    ho_dist: float              # cm, vertex-to-triangle
    ho_dist_vertex: float       # cm, vertex-to-vertex (secondary)
    acc_h: float | None         # cm/frame^2; absent without a valid triplet
    acc_o: float | None
    valid_frames: tuple
    accel_triplets: tuple       # center frames t with t-1, t, t+1 all valid
    per_frame: dict = field(default_factory=dict)

    def __post_init__(self):
        self.valid_frames = tuple(int(f) for f in self.valid_frames)
        self.accel_triplets = tuple(int(f) for f in self.accel_triplets)
        for name in ("miou", "pen_ratio", "ho_dist", "ho_dist_vertex"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("acc_h", "acc_o"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if (self.acc_h is None) != (self.acc_o is None):
            raise ValueError("acc_h and acc_o must be absent together")
        if (self.acc_h is None) != (len(self.accel_triplets) == 0):
            raise ValueError("accelerations absent iff no valid triplet")
        valid = set(self.valid_frames)
        for t in self.accel_triplets:
            if not {t - 1, t, t + 1} <= valid:
                raise ValueError(f"triplet center {t} not interior to the "
                                 "valid-frame set")

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "pen_ratio": self.pen_ratio,
            "ho_dist": self.ho_dist,
            "ho_dist_vertex": self.ho_dist_vertex,
            "acc_h": self.acc_h,
            "acc_o": self.acc_o,
            "valid_frames": list(self.valid_frames),
            "accel_triplets": list(self.accel_triplets),
            "per_frame": {k: {str(f): v for f, v in sorted(d.items())}
                          for k, d in sorted(self.per_frame.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        d = json.loads(text)
        return MetricReport(
            d["miou"], d["pen_ratio"], d["ho_dist"], d["ho_dist_vertex"],
            d["acc_h"], d["acc_o"], d["valid_frames"], d["accel_triplets"],
            {k: {int(f): v for f, v in sub.items()}
             for k, sub in d.get("per_frame", {}).items()})

    def csv_row(self) -> tuple[str, str]:
        """(header line, value line) in the table column order."""
        vals = [self.miou, self.pen_ratio, self.ho_dist, self.acc_h, self.acc_o]
        cells = ["" if v is None else f"{v:.6f}" for v in vals]
        return ",".join(CSV_COLUMNS), ",".join(cells)

    def to_csv(self, path):
        header, row = self.csv_row()
        with open(path, "w") as fh:
            fh.write(header + "\n" + row + "\n")


def _second_difference_mean(series: np.ndarray) -> float:
    """Mean norm of x[t+1] - 2 x[t] + x[t-1] over the leading axis.

    ``series`` is (3, ...) stacked as (t-1, t, t+1) triplet members along a
    new axis 1, in meters; the result is in cm/frame^2.
    """
    acc = series[2] - 2.0 * series[1] + series[0]
    return float(np.mean(np.linalg.norm(acc * M_TO_CM, axis=-1)))


def compute_metrics(rig: HandRig, hand_states, track: ObjectTrack,
                    cam: Camera, joint_masks, validity=None) -> MetricReport:
    """Evaluate a reconstructed sequence against its observed joint masks.

    ``joint_masks`` holds one hard SilhouetteGrid (or None) per frame: the
    union silhouette of hand and object as observed.  ``validity`` defaults
    to the track's pose validity; frames outside it contribute to nothing.
    """
    n = len(track)
    if validity is None:
        validity = track.validity
    validity = np.asarray(validity, dtype=bool)
    if validity.shape != (n,):
        raise ValueError("validity must have one flag per frame")
    valid = [f for f in range(n) if validity[f] and track.poses[f] is not None]
    if not valid:
        raise NoValidFrames("metrics need at least one valid frame")
    missing = [f for f in valid if joint_masks[f] is None]
    if missing:
        raise MissingMask(missing)

    per_iou, per_pen, per_ho, per_hov = {}, {}, {}, {}
    joints, centers = {}, {}
    for f in valid:
        obj = track.posed_mesh(f)
        hand_mesh, j, _ = forward_kinematics(rig, hand_states[f])
        joints[f] = j
        centers[f] = obj.centroid()

        rendered = compose_max(render_silhouette(cam, hand_mesh, "hard"),
                               render_silhouette(cam, obj, "hard"))
        per_iou[f] = 100.0 * rendered.iou(joint_masks[f])

        sd = signed_distances(obj, hand_mesh.vertices)
        per_pen[f] = 100.0 * float(np.mean(sd > 0))

        per_ho[f] = M_TO_CM * float(unsigned_distances(obj, hand_mesh.vertices).min())
        d_vv, _ = cKDTree(obj.vertices).query(hand_mesh.vertices, k=1)
        per_hov[f] = M_TO_CM * float(d_vv.min())

    triplets = [t for t in valid if t - 1 in joints and t + 1 in joints]
    acc_h = acc_o = None
    if triplets:
        j3 = np.stack([np.stack([joints[t + s] for t in triplets])
                       for s in (-1, 0, 1)])          # (3, |A|, 21, 3)
        c3 = np.stack([np.stack([centers[t + s] for t in triplets])
                       for s in (-1, 0, 1)])          # (3, |A|, 3)
        acc_h = _second_difference_mean(j3)
        acc_o = _second_difference_mean(c3)

    mean = lambda d: float(np.mean([d[f] for f in valid]))
    return MetricReport(
        miou=mean(per_iou), pen_ratio=mean(per_pen),
        ho_dist=mean(per_ho), ho_dist_vertex=mean(per_hov),
        acc_h=acc_h, acc_o=acc_o,
        valid_frames=valid, accel_triplets=triplets,
        per_frame={"iou": per_iou, "pen_ratio": per_pen,
                   "ho_dist": per_ho, "ho_dist_vertex": per_hov})
