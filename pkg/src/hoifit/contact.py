"""Hand-object contact correspondences.

Two related structures live here.  *Anchors* are established once on the
rectified geometry: for each contact-candidate hand vertex we pick the single
nearest qualifying object-surface sample and store it intrinsically as a
barycentric point on the canonical object mesh.  The *cache* is the soft
top-K correspondence set rebuilt periodically during joint optimization: per
active (frame, hand vertex) pair it holds up to eight nearby surface samples
with softmax weights, a confidence in [0, 1], and a memory counter that
rewards correspondences which survive consecutive rebuilds.

Both structures are pure functions of their inputs (surface sampling uses a
fixed seed), and both serialize to JSON lines with one record per anchor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoInteractionFrames
from .geometry import (BarycentricPoint, TriMesh, fit_similarity,
                       sample_surface)
from .hand import HandRig, HandState, forward_kinematics
from .tracking import ObjectTrack

N_SURFACE_SAMPLES = 10_000
K_SEARCH = 50           # establishment: nearest samples examined per vertex
K_SOFT = 8              # cache: soft correspondence fan-out
ANCHOR_DIST = 0.02      # establishment distance gate (m)
CACHE_DIST = 0.05       # rebuild distance gate (m)
CONE_ANGLE = np.deg2rad(60.0)
SIGMA_OMEGA = 0.01      # softmax temperature on distance (m)
SIGMA_PROX = 0.02       # proximity confidence scale (m)


@dataclass(frozen=True)
class ContactAnchor:
    """One established correspondence: hand vertex -> point on the object."""

    frame: int
    hand_vertex: int
    anchor: BarycentricPoint
    distance: float
    angle: float

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("anchor distance must be >= 0")


@dataclass
class CachePair:
    """Soft correspondence fan for one active (frame, hand vertex) pair."""

    frame: int
    vertex: int
    anchors: list            # list[BarycentricPoint], ascending by distance
    distances: np.ndarray    # (K,)
    angles: np.ndarray       # (K,) radians, vs. the hand vertex normal
    omegas: np.ndarray       # (K,) softmax weights, sum to 1
    confidence: float
    counter: int = 0

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float)
        self.angles = np.asarray(self.angles, dtype=float)
        self.omegas = np.asarray(self.omegas, dtype=float)
        if not (len(self.anchors) == len(self.distances) == len(self.angles)
                == len(self.omegas)):
            raise ValueError("ragged cache pair")
        if abs(self.omegas.sum() - 1.0) > 1e-9:
            raise ValueError("omegas must sum to 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def soft_target(self, mesh: TriMesh) -> np.ndarray:
        """Omega-weighted anchor position on the canonical mesh."""
        pos = np.stack([a.position(mesh) for a in self.anchors])
        return self.omegas @ pos


@dataclass
class ContactCache:
    """Active soft correspondences keyed by (frame, hand vertex)."""

    pairs: dict = field(default_factory=dict)

    def confidence(self, frame: int, vertex: int) -> float:
        pair = self.pairs.get((frame, vertex))
        return 0.0 if pair is None else pair.confidence

    def frame_pairs(self, frame: int) -> list:
        return [p for (f, _), p in sorted(self.pairs.items()) if f == frame]

    def __len__(self) -> int:
        return len(self.pairs)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for (f, v), p in sorted(self.pairs.items()):
                for k, a in enumerate(p.anchors):
                    fh.write(json.dumps({
                        "frame": int(f), "vertex": int(v),
                        "face": int(a.face_id),
                        "bary": [float(b) for b in a.bary],
                        "d": float(p.distances[k]),
                        "angle": float(p.angles[k]),
                        "c": float(p.confidence),
                        "omegas": [float(w) for w in p.omegas],
                    }) + "\n")

    @staticmethod
    def from_jsonl(path) -> "ContactCache":
        rows = {}
        with open(path) as fh:
            for line in fh:
                r = json.loads(line)
                rows.setdefault((r["frame"], r["vertex"]), []).append(r)
        cache = ContactCache()
        for key, recs in rows.items():
            anchors = [BarycentricPoint(r["face"], np.array(r["bary"]))
                       for r in recs]
            d = np.array([r["d"] for r in recs])
            ang = np.array([r["angle"] for r in recs])
            omegas = np.array(recs[0]["omegas"])
            c = float(recs[0]["c"])
            # The memory counter is recovered from the confidence factors;
            # counters past saturation (>= 2) collapse to 2, which leaves
            # every downstream quantity unchanged.
            w_prox = np.exp(-d[0] ** 2 / SIGMA_PROX ** 2)
            w_norm = np.clip(np.cos(ang[0]), 0.0, 1.0)
            denom = w_prox * w_norm
            w_mem = c / denom if denom > 1e-12 else 0.5
            counter = int(round(np.clip((w_mem - 0.5) / 0.25, 0.0, 2.0)))
            cache.pairs[key] = CachePair(key[0], key[1], anchors, d, ang,
                                         omegas, c, counter)
        return cache


def save_anchors(anchors, path):
    with open(path, "w") as fh:
        for a in sorted(anchors, key=lambda a: (a.frame, a.hand_vertex)):
            fh.write(json.dumps({
                "frame": int(a.frame), "vertex": int(a.hand_vertex),
                "face": int(a.anchor.face_id),
                "bary": [float(b) for b in a.anchor.bary],
                "d": float(a.distance), "angle": float(a.angle),
                "c": 1.0, "omegas": [1.0],
            }) + "\n")


def load_anchors(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            r = json.loads(line)
            out.append(ContactAnchor(r["frame"], r["vertex"],
                                     BarycentricPoint(r["face"],
                                                      np.array(r["bary"])),
                                     r["d"], r["angle"]))
    return out


def _candidate_geometry(rig: HandRig, state: HandState):
    """Posed positions and outward normals of the contact-candidate vertices."""
    mesh, _, _ = forward_kinematics(rig, state)
    ids = rig.candidate_vertices
    return mesh.vertices[ids], mesh.vertex_normals[ids], ids


def establish_anchors(rig: HandRig, hand_states, track: ObjectTrack,
                      interaction_frames, seed: int = 0):
    """Single-anchor correspondences on the interaction frames.

    Every frame's posed object is rigidly aligned (no rescaling: scale is
    owned by the track) to the pose at the first interaction frame, and the
    hand moves with it, so all anchors live on one canonical surface.  Per
    candidate hand vertex the 50 nearest of 10,000 seeded surface samples are
    examined; samples farther than 2 cm or outside a 60 degree cone around
    the vertex outward normal are discarded, and the nearest survivor (if
    any) becomes the anchor.
    """
    frames = sorted(int(f) for f in interaction_frames)
    if not frames:
        raise NoInteractionFrames("anchor establishment needs interaction frames")
    f0 = frames[0]
    canon = track.posed_mesh(f0)
    samples = sample_surface(canon, N_SURFACE_SAMPLES, seed)
    tree = samples.tree()

    anchors = []
    for f in frames:
        posed = track.posed_mesh(f)
        _, align, _ = fit_similarity(posed.vertices, canon.vertices,
                                     with_scale=False)
        verts, normals, ids = _candidate_geometry(rig, hand_states[f])
        verts = align.apply(verts)
        normals = normals @ align.R.T
        dist, idx = tree.query(verts, k=K_SEARCH)
        for i, vid in enumerate(ids):
            d = dist[i]
            keep = d <= ANCHOR_DIST
            if not keep.any():
                continue
            to_sample = samples.points[idx[i]] - verts[i]
            norms = np.linalg.norm(to_sample, axis=1)
            cosang = np.where(norms > 1e-12,
                              (to_sample @ normals[i]) / np.maximum(norms, 1e-12),
                              1.0)
            angle = np.arccos(np.clip(cosang, -1.0, 1.0))
            keep &= angle <= CONE_ANGLE + 1e-12
            if not keep.any():
                continue
            best = int(np.flatnonzero(keep)[np.argmin(d[keep])])
            j = int(idx[i][best])
            anchors.append(ContactAnchor(
                f, int(vid),
                BarycentricPoint(int(samples.face_ids[j]), samples.bary[j]),
                float(d[best]), float(angle[best])))
    return anchors


def rebuild_cache(rig: HandRig, hand_states, track: ObjectTrack,
                  interaction_frames, previous: ContactCache | None = None,
                  seed: int = 0) -> ContactCache:
    """Soft top-8 correspondence cache on the current geometry.

    Candidate samples within 5 cm and the 60 degree normal cone are ranked by
    distance; the nearest eight get softmax weights exp(-d^2 / sigma^2) with
    sigma = 1 cm.  Confidence multiplies proximity, normal compatibility and
    temporal memory; the memory term starts at 0.5 for fresh pairs and
    saturates at 1 once a pair has survived two consecutive rebuilds.
    """
    previous = previous or ContactCache()
    cache = ContactCache()
    frames = sorted(int(f) for f in interaction_frames)
    if not frames:
        return cache
    samples = sample_surface(track.mesh, N_SURFACE_SAMPLES, seed)
    for f in frames:
        pose = track.poses[f]
        points = pose.apply(samples.points * track.scale)
        tree = cKDTree(points)
        verts, normals, ids = _candidate_geometry(rig, hand_states[f])
        hits = tree.query_ball_point(verts, CACHE_DIST)
        for i, vid in enumerate(ids):
            cand = np.asarray(hits[i], dtype=np.int64)
            if cand.size == 0:
                continue
            to_sample = points[cand] - verts[i]
            d = np.linalg.norm(to_sample, axis=1)
            cosang = np.where(d > 1e-12, (to_sample @ normals[i]) / np.maximum(d, 1e-12), 1.0)
            angle = np.arccos(np.clip(cosang, -1.0, 1.0))
            keep = angle <= CONE_ANGLE + 1e-12
            if not keep.any():
                continue
            cand, d, angle = cand[keep], d[keep], angle[keep]
            order = np.lexsort((cand, d))[:K_SOFT]
            cand, d, angle = cand[order], d[order], angle[order]
            logits = -d ** 2 / SIGMA_OMEGA ** 2
            logits -= logits.max()
            omegas = np.exp(logits)
            omegas /= omegas.sum()
            counter = 0
            prev = previous.pairs.get((f, int(vid)))
            if prev is not None:
                counter = prev.counter + 1
            w_prox = float(np.exp(-d[0] ** 2 / SIGMA_PROX ** 2))
            w_norm = float(np.clip(np.cos(angle[0]), 0.0, 1.0))
            w_mem = min(1.0, 0.5 + 0.25 * counter)
            anchors = [BarycentricPoint(int(samples.face_ids[j]), samples.bary[j])
                       for j in cand]
            cache.pairs[(f, int(vid))] = CachePair(
                f, int(vid), anchors, d, angle, omegas,
                w_prox * w_norm * w_mem, counter)
    return cache
