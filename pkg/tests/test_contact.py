"""Contact anchor establishment and soft cache rebuilds.

The establishment oracle is a brute-force scan over all surface samples with
the same distance/cone gates — no nearest-neighbour structure — so the
implementation's KD-tree shortcut is checked against first principles.
"""

import numpy as np
import pytest

from hoifit import contact, hand
from hoifit.contact import (ANCHOR_DIST, CACHE_DIST, CONE_ANGLE, K_SEARCH,
                            K_SOFT, N_SURFACE_SAMPLES, SIGMA_OMEGA, SIGMA_PROX,
                            ContactAnchor, ContactCache, establish_anchors,
                            load_anchors, rebuild_cache, save_anchors)
from hoifit.errors import NoInteractionFrames
from hoifit.geometry import (BarycentricPoint, Pose6D, make_box,
                             make_icosphere, sample_surface)
from hoifit.hand import HandState, forward_kinematics
from hoifit.tracking import ObjectTrack


@pytest.fixture(scope="module")
def rig():
    return hand.default_rig()


def _palm_box_track(rig, n_frames=1, clearance=0.005):
    """A wide box whose top face sits just below the lowest palm vertices."""
    mesh, _, _ = forward_kinematics(rig, HandState.rest())
    cand = mesh.vertices[rig.candidate_vertices]
    zmin = cand[:, 2].min()
    box = make_box((0.16, 0.16, 0.06))
    top = zmin - clearance
    pose = Pose6D(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.05, top - 0.03]))
    return ObjectTrack(box, 1.0, [pose] * n_frames)


class TestEstablish:
    def test_touching_vertex_anchors_at_touch_point(self, rig):
        # sphere just off one fingertip vertex, centered along its normal
        # (a 3 mm standoff; at exact tangency the directions to the discrete
        # surface samples are nearly perpendicular to the vertex normal and
        # the cone gate is degenerate)
        mesh, _, _ = forward_kinematics(rig, HandState.rest())
        vid = int(rig.labels["fingertips"][0])
        v = mesh.vertices[vid]
        n = mesh.vertex_normals[vid]
        r, gap = 0.03, 0.003
        sphere = make_icosphere(r, 2)
        track = ObjectTrack(sphere, 1.0,
                            [Pose6D(np.array([1.0, 0, 0, 0]), v + (r + gap) * n)])
        anchors = establish_anchors(rig, [HandState.rest()], track, [0], seed=3)
        mine = [a for a in anchors if a.hand_vertex == vid]
        assert len(mine) == 1
        a = mine[0]
        assert a.distance < gap + 0.005  # slack for sample density
        pos = a.anchor.position(track.posed_mesh(0))
        assert np.linalg.norm(pos - v) < 0.01

    def test_distant_object_yields_no_anchors(self, rig):
        sphere = make_icosphere(0.03, 1)
        track = ObjectTrack(sphere, 1.0,
                            [Pose6D(np.array([1.0, 0, 0, 0]),
                                    np.array([0.0, 0.05, -0.12]))])
        anchors = establish_anchors(rig, [HandState.rest()], track, [0], seed=3)
        assert anchors == []

    def test_no_interaction_frames_raises(self, rig):
        track = _palm_box_track(rig)
        with pytest.raises(NoInteractionFrames):
            establish_anchors(rig, [HandState.rest()], track, [], seed=0)

    def test_matches_exhaustive_scan(self, rig):
        track = _palm_box_track(rig)
        states = [HandState.rest()]
        anchors = establish_anchors(rig, states, track, [0], seed=7)
        assert len(anchors) >= 5

        posed = track.posed_mesh(0)
        samples = sample_surface(posed, N_SURFACE_SAMPLES, 7)
        mesh, _, _ = forward_kinematics(rig, states[0])
        ids = rig.candidate_vertices
        verts = mesh.vertices[ids]
        normals = mesh.vertex_normals[ids]
        expected = {}
        for i, vid in enumerate(ids):
            d = np.linalg.norm(samples.points - verts[i], axis=1)
            best = None
            for j in np.argsort(d, kind="stable")[:K_SEARCH]:
                if d[j] > ANCHOR_DIST:
                    continue
                off = samples.points[j] - verts[i]
                norm = np.linalg.norm(off)
                ca = 1.0 if norm < 1e-12 else off @ normals[i] / norm
                ang = np.arccos(np.clip(ca, -1.0, 1.0))
                if ang > CONE_ANGLE + 1e-12:
                    continue
                if best is None or d[j] < d[best]:
                    best = int(j)
            if best is not None:
                expected[int(vid)] = best

        assert {a.hand_vertex for a in anchors} == set(expected)
        for a in anchors:
            j = expected[a.hand_vertex]
            assert a.anchor.face_id == samples.face_ids[j]
            assert np.allclose(a.anchor.bary, samples.bary[j])
            assert a.distance == pytest.approx(
                np.linalg.norm(samples.points[j] - mesh.vertices[a.hand_vertex]),
                abs=1e-12)

    def test_rigid_invariance(self, rig):
        track = _palm_box_track(rig)
        base = establish_anchors(rig, [HandState.rest()], track, [0], seed=5)
        move = Pose6D(np.array([0.9, 0.1, -0.3, 0.2]), np.array([0.4, -0.1, 0.25]))
        moved_track = ObjectTrack(track.mesh, 1.0,
                                  [move.compose(track.poses[0])])
        moved_state = HandState.rest().replace(wrist_rot=move.q,
                                               wrist_trans=move.t)
        moved = establish_anchors(rig, [moved_state], moved_track, [0], seed=5)
        assert len(moved) == len(base)
        for a, b in zip(base, moved):
            assert (a.frame, a.hand_vertex, a.anchor.face_id) == \
                   (b.frame, b.hand_vertex, b.anchor.face_id)
            assert np.allclose(a.anchor.bary, b.anchor.bary, atol=1e-9)
            assert abs(a.distance - b.distance) < 1e-9
            assert abs(a.angle - b.angle) < 1e-9

    def test_frames_align_to_first_interaction_frame(self, rig):
        # frame 1 = frame 0 rigidly moved (object and hand together); after
        # canonical alignment its anchors must agree with frame 0's
        track0 = _palm_box_track(rig)
        move = Pose6D(np.array([0.8, 0.2, 0.1, -0.4]), np.array([-0.2, 0.3, 0.1]))
        track = ObjectTrack(track0.mesh, 1.0,
                            [track0.poses[0], move.compose(track0.poses[0])])
        states = [HandState.rest(),
                  HandState.rest().replace(wrist_rot=move.q, wrist_trans=move.t)]
        anchors = establish_anchors(rig, states, track, [0, 1], seed=5)
        by_frame = {f: {a.hand_vertex: a for a in anchors if a.frame == f}
                    for f in (0, 1)}
        assert set(by_frame[0]) == set(by_frame[1])
        for vid, a in by_frame[0].items():
            b = by_frame[1][vid]
            assert a.anchor.face_id == b.anchor.face_id
            assert np.allclose(a.anchor.bary, b.anchor.bary, atol=1e-8)
            assert abs(a.distance - b.distance) < 1e-8

    def test_anchor_serialization_round_trip(self, rig, tmp_path):
        track = _palm_box_track(rig)
        anchors = establish_anchors(rig, [HandState.rest()], track, [0], seed=5)
        path = tmp_path / "anchors.jsonl"
        save_anchors(anchors, path)
        loaded = load_anchors(path)
        assert len(loaded) == len(anchors)
        for a, b in zip(sorted(anchors, key=lambda a: (a.frame, a.hand_vertex)),
                        loaded):
            assert (a.frame, a.hand_vertex, a.anchor.face_id) == \
                   (b.frame, b.hand_vertex, b.anchor.face_id)
            assert np.allclose(a.anchor.bary, b.anchor.bary)
            assert a.distance == b.distance and a.angle == b.angle


class TestRebuildCache:
    def test_gates_and_weight_formulas(self, rig):
        track = _palm_box_track(rig)
        cache = rebuild_cache(rig, [HandState.rest()], track, [0], seed=4)
        assert len(cache) > 0
        for (f, vid), p in cache.pairs.items():
            assert f == 0 and len(p.anchors) <= K_SOFT
            assert np.all(p.distances <= CACHE_DIST + 1e-12)
            assert np.all(p.angles <= CONE_ANGLE + 1e-12)
            assert np.all(np.diff(p.distances) >= 0)
            assert abs(p.omegas.sum() - 1.0) < 1e-9
            ref = np.exp(-p.distances ** 2 / SIGMA_OMEGA ** 2)
            assert np.allclose(p.omegas, ref / ref.sum(), atol=1e-12)
            w_prox = np.exp(-p.distances[0] ** 2 / SIGMA_PROX ** 2)
            w_norm = np.clip(np.cos(p.angles[0]), 0.0, 1.0)
            assert p.confidence == pytest.approx(0.5 * w_prox * w_norm)
            assert 0.0 <= p.confidence <= 1.0
        # the cache is wider than establishment: 5 cm reaches more vertices
        anchors = establish_anchors(rig, [HandState.rest()], track, [0], seed=4)
        assert len(cache) >= len({a.hand_vertex for a in anchors})

    def test_memory_counter_and_monotone_confidence(self, rig):
        track = _palm_box_track(rig)
        states = [HandState.rest()]
        c0 = rebuild_cache(rig, states, track, [0], seed=4)
        c1 = rebuild_cache(rig, states, track, [0], previous=c0, seed=4)
        c2 = rebuild_cache(rig, states, track, [0], previous=c1, seed=4)
        c3 = rebuild_cache(rig, states, track, [0], previous=c2, seed=4)
        assert set(c1.pairs) == set(c0.pairs)
        for key in c0.pairs:
            assert (c0.pairs[key].counter, c1.pairs[key].counter,
                    c2.pairs[key].counter, c3.pairs[key].counter) == (0, 1, 2, 3)
            seq = [c.pairs[key].confidence for c in (c0, c1, c2, c3)]
            assert seq[1] == pytest.approx(1.5 * seq[0])
            assert seq[2] == pytest.approx(2.0 * seq[0])
            assert seq[3] == seq[2]  # memory term saturates at 1
            assert all(x <= 1.0 for x in seq)

    def test_interrupted_pair_resets_counter(self, rig):
        track = _palm_box_track(rig)
        states = [HandState.rest()]
        c0 = rebuild_cache(rig, states, track, [0], seed=4)
        c1 = rebuild_cache(rig, states, track, [0], previous=c0, seed=4)
        # move the hand far away for one rebuild: all pairs drop out
        far = HandState.rest().replace(wrist_trans=np.array([0.0, 0.0, 0.5]))
        gone = rebuild_cache(rig, [far], track, [0], previous=c1, seed=4)
        assert len(gone) == 0
        back = rebuild_cache(rig, states, track, [0], previous=gone, seed=4)
        assert all(p.counter == 0 for p in back.pairs.values())

    def test_absent_pair_confidence_is_zero(self, rig):
        track = _palm_box_track(rig)
        cache = rebuild_cache(rig, [HandState.rest()], track, [0], seed=4)
        assert cache.confidence(0, 999_999) == 0.0
        assert cache.confidence(5, 0) == 0.0

    def test_empty_interaction_frames_gives_empty_cache(self, rig):
        track = _palm_box_track(rig)
        cache = rebuild_cache(rig, [HandState.rest()], track, [], seed=4)
        assert len(cache) == 0

    def test_rigid_invariance(self, rig):
        track = _palm_box_track(rig)
        base = rebuild_cache(rig, [HandState.rest()], track, [0], seed=4)
        move = Pose6D(np.array([0.7, -0.2, 0.4, 0.1]), np.array([0.3, 0.2, -0.4]))
        moved_track = ObjectTrack(track.mesh, 1.0, [move.compose(track.poses[0])])
        moved = rebuild_cache(
            rig, [HandState.rest().replace(wrist_rot=move.q, wrist_trans=move.t)],
            moved_track, [0], seed=4)
        assert set(moved.pairs) == set(base.pairs)
        for key, p in base.pairs.items():
            q = moved.pairs[key]
            assert [a.face_id for a in p.anchors] == [a.face_id for a in q.anchors]
            assert np.allclose(p.distances, q.distances, atol=1e-9)
            assert np.allclose(p.angles, q.angles, atol=1e-9)
            assert np.allclose(p.omegas, q.omegas, atol=1e-9)
            assert abs(p.confidence - q.confidence) < 1e-9

    def test_soft_target_is_omega_average(self, rig):
        track = _palm_box_track(rig)
        cache = rebuild_cache(rig, [HandState.rest()], track, [0], seed=4)
        p = next(iter(cache.pairs.values()))
        pos = np.stack([a.position(track.mesh) for a in p.anchors])
        assert np.allclose(p.soft_target(track.mesh), p.omegas @ pos)

    def test_cache_serialization_round_trip(self, rig, tmp_path):
        track = _palm_box_track(rig)
        states = [HandState.rest()]
        c0 = rebuild_cache(rig, states, track, [0], seed=4)
        c1 = rebuild_cache(rig, states, track, [0], previous=c0, seed=4)
        for cache in (c0, c1):
            path = tmp_path / "cache.jsonl"
            cache.to_jsonl(path)
            loaded = ContactCache.from_jsonl(path)
            assert set(loaded.pairs) == set(cache.pairs)
            for key, p in cache.pairs.items():
                q = loaded.pairs[key]
                assert q.counter == p.counter
                assert [a.face_id for a in p.anchors] == \
                       [a.face_id for a in q.anchors]
                assert np.allclose(p.distances, q.distances)
                assert np.allclose(p.angles, q.angles)
                assert np.allclose(p.omegas, q.omegas)
                assert q.confidence == pytest.approx(p.confidence)


class TestPairValidation:
    def test_omegas_must_sum_to_one(self):
        bp = BarycentricPoint(0, np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            contact.CachePair(0, 1, [bp, bp], [0.0, 0.01], [0.0, 0.0],
                              [0.6, 0.3], 0.5)

    def test_confidence_bounds(self):
        bp = BarycentricPoint(0, np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            contact.CachePair(0, 1, [bp], [0.0], [0.0], [1.0], 1.2)

    def test_negative_anchor_distance_rejected(self):
        bp = BarycentricPoint(0, np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            ContactAnchor(0, 1, bp, -0.01, 0.0)
