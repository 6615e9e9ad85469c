import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from hoifit import hand
from hoifit.errors import TooShort
from hoifit.geometry import quat_to_matrix


@pytest.fixture(scope="module")
def rig():
    return hand.default_rig()


def _finger_chain(rig, finger):
    jid = int(rig.tip_parent[finger])
    chain = []
    while jid != 0:
        chain.append(jid)
        jid = int(rig.parents[jid])
    return chain[::-1]


def _chain_fk_oracle(rig, state, finger):
    """Independent FK for one finger chain via explicit 4x4 matrix products."""
    T = np.eye(4)
    pts = []
    prev = 0
    for j in _finger_chain(rig, finger):
        A = np.eye(4)
        A[:3, 3] = rig.rest_pos[j] - rig.rest_pos[prev]
        B = np.eye(4)
        B[:3, :3] = Rotation.from_rotvec(state.theta[j - 1]).as_matrix()
        T = T @ A @ B
        pts.append(T[:3, 3].copy())
        prev = j
    tip = np.eye(4)
    tip[:3, 3] = rig.tip_offsets[finger]
    pts.append((T @ tip)[:3, 3])
    R = quat_to_matrix(state.wrist_rot)
    return np.array([state.wrist_trans + state.scale * R @ p for p in pts])


class TestRigConstruction:
    def test_topology(self, rig):
        assert rig.n_joints == 16
        assert len(rig.tip_parent) == 5
        assert rig.axes.shape == (15, 3, 3)
        # twist/splay/bend axes form an orthonormal frame at every joint
        gram = np.einsum("jkd,jld->jkl", rig.axes, rig.axes)
        assert np.allclose(gram, np.eye(3), atol=1e-12)

    def test_skinning_weights_convex(self, rig):
        assert np.all(rig.skin_w >= 0)
        assert np.allclose(rig.skin_w.sum(axis=1), 1.0)
        assert rig.skin_idx.shape[1] <= 4

    def test_labels_disjoint_and_nonempty(self, rig):
        sets = [set(rig.labels[k].tolist()) for k in ("fingertips", "finger_pads", "palm")]
        for s in sets:
            assert s
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_json_round_trip(self, rig):
        clone = hand.HandRig.from_json(rig.to_json())
        assert np.allclose(clone.template.vertices, rig.template.vertices)
        assert np.array_equal(clone.template.faces, rig.template.faces)
        assert np.allclose(clone.skin_w, rig.skin_w)
        assert np.array_equal(clone.skin_idx, rig.skin_idx)
        for k in rig.labels:
            assert np.array_equal(clone.labels[k], rig.labels[k])
        st = hand.HandState(np.full((15, 3), 0.1), [1, 0, 0, 0], [0, 0, 0])
        m0, j0, _ = hand.forward_kinematics(rig, st)
        m1, j1, _ = hand.forward_kinematics(clone, st)
        assert np.allclose(m0.vertices, m1.vertices)
        assert np.allclose(j0, j1)


class TestForwardKinematics:
    def test_rest_pose_reproduces_template(self, rig):
        mesh, joints, cand = hand.forward_kinematics(rig, hand.HandState.rest())
        assert np.allclose(mesh.vertices, rig.template.vertices, atol=1e-12)
        assert np.allclose(joints[:16], rig.rest_pos, atol=1e-12)
        assert joints.shape == (21, 3)
        for k, v in rig.labels.items():
            assert np.allclose(cand[k], rig.template.vertices[v])

    def test_matches_matrix_chain_oracle(self, rig):
        rng = np.random.default_rng(3)
        for trial in range(20):
            theta = rng.normal(scale=0.4, size=(15, 3))
            q = rng.normal(size=4)
            st = hand.HandState(theta, q, rng.normal(size=3), scale=1.0 + 0.3 * rng.random())
            _, joints, _ = hand.forward_kinematics(rig, st)
            for f in range(5):
                expected = _chain_fk_oracle(rig, st, f)
                chain = _finger_chain(rig, f)
                got = np.vstack([joints[chain], joints[16 + f][None]])
                assert np.allclose(got, expected, atol=1e-10)

    def test_rigid_equivariance(self, rig):
        rng = np.random.default_rng(7)
        theta = rng.normal(scale=0.3, size=(15, 3))
        local = hand.HandState(theta, [1, 0, 0, 0], [0, 0, 0])
        q = rng.normal(size=4)
        t = rng.normal(size=3)
        s = 1.4
        world = hand.HandState(theta, q, t, scale=s)
        m0, j0, _ = hand.forward_kinematics(rig, local)
        m1, j1, _ = hand.forward_kinematics(rig, world)
        R = quat_to_matrix(np.asarray(q, float) / np.linalg.norm(q))
        assert np.allclose(m1.vertices, (s * m0.vertices) @ R.T + t, atol=1e-10)
        assert np.allclose(j1, (s * j0) @ R.T + t, atol=1e-10)

    def test_batch_matches_single(self, rig):
        rng = np.random.default_rng(11)
        states = [
            hand.HandState(rng.normal(scale=0.3, size=(15, 3)), rng.normal(size=4),
                           rng.normal(size=3), scale=0.9 + 0.2 * i)
            for i in range(3)
        ]
        verts, joints = hand.fk_sequence(rig, states)
        for i, st in enumerate(states):
            mesh, j, _ = hand.forward_kinematics(rig, st)
            assert np.allclose(verts[i], mesh.vertices, atol=1e-12)
            assert np.allclose(joints[i], j, atol=1e-12)

    def test_no_degenerate_faces_across_pose_space(self, rig):
        """Skinned mesh keeps non-trivial face areas over 1000 in-limit poses."""
        rng = np.random.default_rng(0)
        lm = rig.limits
        n = 1000
        coeffs = np.stack(
            [
                rng.uniform(-lm.twist, lm.twist, size=(n, 15)),
                rng.uniform(-lm.splay, lm.splay, size=(n, 15)),
                rng.uniform(lm.bend_lo, lm.bend_hi, size=(n, 15)),
            ],
            axis=-1,
        )
        theta = np.einsum("tjk,jkd->tjd", coeffs, rig.axes)
        states = [hand.HandState(th, [1, 0, 0, 0], [0, 0, 0]) for th in theta]
        verts, _ = hand.fk_sequence(rig, states)
        tri = verts[:, rig.template.faces]  # (n, F, 3, 3)
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[..., 1, :] - tri[..., 0, :], tri[..., 2, :] - tri[..., 0, :]),
            axis=-1,
        )
        assert areas.min() > 1e-7
        assert np.isfinite(verts).all()


class TestAnatomyPenalty:
    def test_zero_inside_limits(self, rig):
        lm = rig.limits
        theta = 0.9 * (lm.twist * rig.axes[:, 0] + lm.splay * rig.axes[:, 1]) \
            + 0.9 * lm.bend_hi * rig.axes[:, 2]
        v, g = hand.anatomy_penalty(rig, hand.HandState(theta, [1, 0, 0, 0], [0, 0, 0]))
        assert v == 0.0
        assert np.allclose(g, 0.0)

    def test_quadratic_excess_single_joint(self, rig):
        theta = np.zeros((15, 3))
        theta[4] = (rig.limits.bend_hi + 0.25) * rig.axes[4, 2]
        v, _ = hand.anatomy_penalty(rig, hand.HandState(theta, [1, 0, 0, 0], [0, 0, 0]))
        assert v == pytest.approx(0.25 ** 2, rel=1e-12)

    def test_gradient_matches_central_differences(self, rig):
        rng = np.random.default_rng(5)
        theta = rng.normal(scale=1.2, size=(15, 3))  # deliberately out of limits
        st = hand.HandState(theta, [1, 0, 0, 0], [0, 0, 0])
        _, grad = hand.anatomy_penalty(rig, st)
        h = 1e-6
        fd = np.zeros_like(grad)
        for j in range(15):
            for d in range(3):
                tp, tm = theta.copy(), theta.copy()
                tp[j, d] += h
                tm[j, d] -= h
                vp, _ = hand.anatomy_penalty(rig, st.replace(theta=tp))
                vm, _ = hand.anatomy_penalty(rig, st.replace(theta=tm))
                fd[j, d] = (vp - vm) / (2 * h)
        denom = max(np.abs(fd).max(), 1e-12)
        assert np.abs(grad - fd).max() / denom < 1e-4

    def test_torch_version_agrees(self, rig):
        rng = np.random.default_rng(9)
        theta = rng.normal(scale=1.0, size=(4, 15, 3))
        vals = hand.anatomy_penalty_torch(rig, torch.tensor(theta)).numpy()
        for i in range(4):
            v, _ = hand.anatomy_penalty(rig, hand.HandState(theta[i], [1, 0, 0, 0], [0, 0, 0]))
            assert vals[i] == pytest.approx(v, rel=1e-10)


class TestInteractionFrame:
    def test_first_strict_local_min(self):
        assert hand.first_strict_local_min(np.array([3.0, 2, 1, 2, 3])) == 2
        assert hand.first_strict_local_min(np.array([3.0, 2, 1, 2, 0.5, 2, 3])) == 2
        # monotone profile: fall back to the global argmin
        assert hand.first_strict_local_min(np.array([4.0, 3, 2, 1])) == 3

    def test_deceleration_into_grasp(self):
        # fingertips sweep in, pause, then retreat: selected frame sits in the pause
        T = 30
        joints = np.zeros((T, 21, 3))
        pos = np.concatenate([
            np.linspace(0, 0.2, 12), np.full(8, 0.2), np.linspace(0.2, 0.05, 10)
        ])
        joints[:, 16:21, 0] = pos[:, None]
        f = hand.select_interaction_frame(joints)
        assert 10 <= f <= 20

    def test_too_short(self):
        with pytest.raises(TooShort):
            hand.select_interaction_frame(np.zeros((2, 21, 3)))
