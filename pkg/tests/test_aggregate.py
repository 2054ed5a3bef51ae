"""Candidate scoring, top-rho selection, and pose aggregation tests.

The quaternion averaging inside aggregate_pose is cross-checked against
numpy's dense eigensolver, which the library itself never calls.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from flowpose import aggregate as ag
from flowpose import flowmatch as fm
from flowpose import geometry as geo
from flowpose import netcore as nc
from flowpose import rlrefine as rl


class ConstCritic:
    """Duck-typed critic with constant heads."""

    def __init__(self, v_rot, v_trans):
        self.v_rot, self.v_trans = v_rot, v_trans

    def values(self, feats, poses, taus):
        n = feats.shape[0]
        return np.full(n, self.v_rot), np.full(n, self.v_trans)


def make_traj(rng, horizon=4):
    poses = rng.standard_normal((horizon + 1, 9))
    return fm.SampleTrajectory(poses, np.diff(poses, axis=0) * horizon)


def pose_from_rotation(rot, t):
    return geo.Pose(geo.matrix_to_rot6d(rot), np.asarray(t, dtype=float))


def make_set(poses, v_rot=None, v_trans=None):
    k = len(poses)
    v_rot = v_rot if v_rot is not None else [0.0] * k
    v_trans = v_trans if v_trans is not None else [0.0] * k
    cands = [ag.ScoredCandidate(p, float(v_rot[i]), float(v_trans[i]), i)
             for i, p in enumerate(poses)]
    return ag.CandidateSet(cands, k, 4)


def eigh_average_oracle(quats):
    """Markley mean via numpy's dense eigensolver (library never calls it)."""
    q = np.stack([qi if qi[0] >= 0 else -qi for qi in quats])
    m = q.T @ q / len(q)
    vals, vecs = np.linalg.eigh(m)
    lead = vecs[:, -1]
    return geo.quat_canonical(lead / np.linalg.norm(lead))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_value_score_constant_critic():
    traj = make_traj(np.random.default_rng(0))
    vr, vt = ag.value_score(ConstCritic(3.5, -1.25), np.zeros(4), traj)
    assert (vr, vt) == (3.5, -1.25)


def test_value_score_identical_trajectories_identical_scores():
    rng = np.random.default_rng(1)
    critic = rl.CriticModel.create(rng, 12, 4, hidden=16)
    feat = rng.standard_normal(12)
    traj = make_traj(rng)
    twin = fm.SampleTrajectory(traj.poses.copy(), traj.velocities.copy())
    assert ag.value_score(critic, feat, traj) == ag.value_score(critic, feat, twin)


def test_value_score_uses_next_to_last_state():
    rng = np.random.default_rng(2)
    critic = rl.CriticModel.create(rng, 12, 4, hidden=16)
    # make the critic non-trivial: fill the zero output layer
    critic.store.params["trunk.W2"][:] = rng.standard_normal((16, 2))
    feat = rng.standard_normal(12)
    traj = make_traj(rng, horizon=5)
    vr, vt = ag.value_score(critic, feat, traj)
    want_r, want_t = critic.values(feat[None], traj.poses[4][None], 4 / 5)
    assert vr == float(want_r[0]) and vt == float(want_t[0])
    # knob moves the scored state; out-of-range indices are rejected
    assert ag.value_score(critic, feat, traj, step_index=0) != (vr, vt)
    with pytest.raises(ValueError):
        ag.value_score(critic, feat, traj, step_index=5)


def test_score_candidates_matches_direct_forward_oracle():
    rng = np.random.default_rng(3)
    critic = rl.CriticModel.create(rng, 12, 4, hidden=16)
    critic.store.params["trunk.W2"][:] = rng.standard_normal((16, 2))
    feat = rng.standard_normal(12)
    trajs = [make_traj(rng, horizon=6) for _ in range(8)]
    cset = ag.score_candidates(critic, feat, trajs)
    assert cset.k == 8 and cset.h_steps == 6
    for i, traj in enumerate(trajs):
        x = np.concatenate([feat, traj.poses[5], nc.time_embed(5 / 6, 4)])
        out, _ = nc.mlp_forward(critic.store, critic.trunk_spec, "trunk", x[None])
        assert abs(cset.candidates[i].v_rot - out[0, 0]) < 1e-12
        assert abs(cset.candidates[i].v_trans - out[0, 1]) < 1e-12
        assert np.array_equal(cset.candidates[i].pose.as_vector(), traj.poses[-1])


def test_unscored_candidates_are_zero_scored():
    rng = np.random.default_rng(4)
    cset = ag.unscored_candidates([make_traj(rng) for _ in range(3)])
    assert all(c.v_rot == 0.0 and c.v_trans == 0.0 for c in cset.candidates)
    assert [c.index for c in cset.candidates] == [0, 1, 2]


def test_candidate_set_count_invariant():
    with pytest.raises(ValueError):
        ag.CandidateSet([], 2, 4)


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def test_select_top_rho_one_keeps_all():
    cset = make_set([pose_from_rotation(np.eye(3), [0, 0, 0])] * 5,
                    v_rot=[3, 1, 4, 1, 5])
    assert len(ag.select_top(cset, "rot", 1.0)) == 5


def test_select_top_counts_and_floor():
    poses = [pose_from_rotation(np.eye(3), [0, 0, 0])] * 10
    cset = make_set(poses, v_rot=list(range(10)))
    assert len(ag.select_top(cset, "rot", 0.6)) == 6
    assert len(ag.select_top(cset, "rot", 0.05)) == 1  # ceil floor of one
    top = ag.select_top(cset, "rot", 0.3)
    assert [c.index for c in top] == [9, 8, 7]  # descending score


def test_select_top_tie_break_by_index():
    poses = [pose_from_rotation(np.eye(3), [0, 0, 0])] * 6
    cset = make_set(poses, v_trans=[1.0] * 6)
    top = ag.select_top(cset, "trans", 0.5)
    assert [c.index for c in top] == [0, 1, 2]


def test_select_top_input_order_invariance():
    rng = np.random.default_rng(5)
    poses = [pose_from_rotation(geo.random_rotation(rng), rng.standard_normal(3))
             for _ in range(9)]
    scores = rng.standard_normal(9)
    cset = make_set(poses, v_rot=scores)
    shuffled = list(cset.candidates)
    rng.shuffle(shuffled)
    a = [c.index for c in ag.select_top(cset, "rot", 0.4)]
    b = [c.index for c in ag.select_top(shuffled, "rot", 0.4)]
    assert a == b


def test_select_top_validation():
    cset = make_set([pose_from_rotation(np.eye(3), [0, 0, 0])])
    with pytest.raises(ValueError):
        ag.select_top(cset, "rot", 0.0)
    with pytest.raises(ValueError):
        ag.select_top(cset, "rot", 1.2)
    with pytest.raises(ValueError):
        ag.select_top(cset, "yaw", 0.5)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_aggregate_identical_candidates_returns_that_pose():
    rng = np.random.default_rng(6)
    rot = geo.random_rotation(rng)
    t = rng.standard_normal(3)
    cset = make_set([pose_from_rotation(rot, t)] * 4)
    out = ag.aggregate_pose(cset, 1.0)
    assert np.allclose(out.matrix(), rot, atol=1e-12)
    assert np.allclose(out.t, t, atol=1e-12)


def test_aggregate_translation_mean():
    poses = [pose_from_rotation(np.eye(3), [0.0, 0.0, 0.0]),
             pose_from_rotation(np.eye(3), [2.0, 2.0, 2.0])]
    out = ag.aggregate_pose(make_set(poses), 1.0)
    assert np.array_equal(out.t, np.array([1.0, 1.0, 1.0]))


def test_aggregate_subsets_selected_independently():
    # best rotation candidate is the worst translation candidate and vice
    # versa; with rho=0.5 each modality must pick its own winner
    rot_good = np.eye(3)
    rot_bad = geo.axis_angle_matrix(np.array([1.0, 0.0, 0.0]), 0.5)
    poses = [pose_from_rotation(rot_good, [9.0, 0.0, 0.0]),
             pose_from_rotation(rot_bad, [1.0, 0.0, 0.0])]
    cset = make_set(poses, v_rot=[1.0, 0.0], v_trans=[0.0, 1.0])
    out = ag.aggregate_pose(cset, 0.5)
    assert np.allclose(out.matrix(), rot_good, atol=1e-12)
    assert np.allclose(out.t, [1.0, 0.0, 0.0], atol=1e-15)


def test_aggregate_clustered_rotations_match_eigen_oracle():
    rng = np.random.default_rng(7)
    base = geo.random_rotation(rng)
    q0 = geo.matrix_to_quat(base)
    poses, errs = [], []
    for _ in range(50):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(0, math.radians(5.0))
        rot = base @ geo.axis_angle_matrix(axis, ang)
        poses.append(pose_from_rotation(rot, rng.standard_normal(3) * 0.01))
        errs.append(ang)
    cset = make_set(poses, v_rot=[-e for e in errs], v_trans=[0.0] * 50)
    out = ag.aggregate_pose(cset, 0.6)
    assert geo.geodesic_angle_deg(out.matrix(), base) < 2.0
    subset = ag.select_top(cset, "rot", 0.6)
    want = eigh_average_oracle(np.stack([c.pose.quaternion() for c in subset]))
    got = geo.matrix_to_quat(out.matrix())
    assert np.allclose(got, want, atol=1e-8)


def test_aggregate_candidate_order_invariance():
    rng = np.random.default_rng(8)
    poses = [pose_from_rotation(geo.random_rotation(rng), rng.standard_normal(3))
             for _ in range(7)]
    scores = rng.standard_normal(7)
    cset = make_set(poses, v_rot=scores, v_trans=scores[::-1])
    shuffled = list(cset.candidates)
    rng.shuffle(shuffled)
    a = ag.aggregate_pose(cset, 0.5)
    b = ag.aggregate_pose(shuffled, 0.5)
    assert np.array_equal(a.as_vector(), b.as_vector())


def test_aggregate_invariant_to_rot6d_representation_scale():
    # scaling the raw 6D columns leaves the decoded rotation unchanged,
    # so the aggregate must not move either
    rng = np.random.default_rng(9)
    rots = [geo.random_rotation(rng) for _ in range(5)]
    plain = [pose_from_rotation(r, np.zeros(3)) for r in rots]
    scaled = [geo.Pose(p.rot6d * 3.0, p.t) for p in plain]
    a = ag.aggregate_pose(make_set(plain), 1.0)
    b = ag.aggregate_pose(make_set(scaled), 1.0)
    assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_aggregate_opposed_rotations_degenerate():
    poses = [pose_from_rotation(np.eye(3), np.zeros(3)),
             pose_from_rotation(geo.axis_angle_matrix(np.array([0.0, 0.0, 1.0]), math.pi),
                                np.zeros(3))]
    with pytest.raises(geo.DegenerateAverage):
        ag.aggregate_pose(make_set(poses), 1.0)


def test_oracle_scores_beat_median_candidate():
    # scores = negative true errors: the aggregate should do no worse than
    # the median candidate on either modality
    rng = np.random.default_rng(10)
    for trial in range(10):
        base = geo.random_rotation(rng)
        t_gt = rng.standard_normal(3) * 0.3
        poses, rot_errs, t_errs = [], [], []
        for _ in range(20):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            ang = rng.uniform(0, math.radians(30.0))
            rot = base @ geo.axis_angle_matrix(axis, ang)
            t = t_gt + rng.standard_normal(3) * 0.05
            poses.append(pose_from_rotation(rot, t))
            rot_errs.append(geo.geodesic_angle_deg(rot, base))
            t_errs.append(float(np.linalg.norm(t - t_gt)))
        cset = make_set(poses, v_rot=[-e for e in rot_errs], v_trans=[-e for e in t_errs])
        out = ag.aggregate_pose(cset, 0.4)
        assert geo.geodesic_angle_deg(out.matrix(), base) <= np.median(rot_errs) + 1e-9
        assert np.linalg.norm(out.t - t_gt) <= np.median(t_errs) + 1e-9


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------

def test_candidate_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    poses = [pose_from_rotation(geo.random_rotation(rng), rng.standard_normal(3))
             for _ in range(4)]
    cset = make_set(poses, v_rot=rng.standard_normal(4), v_trans=rng.standard_normal(4))
    path = tmp_path / "cands.txt"
    ag.write_candidates(path, cset)
    back, errors = ag.read_candidates(path)
    assert errors is None and back.k == 4 and back.h_steps == 4
    for a, b in zip(cset.candidates, back.candidates):
        assert a.index == b.index
        assert a.v_rot == b.v_rot and a.v_trans == b.v_trans
        assert np.array_equal(a.pose.t, b.pose.t)
        assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-12)


def test_candidate_dump_with_errors_and_validation(tmp_path):
    poses = [pose_from_rotation(np.eye(3), np.zeros(3))] * 2
    cset = make_set(poses)
    path = tmp_path / "cands_err.txt"
    ag.write_candidates(path, cset, gt_errors=[(1.5, 0.25), (3.0, 1.0)])
    back, errors = ag.read_candidates(path)
    assert errors == [(1.5, 0.25), (3.0, 1.0)]
    with pytest.raises(ValueError):
        ag.write_candidates(path, cset, gt_errors=[(1.0, 1.0)])
    bad = tmp_path / "bad.txt"
    bad.write_text("something else\n")
    with pytest.raises(ValueError):
        ag.read_candidates(bad)
