"""Value-guided aggregation of pose candidates (stage 3).

K candidate trajectories per instance yield K final poses.  The retained
critic scores each candidate's next-to-last state (pose p_{H-1} at time
(H-1)/H) with both heads, giving disentangled rotation and translation
confidences.  Ranking keeps the top ceil(rho K) candidates per modality
independently; the surviving rotations are eigen-averaged as quaternions and
the surviving translations are averaged Euclideanly, and the two results are
recombined into the final pose.

Scores only rank; they never weight the averages.  Candidate diversity comes
from the N(0, I) trajectory starts — inference rollouts use the policy mean
(no exploration noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    DegenerateRotation,
    Pose,
    average_quaternions,
    matrix_to_quat_batch,
    matrix_to_rot6d,
    quat_to_matrix,
    rot6d_to_matrix_batch,
)

FORMAT_TAG = "flowpose-candidates"
FORMAT_VERSION = 1


@dataclass
class ScoredCandidate:
    """One final pose with its critic confidences and draw index."""

    pose: Pose
    v_rot: float
    v_trans: float
    index: int


@dataclass
class CandidateSet:
    """All K candidates of one instance, tagged with their sampling setup."""

    candidates: list[ScoredCandidate]
    k: int
    h_steps: int

    def __post_init__(self) -> None:
        if len(self.candidates) != self.k:
            raise ValueError(f"expected {self.k} candidates, got {len(self.candidates)}")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def value_score(critic, feat: np.ndarray, trajectory,
                step_index: int | None = None) -> tuple[float, float]:
    """Critic heads applied to one trajectory's scored state.

    The scored state defaults to step index H-1 (the last state with a
    defined value; the terminal value is 0 by convention).  ``feat`` must be
    the feature of the cloud under the critic's own encoder.
    """
    h = trajectory.horizon
    idx = h - 1 if step_index is None else step_index
    if not 0 <= idx < h:
        raise ValueError(f"step index {idx} outside horizon {h}")
    v_rot, v_trans = critic.values(feat[None], trajectory.poses[idx][None], idx / h)
    return float(v_rot[0]), float(v_trans[0])


def score_candidates(critic, feat: np.ndarray, trajectories,
                     step_index: int | None = None) -> CandidateSet:
    """One batched critic pass over every trajectory's scored state."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories to score")
    h = trajectories[0].horizon
    idx = h - 1 if step_index is None else step_index
    if not 0 <= idx < h:
        raise ValueError(f"step index {idx} outside horizon {h}")
    poses = np.stack([traj.poses[idx] for traj in trajectories])
    feats = np.broadcast_to(np.asarray(feat, dtype=float), (len(trajectories), feat.shape[-1]))
    v_rot, v_trans = critic.values(feats, poses, idx / h)
    cands = [ScoredCandidate(Pose.from_vector(traj.poses[-1]), float(v_rot[i]),
                             float(v_trans[i]), i)
             for i, traj in enumerate(trajectories)]
    return CandidateSet(cands, len(cands), h)


def unscored_candidates(trajectories) -> CandidateSet:
    """Candidates with zero scores, for paths that never consult a critic."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories")
    cands = [ScoredCandidate(Pose.from_vector(traj.poses[-1]), 0.0, 0.0, i)
             for i, traj in enumerate(trajectories)]
    return CandidateSet(cands, len(cands), trajectories[0].horizon)


# ---------------------------------------------------------------------------
# selection and averaging
# ---------------------------------------------------------------------------

def _as_list(candidates) -> list[ScoredCandidate]:
    return list(candidates.candidates) if isinstance(candidates, CandidateSet) else list(candidates)


def select_top(candidates, key: str, rho: float) -> list[ScoredCandidate]:
    """Top ceil(rho K) candidates by one score, ties broken by draw index.

    Sorting is descending and stable, so equal scores keep ascending index
    order and the result does not depend on input order.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if key not in ("rot", "trans"):
        raise ValueError(f"key must be 'rot' or 'trans', got {key!r}")
    cands = _as_list(candidates)
    n = max(1, math.ceil(rho * len(cands)))
    score = (lambda c: c.v_rot) if key == "rot" else (lambda c: c.v_trans)
    ranked = sorted(cands, key=lambda c: (-score(c), c.index))
    return ranked[:n]


def aggregate_pose(candidates, rho: float = 1.0) -> Pose:
    """Decoupled top-rho aggregation into one pose.

    The rotation average runs over the rot-ranked subset, the translation
    mean over the trans-ranked subset; the subsets are chosen independently.
    With rho = 1 every candidate survives both rankings, which is the plain
    (score-free) mean aggregation.

    Raises:
        DegenerateAverage: the surviving rotations have no unique mean.
    """
    rot_subset = select_top(candidates, "rot", rho)
    trans_subset = select_top(candidates, "trans", rho)
    # batched decode: one call instead of a per-candidate Python loop, since
    # this sits on the latency-measured inference path
    rots, ok = rot6d_to_matrix_batch(np.stack([c.pose.rot6d for c in rot_subset]))
    if not ok.all():
        raise DegenerateRotation("candidate rotation decode degenerated")
    q_mean = average_quaternions(matrix_to_quat_batch(rots))
    t_mean = np.stack([c.pose.t for c in trans_subset]).mean(axis=0)
    return Pose(matrix_to_rot6d(quat_to_matrix(q_mean)), t_mean)


# ---------------------------------------------------------------------------
# candidate dumps (ranking-ablation interchange format)
# ---------------------------------------------------------------------------

def write_candidates(path, cset: CandidateSet, gt_errors=None) -> None:
    """Structured-text dump of one candidate set.

    ``gt_errors`` is an optional list of (rotation deg, translation cm) pairs
    aligned with the candidates; rows carry them when given.  Floats are
    written with repr so a reload is bit-exact.
    """
    if gt_errors is not None and len(gt_errors) != cset.k:
        raise ValueError("gt_errors length must match the candidate count")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_TAG} v{FORMAT_VERSION}\n")
        fh.write(f"k {cset.k} h {cset.h_steps} errors {int(gt_errors is not None)}\n")
        for i, c in enumerate(cset.candidates):
            q = c.pose.quaternion()
            fields = [str(c.index), *(repr(float(v)) for v in q),
                      *(repr(float(v)) for v in c.pose.t),
                      repr(float(c.v_rot)), repr(float(c.v_trans))]
            if gt_errors is not None:
                fields += [repr(float(gt_errors[i][0])), repr(float(gt_errors[i][1]))]
            fh.write(" ".join(fields) + "\n")


def read_candidates(path):
    """Parse a dump back to (CandidateSet, gt_errors or None).

    Rotations come back through the quaternion, so poses round-trip up to the
    rot6d->quaternion conversion; scores and translations are bit-exact.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:1] != [FORMAT_TAG] or header[1:2] != [f"v{FORMAT_VERSION}"]:
            raise ValueError(f"not a {FORMAT_TAG} v{FORMAT_VERSION} file")
        meta = fh.readline().split()
        k, h_steps, with_errors = int(meta[1]), int(meta[3]), bool(int(meta[5]))
        cands, errors = [], []
        for _ in range(k):
            parts = fh.readline().split()
            idx = int(parts[0])
            quat = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            pose = Pose(matrix_to_rot6d(quat_to_matrix(quat)), t)
            cands.append(ScoredCandidate(pose, float(parts[8]), float(parts[9]), idx))
            if with_errors:
                errors.append((float(parts[10]), float(parts[11])))
    return CandidateSet(cands, k, h_steps), (errors if with_errors else None)
