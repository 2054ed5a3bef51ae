"""Rotations, poses, and the error metrics built on them.

Conventions used throughout the package: quaternions are scalar-first
``(w, x, y, z)`` and canonicalized to the ``w >= 0`` hemisphere; rotation
matrices act on column vectors; angles cross the API in degrees; rotations
travel through networks as the first two matrix columns ("6D" form) and are
re-orthonormalized with Gram-Schmidt on decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EPS_PARALLEL = 1e-8
_EIG_GAP = 1e-9


class DegenerateRotation(ValueError):
    """A 6D rotation input cannot be orthonormalized."""


class DegenerateAverage(ValueError):
    """The quaternion mean has no isolated principal direction.

    Callers that need a pose regardless should fall back to their first
    candidate.
    """


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Map a quaternion to the w >= 0 hemisphere.

    On the w == 0 boundary the first nonzero of (x, y, z) is made
    non-negative so every rotation has exactly one representative.
    """
    q = np.asarray(q, dtype=float)
    if q[0] > 0:
        return q
    if q[0] < 0:
        return -q
    for c in q[1:]:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-norm, canonical-hemisphere copy of ``q``."""
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise ValueError("zero quaternion has no direction")
    return quat_canonical(q / n)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Canonical unit quaternion of a rotation matrix (Shepperd's branches)."""
    r = np.asarray(rot, dtype=float)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def matrix_to_quat_batch(rots: np.ndarray) -> np.ndarray:
    """Vectorized :func:`matrix_to_quat`.

    Each row runs the same Shepperd branch with the same expressions as the
    scalar function; results agree to 1-2 ulp (the unit-norm reduction sums
    in a different order than np.linalg.norm, nothing else differs).
    """
    r = np.asarray(rots, dtype=float)
    q = np.empty((r.shape[0], 4))
    tr = r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    c0 = tr > 0
    c1 = ~c0 & (r[:, 0, 0] >= r[:, 1, 1]) & (r[:, 0, 0] >= r[:, 2, 2])
    c2 = ~c0 & ~c1 & (r[:, 1, 1] >= r[:, 2, 2])
    c3 = ~(c0 | c1 | c2)
    if c0.any():
        rm, s = r[c0], np.sqrt(tr[c0] + 1.0) * 2.0
        q[c0, 0] = 0.25 * s
        q[c0, 1] = (rm[:, 2, 1] - rm[:, 1, 2]) / s
        q[c0, 2] = (rm[:, 0, 2] - rm[:, 2, 0]) / s
        q[c0, 3] = (rm[:, 1, 0] - rm[:, 0, 1]) / s
    if c1.any():
        rm = r[c1]
        s = np.sqrt(1.0 + rm[:, 0, 0] - rm[:, 1, 1] - rm[:, 2, 2]) * 2.0
        q[c1, 0] = (rm[:, 2, 1] - rm[:, 1, 2]) / s
        q[c1, 1] = 0.25 * s
        q[c1, 2] = (rm[:, 0, 1] + rm[:, 1, 0]) / s
        q[c1, 3] = (rm[:, 0, 2] + rm[:, 2, 0]) / s
    if c2.any():
        rm = r[c2]
        s = np.sqrt(1.0 + rm[:, 1, 1] - rm[:, 0, 0] - rm[:, 2, 2]) * 2.0
        q[c2, 0] = (rm[:, 0, 2] - rm[:, 2, 0]) / s
        q[c2, 1] = (rm[:, 0, 1] + rm[:, 1, 0]) / s
        q[c2, 2] = 0.25 * s
        q[c2, 3] = (rm[:, 1, 2] + rm[:, 2, 1]) / s
    if c3.any():
        rm = r[c3]
        s = np.sqrt(1.0 + rm[:, 2, 2] - rm[:, 0, 0] - rm[:, 1, 1]) * 2.0
        q[c3, 0] = (rm[:, 1, 0] - rm[:, 0, 1]) / s
        q[c3, 1] = (rm[:, 0, 2] + rm[:, 2, 0]) / s
        q[c3, 2] = (rm[:, 1, 2] + rm[:, 2, 1]) / s
        q[c3, 3] = 0.25 * s
    # normalization matches quat_normalize: sqrt of the same left-to-right
    # sum of squares, then the w >= 0 hemisphere convention
    n = np.sqrt(np.add.reduce(q * q, axis=1))
    if (n == 0.0).any():
        raise ValueError("zero quaternion has no direction")
    q = q / n[:, None]
    q[q[:, 0] < 0.0] *= -1.0
    for i in np.nonzero(q[:, 0] == 0.0)[0]:  # pragma: no cover - measure zero
        q[i] = quat_canonical(q[i])
    return q


def axis_angle_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (normalized here) by ``angle_rad``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly from SO(3)."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-6:  # pragma: no cover - measure zero
        q = rng.standard_normal(4)
    return quat_to_matrix(quat_normalize(q))


def random_rotation_within(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    """Uniform rotation conditioned on a geodesic angle from identity.

    Rejection-samples :func:`random_rotation` until the angle is within
    ``max_deg``, so the result is uniform over the cone.  ``max_deg >= 180``
    accepts the first draw and consumes exactly the same generator stream as
    an unconditioned call.
    """
    if max_deg <= 0.0:
        raise ValueError("max_deg must be positive")
    eye = np.eye(3)
    while True:
        rot = random_rotation(rng)
        if max_deg >= 180.0 or geodesic_angle_deg(rot, eye) <= max_deg:
            return rot


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt decode of the 6D rotation representation.

    ``r6`` holds two (not necessarily orthonormal) 3-vectors; the first is
    normalized into column one, the second is orthogonalized against it, and
    column three is their cross product.

    Raises:
        DegenerateRotation: if the first vector is near zero or the two
            vectors are near parallel.
    """
    r6 = np.asarray(r6, dtype=float)
    if r6.shape != (6,):
        raise ValueError(f"expected shape (6,), got {r6.shape}")
    a1, a2 = r6[:3], r6[3:]
    n1 = float(np.linalg.norm(a1))
    if n1 <= _EPS_PARALLEL:
        raise DegenerateRotation(f"first 6D column has near-zero norm {n1:.3e}")
    b1 = a1 / n1
    a2p = a2 - float(b1 @ a2) * b1
    n2 = float(np.linalg.norm(a2p))
    if n2 <= _EPS_PARALLEL:
        raise DegenerateRotation("6D columns are near parallel")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(rot: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to shape (6,)."""
    r = np.asarray(rot, dtype=float)
    return np.concatenate([r[:, 0], r[:, 1]])


def rot6d_to_matrix_batch(r6: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized 6D decode that flags instead of raising.

    Returns (rotations (B,3,3), ok (B,)); degenerate rows decode to identity
    with ``ok`` False so rollout loops can assign a worst-case error rather
    than abort on a measure-zero draw.
    """
    r6 = np.asarray(r6, dtype=float)
    a1, a2 = r6[:, :3], r6[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    ok = n1 > _EPS_PARALLEL
    b1 = a1 / np.where(ok, n1, 1.0)[:, None]
    a2p = a2 - np.sum(b1 * a2, axis=1, keepdims=True) * b1
    n2 = np.linalg.norm(a2p, axis=1)
    ok = ok & (n2 > _EPS_PARALLEL)
    b2 = a2p / np.where(n2 > _EPS_PARALLEL, n2, 1.0)[:, None]
    b3 = np.cross(b1, b2)
    rots = np.stack([b1, b2, b3], axis=2)
    if not ok.all():
        rots[~ok] = np.eye(3)
    return rots, ok


# ---------------------------------------------------------------------------
# pose container
# ---------------------------------------------------------------------------

@dataclass
class Pose:
    """Rigid pose as a 6D rotation block plus a translation.

    ``as_vector``/``from_vector`` flatten to the 9-vector the generator works
    in; the split is lossless.
    """

    rot6d: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        self.rot6d = np.asarray(self.rot6d, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.rot6d.shape != (6,) or self.t.shape != (3,):
            raise ValueError("Pose wants rot6d (6,) and t (3,)")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot6d, self.t])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "Pose":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (9,):
            raise ValueError(f"expected shape (9,), got {vec.shape}")
        return cls(vec[:6], vec[6:])

    def matrix(self) -> np.ndarray:
        """Decoded orthonormal rotation matrix."""
        return rot6d_to_matrix(self.rot6d)

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_rot6d(rot), np.asarray(t, dtype=float))

    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.matrix())


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def geodesic_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees.

    Computed as ``arccos(clamp((trace(r1^T r2) - 1) / 2, -1, 1))``; both
    inputs are assumed orthonormal.
    """
    tr = float(np.trace(np.asarray(r1).T @ np.asarray(r2)))
    c = min(1.0, max(-1.0, (tr - 1.0) / 2.0))
    return math.degrees(math.acos(c))


def symmetry_aware_angle_deg(r1: np.ndarray, r2: np.ndarray, axis: np.ndarray) -> float:
    """Angle between the images of a symmetry axis under two rotations.

    Spins about the axis are invisible to this metric, which is the point:
    shapes with a rotational symmetry axis leave that spin unobservable.
    """
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    d1 = np.asarray(r1) @ a
    d2 = np.asarray(r2) @ a
    # atan2 form stays well-conditioned near 0 and 180 degrees
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(d1, d2))), float(d1 @ d2)))


def translation_error(t1: np.ndarray, t2: np.ndarray) -> float:
    """Euclidean distance between two translations."""
    return float(np.linalg.norm(np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float)))


def geodesic_angle_deg_batch(ra: np.ndarray, rb: np.ndarray) -> np.ndarray:
    """Row-wise geodesic angles for stacks of rotations (B,3,3)."""
    tr = np.einsum("bij,bij->b", np.asarray(ra, dtype=float), np.asarray(rb, dtype=float))
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(c))


def symmetry_aware_angle_deg_batch(ra: np.ndarray, rb: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Row-wise symmetry-axis angles for stacks of rotations (B,3,3)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    d1 = np.asarray(ra, dtype=float) @ a
    d2 = np.asarray(rb, dtype=float) @ a
    cross = np.cross(d1, d2)
    return np.degrees(np.arctan2(np.linalg.norm(cross, axis=1), np.sum(d1 * d2, axis=1)))


# ---------------------------------------------------------------------------
# quaternion averaging
# ---------------------------------------------------------------------------

def _jacobi_eigh(mat: np.ndarray, max_sweeps: int = 30, tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Fixed sweep order and a fixed stopping rule keep the result deterministic
    across platforms.  Returns eigenvalues ascending and eigenvectors as
    columns (stable sort, so tied eigenvalues keep sweep order).
    """
    a = np.asarray(mat, dtype=float).copy()
    n = a.shape[0]
    vecs = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[p, q] ** 2 for p in range(n) for q in range(n) if p != q))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                sign = 1.0 if tau >= 0 else -1.0
                t = sign / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                for i in range(n):
                    if i == p or i == q:
                        continue
                    aip, aiq = a[i, p], a[i, q]
                    a[i, p] = a[p, i] = aip * c - aiq * s
                    a[i, q] = a[q, i] = aip * s + aiq * c
                vip = vecs[:, p].copy()
                viq = vecs[:, q].copy()
                vecs[:, p] = vip * c - viq * s
                vecs[:, q] = vip * s + viq * c
    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], vecs[:, order]


def average_quaternions(quats: np.ndarray) -> np.ndarray:
    """Eigen-average of unit quaternions.

    Builds ``M = (1/n) sum q_i q_i^T`` and returns the unit eigenvector with
    the largest eigenvalue, canonicalized to the w >= 0 hemisphere.  The
    outer products make the result exactly invariant to sign flips of any
    input.  Inputs are hemisphere-aligned against the first candidate before
    accumulation.

    Raises:
        DegenerateAverage: when the top two eigenvalues of M coincide within
            1e-9, i.e. there is no single dominant direction.
    """
    qs = np.atleast_2d(np.asarray(quats, dtype=float))
    if qs.shape[0] == 0 or qs.shape[1] != 4:
        raise ValueError(f"expected (n, 4) quaternions, got {qs.shape}")
    norms = np.linalg.norm(qs, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero quaternion in average")
    qs = qs / norms[:, None]
    ref = qs[0]
    dots = qs @ ref
    qs = np.where(dots[:, None] < 0, -qs, qs)
    m = qs.T @ qs / qs.shape[0]
    eigvals, eigvecs = _jacobi_eigh(m)
    if eigvals[-1] - eigvals[-2] <= _EIG_GAP:
        raise DegenerateAverage(
            f"top eigenvalues {eigvals[-1]:.6e} and {eigvals[-2]:.6e} are not separated"
        )
    return quat_canonical(eigvecs[:, -1])
