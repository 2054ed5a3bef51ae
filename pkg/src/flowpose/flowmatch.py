"""Conditional flow matching over 9-D pose vectors.

The generator learns a velocity field on linear interpolants between
Gaussian noise and ground-truth poses, conditioned on a point-cloud feature
and a time embedding.  Sampling integrates that field with a fixed-step
Euler scheme from fresh noise; every trajectory step is one network call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netcore as nc
from .geometry import Pose, random_rotation_within
from .seeding import derive_rng

POSE_DIM = 9

DEFAULT_FEAT_DIM = 128
DEFAULT_TIME_DIM = 32
DEFAULT_HIDDEN = 256


class NonFiniteVelocity(nc.NumericalError):
    """The sampler produced NaN/Inf velocities."""


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class FlowModel:
    """Point-cloud encoder plus conditioned velocity head in one ParamStore.

    Parameter names are prefixed ``enc.`` and ``head.`` so checkpoints can
    rebuild the layer specs from tensor shapes alone.
    """

    store: nc.ParamStore
    feat_dim: int
    time_dim: int
    enc_spec: nc.MLPSpec
    head_spec: nc.MLPSpec

    @classmethod
    def create(cls, rng: np.random.Generator, feat_dim: int = DEFAULT_FEAT_DIM,
               time_dim: int = DEFAULT_TIME_DIM, hidden: int = DEFAULT_HIDDEN) -> "FlowModel":
        store = nc.ParamStore()
        enc_spec = nc.encoder_init(store, feat_dim, "enc", rng)
        head_spec = nc.MLPSpec((feat_dim + POSE_DIM + time_dim, hidden, hidden, POSE_DIM))
        # zero-init final layer: the untrained field is the zero map
        nc.mlp_init(store, head_spec, "head", rng, zero_final=True)
        return cls(store, feat_dim, time_dim, enc_spec, head_spec)

    # -- encoding ------------------------------------------------------------

    def encode_with_cache(self, clouds: np.ndarray):
        return nc.encode_batch(self.store, self.enc_spec, "enc", clouds)

    def encode(self, clouds: np.ndarray) -> np.ndarray:
        feats, _ = self.encode_with_cache(clouds)
        return feats

    def encode_cloud(self, cloud: np.ndarray) -> np.ndarray:
        """Feature for a single (3, N) cloud."""
        return self.encode(np.asarray(cloud, dtype=float)[None])[0]

    # -- velocity head -------------------------------------------------------

    def head_input(self, feats: np.ndarray, poses: np.ndarray, taus) -> np.ndarray:
        taus = np.broadcast_to(np.asarray(taus, dtype=float), (feats.shape[0],))
        temb = nc.time_embed_batch(taus, self.time_dim)
        return np.concatenate([feats, poses, temb], axis=1)

    def velocity_with_cache(self, feats: np.ndarray, poses: np.ndarray, taus):
        x = self.head_input(feats, poses, taus)
        return nc.mlp_forward(self.store, self.head_spec, "head", x)

    def velocity(self, feats: np.ndarray, poses: np.ndarray, taus) -> np.ndarray:
        v, _ = self.velocity_with_cache(feats, poses, taus)
        return v

    def backward(self, enc_cache, head_cache, dv: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a loss with upstream ``dv`` w.r.t. every parameter."""
        dx, grads = nc.mlp_backward(self.store, self.head_spec, "head", head_cache, dv)
        dfeats = dx[:, : self.feat_dim]
        grads.update(nc.encode_batch_backward(self.store, self.enc_spec, "enc", enc_cache, dfeats))
        return grads

    def copy(self) -> "FlowModel":
        return FlowModel(self.store.copy(), self.feat_dim, self.time_dim, self.enc_spec, self.head_spec)


def save_flow_model(model: FlowModel, path) -> None:
    nc.write_checkpoint(path, model.store.params)


def load_flow_model(path) -> FlowModel:
    """Rebuild a FlowModel from a checkpoint, inferring dims from shapes."""
    store = nc.store_from_tensors(nc.read_checkpoint(path))
    feat_dim = store["enc.W1"].shape[1]
    n_head = sum(1 for name in store.names() if name.startswith("head.W"))
    widths = [store["head.W0"].shape[0]]
    widths += [store[f"head.W{i}"].shape[1] for i in range(n_head)]
    time_dim = widths[0] - feat_dim - POSE_DIM
    return FlowModel(store, feat_dim, time_dim, nc.encoder_spec(feat_dim), nc.MLPSpec(tuple(widths)))


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

def interpolate(p0: np.ndarray, p1: np.ndarray, t) -> np.ndarray:
    """Linear interpolant (1 - t) p0 + t p1 (t broadcast over rows)."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * p0 + t * p1

def target_velocity(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Straight-path target p1 - p0, independent of t."""
    return p1 - p0


@dataclass
class FmDraws:
    """The (t, p0) draws used by one loss evaluation, kept for test oracles."""

    ts: np.ndarray
    p0s: np.ndarray


def fm_loss_and_grads(model, clouds: np.ndarray, gt_vectors: np.ndarray,
                      rng: np.random.Generator):
    """Flow-matching regression loss and parameter gradients for one batch.

    Per item: t ~ U(0,1), p0 ~ N(0,I); the squared residual between the
    predicted velocity at the interpolant and ``p1 - p0`` is summed over pose
    dims and averaged over the batch.  Returns (loss, grads, draws).
    """
    b = clouds.shape[0]
    ts = rng.uniform(0.0, 1.0, b)
    p0s = rng.standard_normal((b, POSE_DIM))
    p1s = np.asarray(gt_vectors, dtype=float)
    xt = interpolate(p0s, p1s, ts)
    feats, enc_cache = model.encode_with_cache(clouds)
    pred, head_cache = model.velocity_with_cache(feats, xt, ts)
    residual = pred - target_velocity(p0s, p1s)
    loss = float((residual**2).sum(axis=1).mean())
    grads = model.backward(enc_cache, head_cache, 2.0 * residual / b)
    return loss, grads, FmDraws(ts, p0s)


@dataclass
class FlowTrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    feat_dim: int = DEFAULT_FEAT_DIM
    time_dim: int = DEFAULT_TIME_DIM
    hidden: int = DEFAULT_HIDDEN
    # Replace each batch item with a randomly rotated copy (cloud and pose
    # label rotated together).  A rigid rotation of an observation is another
    # valid sample of the same scene, so this gives fresh orientation
    # coverage from a finite dataset and blocks per-cloud memorization.
    # ``augment_max_deg`` bounds the extra rotation; 180 means unrestricted.
    augment_rotations: bool = False
    augment_max_deg: float = 180.0


def augment_batch_rotations(clouds: np.ndarray, gts: np.ndarray,
                            rng: np.random.Generator,
                            max_deg: float = 180.0):
    """Apply one random rigid rotation per item to cloud and pose label.

    The pose vector is three 3-blocks (two rotation columns and the
    normalized translation); each block transforms by the same rotation.
    Returns fresh arrays; the inputs are left untouched.
    """
    b = clouds.shape[0]
    rots = np.stack([random_rotation_within(rng, max_deg) for _ in range(b)])
    new_clouds = np.einsum("bij,bjn->bin", rots, clouds)
    blocks = np.asarray(gts, dtype=float).reshape(b, 3, 3)
    new_gts = np.einsum("bij,bkj->bki", rots, blocks).reshape(b, 9)
    return new_clouds, new_gts


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, total_epochs)))


def train_flow(dataset, cfg: FlowTrainConfig):
    """Train a fresh FlowModel on a dataset; returns (model, loss curve).

    Fully deterministic under ``cfg.seed``: init and batch order come from
    derived streams.  The curve holds one (epoch, mean loss) row per epoch.
    """
    clouds = dataset.clouds()
    gts = dataset.gt_vectors()
    m = clouds.shape[0]
    model = FlowModel.create(derive_rng(cfg.seed, "flow.init"),
                             cfg.feat_dim, cfg.time_dim, cfg.hidden)
    rng = derive_rng(cfg.seed, "flow.train")
    curve: list[tuple[int, float]] = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        perm = rng.permutation(m)
        total = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch_clouds, batch_gts = clouds[idx], gts[idx]
            if cfg.augment_rotations:
                batch_clouds, batch_gts = augment_batch_rotations(
                    batch_clouds, batch_gts, rng, cfg.augment_max_deg)
            loss, grads, _ = fm_loss_and_grads(model, batch_clouds, batch_gts, rng)
            nc.adam_step(model.store, grads, lr)
            total += loss * idx.size
        curve.append((epoch, total / m))
    return model, curve


def write_loss_curve(path, curve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in curve:
            fh.write(f"{epoch},{loss!r}\n")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleTrajectory:
    """One Euler integration: poses (H+1, 9) and the velocities that drove it.

    ``poses[h + 1]`` is exactly ``poses[h] + velocities[h] / H`` as floating
    point operations; ``verify_euler_identity`` re-evaluates that expression.
    """

    poses: np.ndarray
    velocities: np.ndarray

    @property
    def p0(self) -> np.ndarray:
        return self.poses[0]

    @property
    def horizon(self) -> int:
        return self.velocities.shape[0]

    def final_pose_vector(self) -> np.ndarray:
        return self.poses[-1]

    def final_pose(self) -> Pose:
        return Pose.from_vector(self.poses[-1])

    def verify_euler_identity(self) -> bool:
        h = self.horizon
        for i in range(h):
            if not np.array_equal(self.poses[i] + self.velocities[i] / h, self.poses[i + 1]):
                return False
        return True


def rollout_batch(model, feat: np.ndarray, p0s: np.ndarray, h_steps: int):
    """Integrate K trajectories in lockstep from one cached cloud feature.

    Returns (poses (K, H+1, 9), velocities (K, H, 9)).

    Raises:
        NonFiniteVelocity: the field produced NaN/Inf at some step.
    """
    if h_steps < 1:
        raise ValueError("h_steps must be >= 1")
    k = p0s.shape[0]
    feats = np.broadcast_to(np.asarray(feat, dtype=float), (k, feat.shape[-1]))
    poses = np.empty((k, h_steps + 1, POSE_DIM))
    vels = np.empty((k, h_steps, POSE_DIM))
    poses[:, 0] = p0s
    p = np.asarray(p0s, dtype=float)
    for h in range(h_steps):
        v = model.velocity(feats, p, h / h_steps)
        if not np.isfinite(v).all():
            raise NonFiniteVelocity(f"non-finite velocity at step {h}/{h_steps}")
        p = p + v / h_steps
        poses[:, h + 1] = p
        vels[:, h] = v
    return poses, vels


def euler_sample(model, cloud: np.ndarray, h_steps: int, p0: np.ndarray) -> SampleTrajectory:
    """Single trajectory from ``p0`` conditioned on one (3, N) cloud."""
    feat = model.encode_cloud(cloud)
    poses, vels = rollout_batch(model, feat, np.asarray(p0, dtype=float)[None], h_steps)
    return SampleTrajectory(poses[0], vels[0])


def sample_candidates(model, cloud: np.ndarray, k: int, h_steps: int,
                      rng: np.random.Generator) -> list[SampleTrajectory]:
    """K trajectories from independent N(0, I) starts; the cloud is encoded once."""
    if k < 1:
        raise ValueError("k must be >= 1")
    feat = model.encode_cloud(cloud)
    p0s = rng.standard_normal((k, POSE_DIM))
    poses, vels = rollout_batch(model, feat, p0s, h_steps)
    return [SampleTrajectory(poses[i], vels[i]) for i in range(k)]
