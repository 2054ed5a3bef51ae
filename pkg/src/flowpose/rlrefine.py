"""PPO refinement of a trained flow sampler (stage 2).

The Euler sampler is recast as an MDP: the state is (cloud feature, current
pose 9-vector, step index), the action is the velocity the policy emits, and
the transition is the Euler step p_{h+1} = p_h + a/H.  The policy is the flow
model itself (copied, then fine-tuned) with a fixed isotropic exploration
sigma.  Two value heads on a shared critic trunk score the rotation and
translation quality of a state separately; their GAE advantages are averaged
into the joint advantage that drives a standard clipped PPO update.

Rewards are dense: after every action the pose reached is decoded and scored
against the ground truth with exp(-error/tau) plus a +1 bonus strictly below
the precision threshold, per modality.  Future rewards are not discounted
(gamma = 1); the value beyond the horizon is defined to be 0.

Trajectory starts (instance choice and the N(0, I) initial pose) are drawn
from a fresh named stream every iteration; exploration noise and minibatch
shuffling use per-iteration streams as well.  Two optional regularizers keep
the refined field usable on coarser Euler grids than its rollout grid:
``horizon_mix`` cycles the rollout length itself, and ``anchor`` adds a
squared pull of the policy mean toward the frozen pretrained field.
Point-cloud encoders are frozen during refinement by default (features are
precomputed once); set ``finetune_encoder`` to backpropagate into them as
well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import netcore as nc
from .flowmatch import FlowModel, POSE_DIM, NonFiniteVelocity
from .geometry import (
    geodesic_angle_deg_batch,
    quat_to_matrix,
    rot6d_to_matrix_batch,
    symmetry_aware_angle_deg_batch,
)
from .seeding import derive_rng

_Z_AXIS = np.array([0.0, 0.0, 1.0])
DEFAULT_CRITIC_HIDDEN = 256


class NonFiniteLoss(nc.NumericalError):
    """A PPO minibatch produced a NaN/Inf loss; the update is aborted."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PpoConfig:
    iterations: int = 50
    trajectories: int = 64      # rollouts per iteration
    horizon: int = 20
    # Rollout horizons cycled across iterations; empty means every iteration
    # uses ``horizon``.  Training on one grid alone specializes the refined
    # field to it: the 20-step policy integrates badly with 5 Euler steps
    # even when the underlying flow does not.
    horizon_mix: tuple = ()
    # Squared-deviation pull of the policy mean toward the frozen pretrained
    # field at the visited states.  Unregularized refinement bends the field
    # into something only its own rollout grid integrates well; the anchor
    # keeps it near the straighter pretrained field, which stays accurate
    # under coarser Euler grids.
    anchor: float = 0.0
    sigma: float = 0.2          # fixed exploration std on every action dim
    clip_eps: float = 0.2
    epochs: int = 4             # optimization passes per collected batch
    minibatch: int = 256        # steps per minibatch
    policy_lr: float = 3e-5
    critic_lr: float = 3e-4
    lam: float = 0.95           # GAE lambda (gamma is hard-coded to 1)
    tau_rot_deg: float = 5.0
    tau_trans: float = 0.05     # scene units
    bonus: float = 1.0
    value_target: str = "lambda-return"   # or "advantage" (literal ablation)
    critic_encoder_init: str = "flow"     # or "fresh"
    finetune_encoder: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.trajectories < 1 or self.horizon < 1:
            raise ValueError("iterations, trajectories and horizon must be >= 1")
        if any(int(h) < 1 for h in self.horizon_mix):
            raise ValueError("horizon_mix entries must be >= 1")
        if self.anchor < 0:
            raise ValueError("anchor must be >= 0")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.tau_rot_deg <= 0 or self.tau_trans <= 0:
            raise ValueError("precision thresholds must be positive")
        if self.value_target not in ("lambda-return", "advantage"):
            raise ValueError(f"unknown value_target {self.value_target!r}")
        if self.critic_encoder_init not in ("flow", "fresh"):
            raise ValueError(f"unknown critic_encoder_init {self.critic_encoder_init!r}")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class PolicyModel:
    """A FlowModel acting as the mean of a fixed-sigma Gaussian policy."""

    net: FlowModel
    sigma: float

    @classmethod
    def from_flow(cls, flow: FlowModel, sigma: float) -> "PolicyModel":
        store = nc.store_from_tensors(flow.store.params)  # fresh optimizer state
        net = FlowModel(store, flow.feat_dim, flow.time_dim, flow.enc_spec, flow.head_spec)
        return cls(net, sigma)


@dataclass
class CriticModel:
    """Shared-trunk state-value network with rotation and translation heads.

    The trunk is a single MLP whose two output units are the scalar heads
    V^rot and V^trans; every hidden layer is shared, so both heads consume the
    identical state encoding.  The critic owns its point-cloud encoder
    (weights are copied from the flow encoder at creation by default).
    """

    store: nc.ParamStore
    feat_dim: int
    time_dim: int
    enc_spec: nc.MLPSpec
    trunk_spec: nc.MLPSpec

    @classmethod
    def create(cls, rng: np.random.Generator, feat_dim: int, time_dim: int,
               hidden: int = DEFAULT_CRITIC_HIDDEN,
               encoder_from: nc.ParamStore | None = None) -> "CriticModel":
        store = nc.ParamStore()
        enc_spec = nc.encoder_spec(feat_dim)
        if encoder_from is not None:
            for i in range(len(enc_spec.widths) - 1):
                store.add(f"enc.W{i}", encoder_from[f"enc.W{i}"].copy())
                store.add(f"enc.b{i}", encoder_from[f"enc.b{i}"].copy())
        else:
            nc.mlp_init(store, enc_spec, "enc", rng)
        trunk_spec = nc.MLPSpec((feat_dim + POSE_DIM + time_dim, hidden, hidden, 2))
        # zero-init the output layer: an untrained critic predicts V = 0
        nc.mlp_init(store, trunk_spec, "trunk", rng, zero_final=True)
        return cls(store, feat_dim, time_dim, enc_spec, trunk_spec)

    def encode(self, clouds: np.ndarray) -> np.ndarray:
        feats, _ = nc.encode_batch(self.store, self.enc_spec, "enc", clouds)
        return feats

    def head_input(self, feats: np.ndarray, poses: np.ndarray, taus) -> np.ndarray:
        taus = np.broadcast_to(np.asarray(taus, dtype=float), (feats.shape[0],))
        temb = nc.time_embed_batch(taus, self.time_dim)
        return np.concatenate([feats, poses, temb], axis=1)

    def forward_with_cache(self, feats: np.ndarray, poses: np.ndarray, taus):
        x = self.head_input(feats, poses, taus)
        return nc.mlp_forward(self.store, self.trunk_spec, "trunk", x)

    def values(self, feats: np.ndarray, poses: np.ndarray, taus) -> tuple[np.ndarray, np.ndarray]:
        """(V^rot, V^trans) for a batch of states."""
        out, _ = self.forward_with_cache(feats, poses, taus)
        return out[:, 0], out[:, 1]


def save_critic(critic: CriticModel, path) -> None:
    nc.write_checkpoint(path, critic.store.params)


def load_critic(path) -> CriticModel:
    """Rebuild a CriticModel from a checkpoint, inferring dims from shapes."""
    store = nc.store_from_tensors(nc.read_checkpoint(path))
    feat_dim = store["enc.W1"].shape[1]
    n_trunk = sum(1 for name in store.names() if name.startswith("trunk.W"))
    widths = [store["trunk.W0"].shape[0]]
    widths += [store[f"trunk.W{i}"].shape[1] for i in range(n_trunk)]
    time_dim = widths[0] - feat_dim - POSE_DIM
    return CriticModel(store, feat_dim, time_dim, nc.encoder_spec(feat_dim),
                       nc.MLPSpec(tuple(widths)))


# ---------------------------------------------------------------------------
# MDP primitives
# ---------------------------------------------------------------------------

@dataclass
class MdpState:
    """One sampler state: cloud feature, current pose vector, step index."""

    feat: np.ndarray   # (F,)
    pose: np.ndarray   # (9,)
    step: int
    horizon: int

    @property
    def tau(self) -> float:
        return self.step / self.horizon

    @property
    def terminal(self) -> bool:
        return self.step >= self.horizon


def gaussian_logp(actions: np.ndarray, means: np.ndarray, sigma: float) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    d = actions.shape[1]
    sq = ((actions - means) ** 2).sum(axis=1)
    return -sq / (2.0 * sigma * sigma) - d * (math.log(sigma) + 0.5 * math.log(2.0 * math.pi))


def policy_act(policy: PolicyModel, state: MdpState, sigma: float,
               rng: np.random.Generator) -> tuple[np.ndarray, float, np.ndarray]:
    """Sample one action a ~ N(mu, sigma^2 I) at ``state``.

    Returns (action, log_prob, mu).  With sigma = 0 the action is the mean
    and the log density is degenerate; it is flagged as +inf.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    mu = policy.net.velocity(state.feat[None], state.pose[None], state.tau)[0]
    if sigma == 0.0:
        return mu.copy(), math.inf, mu
    action = mu + sigma * rng.standard_normal(POSE_DIM)
    logp = float(gaussian_logp(action[None], mu[None], sigma)[0])
    return action, logp, mu


def env_step(state: MdpState, action: np.ndarray) -> MdpState:
    """Euler transition: p_{h+1} = p_h + action/H, step counter advanced."""
    if state.terminal:
        raise ValueError("env_step called on a terminal state")
    pose = state.pose + action / state.horizon
    return MdpState(state.feat, pose, state.step + 1, state.horizon)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

def reward_from_error(err: float, tau: float, bonus: float = 1.0) -> float:
    """exp(-err/tau), plus the precision bonus strictly below the threshold."""
    return math.exp(-err / tau) + bonus * (err < tau)


def step_rewards(pred, gt, tau_rot_deg: float = 5.0, tau_trans: float = 0.05,
                 bonus: float = 1.0, scale: float = 1.0,
                 symmetry_axis: np.ndarray | None = None) -> tuple[float, float]:
    """Dual reward exp(-err/tau) + bonus*[err < tau] for one decoded pose.

    ``pred`` and ``gt`` are Pose values in the normalized frame; the
    translation error is converted to scene units by ``scale`` before the
    exponential and the (strict) threshold test.  When ``symmetry_axis`` is
    given, rotation about it is free.
    """
    r_pred = pred.matrix()
    r_gt = gt.matrix()
    if symmetry_axis is not None:
        d_rot = float(symmetry_aware_angle_deg_batch(r_pred[None], r_gt[None], symmetry_axis)[0])
    else:
        d_rot = float(geodesic_angle_deg_batch(r_pred[None], r_gt[None])[0])
    d_trans = float(np.linalg.norm(pred.t - gt.t)) * scale
    return (reward_from_error(d_rot, tau_rot_deg, bonus),
            reward_from_error(d_trans, tau_trans, bonus))


def _rewards_batch(pose_vecs: np.ndarray, rot_gt: np.ndarray, t_gt: np.ndarray,
                   scales: np.ndarray, sym_mask: np.ndarray, tau_rot_deg: float,
                   tau_trans: float, bonus: float) -> tuple[np.ndarray, np.ndarray]:
    """(r^rot, r^trans) for a batch of raw pose 9-vectors.

    Rows whose 6D block fails to decode score a 180 deg rotation error.  The
    only symmetry axis the generator produces is canonical z, so a boolean
    mask suffices to select the symmetry-aware metric per row.
    """
    rots, ok = rot6d_to_matrix_batch(pose_vecs[:, :6])
    d_plain = geodesic_angle_deg_batch(rots, rot_gt)
    d_sym = symmetry_aware_angle_deg_batch(rots, rot_gt, _Z_AXIS)
    d_rot = np.where(sym_mask, d_sym, d_plain)
    d_rot = np.where(ok, d_rot, 180.0)
    d_trans = np.linalg.norm(pose_vecs[:, 6:] - t_gt, axis=1) * scales
    r_rot = np.exp(-d_rot / tau_rot_deg) + bonus * (d_rot < tau_rot_deg)
    r_trans = np.exp(-d_trans / tau_trans) + bonus * (d_trans < tau_trans)
    return r_rot, r_trans


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def gae_advantages(rewards: np.ndarray, values: np.ndarray, lam: float) -> np.ndarray:
    """Undiscounted GAE for one trajectory; the value beyond the horizon is 0.

    delta_h = r_h + V(s_{h+1}) - V(s_h), advantage_h = sum_l lam^l delta_{h+l}.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError("rewards and values must be matching 1-D arrays")
    h_n = rewards.shape[0]
    next_v = np.append(values[1:], 0.0)
    delta = rewards + next_v - values
    adv = np.empty(h_n)
    acc = 0.0
    for h in reversed(range(h_n)):
        acc = delta[h] + lam * acc
        adv[h] = acc
    return adv


def gae_advantages_batch(rewards: np.ndarray, values: np.ndarray, lam: float) -> np.ndarray:
    """Row-wise gae_advantages for (T, H) arrays (identical recursion)."""
    t_n, h_n = rewards.shape
    next_v = np.concatenate([values[:, 1:], np.zeros((t_n, 1))], axis=1)
    delta = rewards + next_v - values
    adv = np.empty_like(delta)
    acc = np.zeros(t_n)
    for h in reversed(range(h_n)):
        acc = delta[:, h] + lam * acc
        adv[:, h] = acc
    return adv


def joint_advantage(adv_rot: np.ndarray, adv_trans: np.ndarray) -> np.ndarray:
    """Equal-weight combination of the two heads."""
    return 0.5 * (adv_rot + adv_trans)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Shift/scale to mean 0, std 1 (std floored at 1e-8)."""
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


# ---------------------------------------------------------------------------
# rollout collection
# ---------------------------------------------------------------------------

@dataclass
class RolloutContext:
    """Per-dataset tensors shared by every iteration of refinement."""

    clouds: np.ndarray      # (M, 3, N)
    pol_feats: np.ndarray   # (M, F) under the policy encoder
    cri_feats: np.ndarray   # (M, F) under the critic encoder
    rot_gt: np.ndarray      # (M, 3, 3)
    t_gt: np.ndarray        # (M, 3) normalized frame
    scales: np.ndarray      # (M,) scene units per normalized unit
    sym_mask: np.ndarray    # (M,) True where rotation about z is free


def build_context(policy: PolicyModel, critic: CriticModel, dataset) -> RolloutContext:
    clouds = dataset.clouds()
    insts = dataset.instances
    return RolloutContext(
        clouds=clouds,
        pol_feats=policy.net.encode(clouds),
        cri_feats=critic.encode(clouds),
        rot_gt=np.stack([quat_to_matrix(inst.quat) for inst in insts]),
        t_gt=np.stack([inst.t_normalized for inst in insts]),
        scales=np.array([inst.scale for inst in insts]),
        sym_mask=np.array([inst.symmetry_axis is not None for inst in insts]),
    )


def refresh_context(policy: PolicyModel, critic: CriticModel,
                    ctx: RolloutContext) -> RolloutContext:
    """Re-encode the clouds after an update that trained the encoders."""
    return replace(ctx, pol_feats=policy.net.encode(ctx.clouds),
                   cri_feats=critic.encode(ctx.clouds))


@dataclass
class RolloutBuffer:
    """A batch of trajectories with everything the PPO update consumes.

    All per-step arrays are (T, H); ``poses[:, h]`` is the state pose BEFORE
    action h, rewards score the pose reached AFTER it, and ``final_poses``
    holds p_H.  Advantages use the terminal convention V(s_H) = 0.
    """

    instance_idx: np.ndarray
    poses: np.ndarray
    actions: np.ndarray
    logps: np.ndarray
    rewards_rot: np.ndarray
    rewards_trans: np.ndarray
    values_rot: np.ndarray
    values_trans: np.ndarray
    adv_rot: np.ndarray
    adv_trans: np.ndarray
    adv_joint: np.ndarray
    targets_rot: np.ndarray
    targets_trans: np.ndarray
    final_poses: np.ndarray
    horizon: int

    def episode_returns(self) -> tuple[float, float]:
        return (float(self.rewards_rot.sum(axis=1).mean()),
                float(self.rewards_trans.sum(axis=1).mean()))


def collect_rollouts(policy: PolicyModel, critic: CriticModel, ctx: RolloutContext,
                     idxs: np.ndarray, p0s: np.ndarray, cfg: PpoConfig,
                     rng: np.random.Generator) -> RolloutBuffer:
    """Roll T trajectories in lockstep and fill a complete buffer.

    ``rng`` is consumed only for exploration noise (sigma > 0).  The Euler
    transition uses the same float expression as the plain sampler, so with
    sigma = 0 the trajectories reproduce it bit-for-bit.
    """
    t_n, h_n = idxs.shape[0], cfg.horizon
    feats_p = ctx.pol_feats[idxs]
    feats_c = ctx.cri_feats[idxs]
    rot_gt, t_gt = ctx.rot_gt[idxs], ctx.t_gt[idxs]
    scales, sym = ctx.scales[idxs], ctx.sym_mask[idxs]

    poses = np.empty((t_n, h_n, POSE_DIM))
    actions = np.empty((t_n, h_n, POSE_DIM))
    logps = np.empty((t_n, h_n))
    rew_rot = np.empty((t_n, h_n))
    rew_trans = np.empty((t_n, h_n))

    p = np.array(p0s, dtype=float)
    for h in range(h_n):
        mu = policy.net.velocity(feats_p, p, h / h_n)
        if not np.isfinite(mu).all():
            raise NonFiniteVelocity(f"non-finite policy mean at step {h}/{h_n}")
        if policy.sigma > 0:
            a = mu + policy.sigma * rng.standard_normal((t_n, POSE_DIM))
            lp = gaussian_logp(a, mu, policy.sigma)
        else:
            a = mu
            lp = np.full(t_n, np.inf)
        poses[:, h] = p
        actions[:, h] = a
        logps[:, h] = lp
        p = p + a / h_n
        rew_rot[:, h], rew_trans[:, h] = _rewards_batch(
            p, rot_gt, t_gt, scales, sym, cfg.tau_rot_deg, cfg.tau_trans, cfg.bonus)

    val_rot = np.empty((t_n, h_n))
    val_trans = np.empty((t_n, h_n))
    for h in range(h_n):
        val_rot[:, h], val_trans[:, h] = critic.values(feats_c, poses[:, h], h / h_n)

    adv_rot = gae_advantages_batch(rew_rot, val_rot, cfg.lam)
    adv_trans = gae_advantages_batch(rew_trans, val_trans, cfg.lam)
    if cfg.value_target == "lambda-return":
        tgt_rot, tgt_trans = adv_rot + val_rot, adv_trans + val_trans
    else:  # "advantage": the literal reading, kept for ablation
        tgt_rot, tgt_trans = adv_rot.copy(), adv_trans.copy()

    return RolloutBuffer(
        instance_idx=np.asarray(idxs).copy(), poses=poses, actions=actions,
        logps=logps, rewards_rot=rew_rot, rewards_trans=rew_trans,
        values_rot=val_rot, values_trans=val_trans, adv_rot=adv_rot,
        adv_trans=adv_trans, adv_joint=joint_advantage(adv_rot, adv_trans),
        targets_rot=tgt_rot, targets_trans=tgt_trans, final_poses=p, horizon=h_n)


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def clipped_surrogate(mu: np.ndarray, actions: np.ndarray, logp_old: np.ndarray,
                      adv: np.ndarray, sigma: float, clip_eps: float):
    """Clipped PPO loss, its gradient w.r.t. mu, and the clipped fraction.

    loss = -mean min(ratio * adv, clip(ratio, 1-eps, 1+eps) * adv) with
    ratio = exp(logp_new - logp_old).  Ties go to the unclipped branch, so
    with unchanged parameters every ratio is exactly 1 and the gradient is the
    plain policy gradient.  Gradient contributions of clip-saturated terms are
    exactly zero.  sigma = 0 is degenerate (no density): the loss and gradient
    are defined as zero so a frozen policy passes through unchanged.
    """
    if sigma == 0.0:
        return 0.0, np.zeros_like(mu), 0.0
    b = mu.shape[0]
    logp_new = gaussian_logp(actions, mu, sigma)
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    take_unclipped = unclipped <= clipped
    loss = -float(np.where(take_unclipped, unclipped, clipped).mean())
    dlogp = -(adv * ratio * take_unclipped) / b
    dmu = dlogp[:, None] * (actions - mu) / (sigma * sigma)
    clip_frac = float(np.mean(~take_unclipped))
    return loss, dmu, clip_frac


def _critic_minibatch(critic: CriticModel, feats, poses, taus, tgt_rot, tgt_trans):
    """Sum-of-heads squared regression loss, parameter grads, and dfeats."""
    out, cache = critic.forward_with_cache(feats, poses, taus)
    b = out.shape[0]
    err_rot = out[:, 0] - tgt_rot
    err_trans = out[:, 1] - tgt_trans
    loss = float((err_rot ** 2).mean() + (err_trans ** 2).mean())
    dout = np.stack([2.0 * err_rot / b, 2.0 * err_trans / b], axis=1)
    dx, grads = nc.mlp_backward(critic.store, critic.trunk_spec, "trunk", cache, dout)
    return loss, grads, dx[:, : critic.feat_dim]


def ppo_update(policy: PolicyModel, critic: CriticModel, buffer: RolloutBuffer,
               ctx: RolloutContext, cfg: PpoConfig, rng: np.random.Generator,
               ref_mu: np.ndarray | None = None) -> dict[str, float]:
    """Several epochs of minibatch updates on one collected buffer.

    The joint advantage is normalized once over the whole buffer.  With
    frozen encoders (default) state features are looked up in ``ctx``; with
    ``finetune_encoder`` each minibatch re-encodes its unique clouds and
    scatter-adds the feature gradients back through the encoder.  When
    ``cfg.anchor`` > 0 and ``ref_mu`` carries the pretrained field's
    velocities at the buffer states (flattened (T*H, 9)), the policy loss
    gains anchor/2 * mean ||mu - ref_mu||^2 pulling the mean back toward it.

    Raises:
        NonFiniteLoss: a minibatch loss came out NaN/Inf.
    """
    t_n, h_n = buffer.rewards_rot.shape
    s_n = t_n * h_n
    adv = normalize_advantages(buffer.adv_joint.reshape(-1))
    flat_poses = buffer.poses.reshape(s_n, POSE_DIM)
    flat_actions = buffer.actions.reshape(s_n, POSE_DIM)
    flat_logp = buffer.logps.reshape(-1)
    flat_tgt_rot = buffer.targets_rot.reshape(-1)
    flat_tgt_trans = buffer.targets_trans.reshape(-1)
    flat_taus = np.tile(np.arange(h_n) / h_n, t_n)
    flat_inst = np.repeat(buffer.instance_idx, h_n)

    pol_losses, cri_losses, fracs = [], [], []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(s_n)
        for start in range(0, s_n, cfg.minibatch):
            mb = perm[start : start + cfg.minibatch]
            where = f"epoch {epoch}, minibatch at offset {start}"
            poses, acts, taus = flat_poses[mb], flat_actions[mb], flat_taus[mb]
            inst = flat_inst[mb]
            if cfg.finetune_encoder:
                uniq, inv = np.unique(inst, return_inverse=True)

            # -- policy ----------------------------------------------------
            if cfg.finetune_encoder:
                pfeat_u, penc_cache = policy.net.encode_with_cache(ctx.clouds[uniq])
                pfeats = pfeat_u[inv]
            else:
                pfeats = ctx.pol_feats[inst]
            mu, head_cache = policy.net.velocity_with_cache(pfeats, poses, taus)
            loss_p, dmu, frac = clipped_surrogate(
                mu, acts, flat_logp[mb], adv[mb], policy.sigma, cfg.clip_eps)
            if cfg.anchor > 0 and ref_mu is not None and policy.sigma > 0:
                diff = mu - ref_mu[mb]
                loss_p += 0.5 * cfg.anchor * float((diff ** 2).sum(axis=1).mean())
                dmu = dmu + cfg.anchor * diff / diff.shape[0]
            if not math.isfinite(loss_p):
                raise NonFiniteLoss(f"policy loss non-finite ({where})")
            if policy.sigma > 0:
                dx, pgrads = nc.mlp_backward(
                    policy.net.store, policy.net.head_spec, "head", head_cache, dmu)
                if cfg.finetune_encoder:
                    dfeat_u = np.zeros_like(pfeat_u)
                    np.add.at(dfeat_u, inv, dx[:, : policy.net.feat_dim])
                    pgrads.update(nc.encode_batch_backward(
                        policy.net.store, policy.net.enc_spec, "enc", penc_cache, dfeat_u))
                nc.adam_step(policy.net.store, pgrads, cfg.policy_lr)

            # -- critic ----------------------------------------------------
            if cfg.finetune_encoder:
                cfeat_u, cenc_cache = nc.encode_batch(
                    critic.store, critic.enc_spec, "enc", ctx.clouds[uniq])
                cfeats = cfeat_u[inv]
            else:
                cfeats = ctx.cri_feats[inst]
            loss_c, cgrads, dfeats_c = _critic_minibatch(
                critic, cfeats, poses, taus, flat_tgt_rot[mb], flat_tgt_trans[mb])
            if not math.isfinite(loss_c):
                raise NonFiniteLoss(f"critic loss non-finite ({where})")
            if cfg.finetune_encoder:
                dfeat_u = np.zeros_like(cfeat_u)
                np.add.at(dfeat_u, inv, dfeats_c)
                cgrads.update(nc.encode_batch_backward(
                    critic.store, critic.enc_spec, "enc", cenc_cache, dfeat_u))
            nc.adam_step(critic.store, cgrads, cfg.critic_lr)

            pol_losses.append(loss_p)
            cri_losses.append(loss_c)
            fracs.append(frac)

    return {"policy_loss": float(np.mean(pol_losses)),
            "critic_loss": float(np.mean(cri_losses)),
            "clip_frac": float(np.mean(fracs))}


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class PpoCurveRow:
    iteration: int            # 1-based
    return_rot: float         # mean episode return before this update
    return_trans: float
    policy_loss: float
    critic_loss: float


def train_ppo(flow: FlowModel, dataset, cfg: PpoConfig):
    """Refine a trained flow model with PPO; returns (policy, critic, curve).

    The policy copies the flow weights; the critic trunk is fresh with its
    encoder copied from the flow (configurable).  Deterministic under
    ``cfg.seed``: every random draw comes from a derived named stream.
    """
    policy = PolicyModel.from_flow(flow, cfg.sigma)
    critic = CriticModel.create(
        derive_rng(cfg.seed, "ppo.critic.init"), flow.feat_dim, flow.time_dim,
        encoder_from=flow.store if cfg.critic_encoder_init == "flow" else None)
    ctx = build_context(policy, critic, dataset)
    m = ctx.clouds.shape[0]
    # anchor reference features come from the untouched input flow, which
    # from_flow left pristine (they equal ctx.pol_feats until the policy
    # encoder is fine-tuned away from it)
    ref_feats = flow.encode(ctx.clouds) if cfg.anchor > 0 else None

    curve: list[PpoCurveRow] = []
    for it in range(cfg.iterations):
        # Fresh starts every iteration: reusing one fixed (instance, p0) set
        # lets the policy and critic overfit those exact rollouts — training
        # returns rise while fresh-start candidates get worse.
        rng_starts = derive_rng(cfg.seed, f"ppo.starts.{it}")
        idxs = rng_starts.integers(0, m, cfg.trajectories)
        p0s = rng_starts.standard_normal((cfg.trajectories, POSE_DIM))
        rng_iter = derive_rng(cfg.seed, f"ppo.iter.{it}")

        it_cfg = cfg
        if cfg.horizon_mix:
            h_it = int(cfg.horizon_mix[it % len(cfg.horizon_mix)])
            it_cfg = replace(cfg, horizon=h_it)
        buffer = collect_rollouts(policy, critic, ctx, idxs, p0s, it_cfg, rng_iter)
        ret_rot, ret_trans = buffer.episode_returns()
        ref_mu = None
        if ref_feats is not None:
            h_n = it_cfg.horizon
            ref_mu = flow.velocity(
                ref_feats[np.repeat(buffer.instance_idx, h_n)],
                buffer.poses.reshape(-1, POSE_DIM),
                np.tile(np.arange(h_n) / h_n, buffer.poses.shape[0]))
        diag = ppo_update(policy, critic, buffer, ctx, it_cfg, rng_iter, ref_mu)
        if cfg.finetune_encoder:
            ctx = refresh_context(policy, critic, ctx)
        curve.append(PpoCurveRow(it + 1, ret_rot, ret_trans,
                                 diag["policy_loss"], diag["critic_loss"]))
    return policy, critic, curve


def write_reward_curve(path, curve: list[PpoCurveRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,mean_return_rot,mean_return_trans,policy_loss,critic_loss\n")
        for row in curve:
            fh.write(f"{row.iteration},{row.return_rot!r},{row.return_trans!r},"
                     f"{row.policy_loss!r},{row.critic_loss!r}\n")
