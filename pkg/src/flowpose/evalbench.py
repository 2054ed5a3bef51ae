"""Metrics, ablation runners, and speed benchmarking over synthetic test sets.

Success rates are NOCS-style: a prediction succeeds at a (theta deg, d cm)
threshold pair iff both errors are strictly below it; rates are averaged over
instances within a category, then over categories.  Rotation error is
symmetry-aware where the instance has a free spin axis; translation error is
de-normalized to centimeters through the instance scale.

Every runner works from per-instance candidate sets that can be built once
and shared: the K=10 cell of the sampling-count grid consumes the first 10
candidates of the K=50 cache (initial draws are prefix-stable), and all
ranking strategies consume identical candidates by construction.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aggregate as ag
from . import flowmatch as fm
from .geometry import (
    DegenerateAverage,
    DegenerateRotation,
    Pose,
    geodesic_angle_deg,
    geodesic_angle_deg_batch,
    quat_to_matrix,
    rot6d_to_matrix_batch,
    symmetry_aware_angle_deg,
    symmetry_aware_angle_deg_batch,
)
from .rlrefine import CriticModel
from .seeding import derive_rng

# (rotation deg, translation cm) success thresholds, strict-< on both
THRESHOLDS = ((5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0))
STRICT = THRESHOLDS[0]
RELAXED = THRESHOLDS[3]

STRATEGIES = ("mean", "value", "oracle", "random-top", "random-single")


# ---------------------------------------------------------------------------
# per-instance scoring
# ---------------------------------------------------------------------------

def score_instance(pred: Pose, gt: Pose, symmetry_axis=None, scale: float = 1.0,
                   scene_scale: float = 1.0) -> tuple[float, float]:
    """(rotation error deg, translation error cm) for one prediction.

    The rotation error is geodesic, or axis-image based when the instance has
    a symmetry axis.  Translations live in the normalized frame; ``scale``
    converts to scene units and ``scene_scale`` to meters.
    """
    r_pred = pred.matrix()
    r_gt = gt.matrix()
    if symmetry_axis is not None:
        d_rot = symmetry_aware_angle_deg(r_pred, r_gt, symmetry_axis)
    else:
        d_rot = geodesic_angle_deg(r_pred, r_gt)
    d_cm = float(np.linalg.norm(pred.t - gt.t)) * scale * scene_scale * 100.0
    return d_rot, d_cm


def _instance_errors(pred: Pose, inst, scene_scale: float) -> tuple[float, float]:
    """score_instance with undecodable rotations counted as a half turn."""
    try:
        return score_instance(pred, inst.gt_pose, inst.symmetry_axis, inst.scale, scene_scale)
    except DegenerateRotation:
        d_cm = float(np.linalg.norm(pred.t - inst.gt_pose.t)) * inst.scale * scene_scale * 100.0
        return 180.0, d_cm


# ---------------------------------------------------------------------------
# model stack and candidate caches
# ---------------------------------------------------------------------------

@dataclass
class EstimatorStack:
    """A sampler plus (optionally) the retained critic that scores it."""

    model: fm.FlowModel
    critic: CriticModel | None = None


@dataclass
class InstanceCandidates:
    """Everything the runners need about one instance's K candidates."""

    cset: ag.CandidateSet
    true_errors: list[tuple[float, float]]   # symmetry-aware (deg, cm) per candidate

    def prefix(self, k: int) -> "InstanceCandidates":
        """The sub-cache a smaller sampling count would have produced."""
        if not 1 <= k <= self.cset.k:
            raise ValueError(f"k={k} outside 1..{self.cset.k}")
        sub = ag.CandidateSet(self.cset.candidates[:k], k, self.cset.h_steps)
        return InstanceCandidates(sub, self.true_errors[:k])


def _sample_and_score(stack: EstimatorStack, cloud, k: int, h_steps: int,
                      rng: np.random.Generator,
                      score_step: int | None = None) -> ag.CandidateSet:
    """The deployed path: sample K candidates and (optionally) critic-score them."""
    trajs = fm.sample_candidates(stack.model, cloud, k, h_steps, rng)
    if stack.critic is not None:
        feat = stack.critic.encode(cloud[None])[0]
        return ag.score_candidates(stack.critic, feat, trajs, score_step)
    return ag.unscored_candidates(trajs)


def candidates_for_instance(stack: EstimatorStack, inst, k: int, h_steps: int,
                            rng: np.random.Generator, scene_scale: float = 1.0,
                            score_step: int | None = None) -> InstanceCandidates:
    """Sample, score, and error-annotate K candidates for one instance."""
    cset = _sample_and_score(stack, inst.cloud, k, h_steps, rng, score_step)
    errors = [_instance_errors(c.pose, inst, scene_scale) for c in cset.candidates]
    return InstanceCandidates(cset, errors)


def build_candidate_cache(stack: EstimatorStack, testset, k: int, h_steps: int,
                          seed: int, workers: int = 1,
                          score_step: int | None = None) -> list[InstanceCandidates]:
    """One InstanceCandidates per test instance, deterministic under seed.

    Each instance consumes its own derived stream, so the cache is identical
    no matter how many workers build it.
    """
    if not testset.instances:
        raise ValueError("empty testset")
    scene = testset.scene_scale

    def build(idx: int) -> InstanceCandidates:
        rng = derive_rng(seed, f"eval.{idx}")
        return candidates_for_instance(stack, testset.instances[idx], k, h_steps,
                                       rng, scene, score_step)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, range(len(testset.instances))))
    return [build(idx) for idx in range(len(testset.instances))]


# ---------------------------------------------------------------------------
# prediction strategies
# ---------------------------------------------------------------------------

def _predict_from_candidates(cand: InstanceCandidates, strategy: str, rho: float,
                             rng: np.random.Generator) -> Pose:
    """One final pose from a candidate set under a ranking strategy.

    ``mean`` ignores scores entirely (rho = 1 average); ``value`` ranks by the
    critic heads; ``oracle`` ranks by negative true error (evaluation-only
    upper bound); ``random-top`` averages a random rho-subset; and
    ``random-single`` returns one randomly drawn candidate.  Degenerate
    rotation averages fall back to the first candidate.
    """
    cset = cand.cset
    if strategy == "random-single":
        return cset.candidates[int(rng.integers(cset.k))].pose
    if strategy == "mean":
        # neutral scores: the average runs in draw order, fully score-free
        neutral = [ag.ScoredCandidate(c.pose, 0.0, 0.0, c.index) for c in cset.candidates]
        work, eff_rho = ag.CandidateSet(neutral, cset.k, cset.h_steps), 1.0
    elif strategy == "value":
        work, eff_rho = cset, rho
    elif strategy == "oracle":
        rescored = [ag.ScoredCandidate(c.pose, -cand.true_errors[i][0],
                                       -cand.true_errors[i][1], c.index)
                    for i, c in enumerate(cset.candidates)]
        work, eff_rho = ag.CandidateSet(rescored, cset.k, cset.h_steps), rho
    elif strategy == "random-top":
        # one shared random score vector: both modalities keep the same
        # uniformly random subset
        noise = rng.permutation(cset.k).astype(float)
        rescored = [ag.ScoredCandidate(c.pose, noise[i], noise[i], c.index)
                    for i, c in enumerate(cset.candidates)]
        work, eff_rho = ag.CandidateSet(rescored, cset.k, cset.h_steps), rho
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    try:
        return ag.aggregate_pose(work, eff_rho)
    except (DegenerateAverage, DegenerateRotation):
        return cset.candidates[0].pose


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    k: int
    h_steps: int
    rho: float
    strategy: str
    rates: dict                     # (theta, d) -> percent, category-averaged
    per_category: dict              # category -> {(theta, d) -> percent}
    mean_rot_deg: float
    mean_trans_cm: float
    ms_per_instance: float
    rot_errors: np.ndarray = field(repr=False)
    trans_errors_cm: np.ndarray = field(repr=False)
    categories: list = field(repr=False)

    @property
    def strict_rate(self) -> float:
        return self.rates[STRICT]

    @property
    def relaxed_rate(self) -> float:
        return self.rates[RELAXED]


def _assemble_report(rot_errs, trans_errs, cats, k, h_steps, rho, strategy,
                     ms_per_instance) -> MetricsReport:
    rot_errs = np.asarray(rot_errs, dtype=float)
    trans_errs = np.asarray(trans_errs, dtype=float)
    per_cat: dict = {}
    cat_names = sorted(set(cats))
    cats_arr = np.asarray(cats)
    for cat in cat_names:
        sel = cats_arr == cat
        per_cat[cat] = {
            (th_r, th_t): float(100.0 * np.mean((rot_errs[sel] < th_r) & (trans_errs[sel] < th_t)))
            for th_r, th_t in THRESHOLDS
        }
    rates = {pair: float(np.mean([per_cat[c][pair] for c in cat_names]))
             for pair in THRESHOLDS}
    mean_rot = float(np.mean([rot_errs[cats_arr == c].mean() for c in cat_names]))
    mean_trans = float(np.mean([trans_errs[cats_arr == c].mean() for c in cat_names]))
    return MetricsReport(k, h_steps, rho, strategy, rates, per_cat, mean_rot,
                         mean_trans, ms_per_instance, rot_errs, trans_errs, list(cats))


def report_from_cache(cache: list[InstanceCandidates], testset, rho: float,
                      strategy: str = "value", seed: int = 0,
                      k: int | None = None) -> MetricsReport:
    """Metrics over a prebuilt candidate cache (no sampling, no timing).

    ``k`` trims every instance to its first k candidates; random strategies
    draw from per-instance derived streams so reports stay deterministic.
    """
    if not cache:
        raise ValueError("empty candidate cache")
    scene = testset.scene_scale
    rot_errs, trans_errs, cats = [], [], []
    for idx, cand in enumerate(cache):
        if k is not None:
            cand = cand.prefix(k)
        rng = derive_rng(seed, f"eval.rank.{idx}")
        pred = _predict_from_candidates(cand, strategy, rho, rng)
        d_rot, d_cm = _instance_errors(pred, testset.instances[idx], scene)
        rot_errs.append(d_rot)
        trans_errs.append(d_cm)
        cats.append(testset.instances[idx].category)
    return _assemble_report(rot_errs, trans_errs, cats, cache[0].cset.k if k is None else k,
                            cache[0].cset.h_steps, rho, strategy, 0.0)


def evaluate(stack: EstimatorStack, testset, k: int, h_steps: int, rho: float,
             seed: int, strategy: str = "value", workers: int = 1,
             score_step: int | None = None) -> MetricsReport:
    """End-to-end evaluation: sample K candidates per instance, aggregate,
    and score.  Per-instance latency covers sampling, scoring, and
    aggregation; the median is reported in milliseconds.
    """
    if not testset.instances:
        raise ValueError("empty testset")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    scene = testset.scene_scale
    n = len(testset.instances)

    def run_one(idx: int):
        inst = testset.instances[idx]
        rng = derive_rng(seed, f"eval.{idx}")
        rank_rng = derive_rng(seed, f"eval.rank.{idx}")
        t0 = time.perf_counter()
        cand = candidates_for_instance(stack, inst, k, h_steps, rng, scene, score_step)
        pred = _predict_from_candidates(cand, strategy, rho, rank_rng)
        elapsed = time.perf_counter() - t0
        d_rot, d_cm = _instance_errors(pred, inst, scene)
        return d_rot, d_cm, inst.category, elapsed

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(n)))
    else:
        results = [run_one(idx) for idx in range(n)]
    rot_errs = [r[0] for r in results]
    trans_errs = [r[1] for r in results]
    cats = [r[2] for r in results]
    ms = 1000.0 * float(np.median([r[3] for r in results]))
    return _assemble_report(rot_errs, trans_errs, cats, k, h_steps, rho, strategy, ms)


# ---------------------------------------------------------------------------
# ablation runners
# ---------------------------------------------------------------------------

@dataclass
class AblationGrid:
    axes: dict          # axis name -> tuple of values, in report order
    cells: dict         # tuple of axis values -> MetricsReport


def run_grid_K_rho(stack: EstimatorStack, testset, ks=(10, 30, 50),
                   rhos=(0.2, 0.4, 0.6, 0.8, 1.0), h_steps: int = 20,
                   seed: int = 0, workers: int = 1,
                   cache: list[InstanceCandidates] | None = None) -> AblationGrid:
    """Sampling-count x selection-ratio grid with one shared candidate cache.

    Candidates are sampled once at max(ks); every (k, rho) cell consumes the
    first k candidates, so cells of equal k see identical sets.
    """
    if cache is None:
        cache = build_candidate_cache(stack, testset, max(ks), h_steps, seed, workers)
    cells = {}
    for k in ks:
        for rho in rhos:
            cells[(k, rho)] = report_from_cache(cache, testset, rho, "value", seed, k=k)
    return AblationGrid({"k": tuple(ks), "rho": tuple(rhos)}, cells)


def run_ranking_ablation(stack: EstimatorStack, testset, k: int = 50,
                         h_steps: int = 20, rho: float = 0.6, seed: int = 0,
                         workers: int = 1,
                         cache: list[InstanceCandidates] | None = None) -> AblationGrid:
    """Ranking-strategy comparison over one shared candidate cache."""
    strategies = ("random-single", "random-top", "value", "oracle")
    if cache is None:
        cache = build_candidate_cache(stack, testset, k, h_steps, seed, workers)
    cells = {(s,): report_from_cache(cache, testset, rho, s, seed) for s in strategies}
    return AblationGrid({"strategy": strategies}, cells)


def run_flow_vs_rl(flow_model: fm.FlowModel, rl_model: fm.FlowModel,
                   critic: CriticModel, testset, k: int = 50, h_steps: int = 20,
                   rho: float = 0.6, seed: int = 0, workers: int = 1,
                   caches=None) -> AblationGrid:
    """2x2 method x aggregation grid; the retained critic scores both methods.

    The mean-aggregation cells ignore the scores entirely, so they scan the
    same candidates with rho = 1 and no ranking.
    """
    stacks = {"flow": EstimatorStack(flow_model, critic),
              "rl": EstimatorStack(rl_model, critic)}
    if caches is None:
        caches = {name: build_candidate_cache(stacks[name], testset, k, h_steps,
                                              seed, workers)
                  for name in stacks}
    cells = {}
    for name in ("flow", "rl"):
        for agg in ("mean", "value"):
            cells[(name, agg)] = report_from_cache(caches[name], testset, rho, agg, seed)
    return AblationGrid({"method": ("flow", "rl"), "aggregation": ("mean", "value")}, cells)


def bench_speed(stack: EstimatorStack, testset, hs=(5, 10, 20, 40), k: int = 50,
                rho: float = 0.6, seed: int = 0, strategy: str = "value",
                min_instances: int = 50, warmup: int = 3) -> list[dict]:
    """Median per-instance latency and strict-rate per sampling horizon.

    The clock covers the deployed path only — candidate sampling, critic
    scoring, and aggregation into one pose.  Annotating every candidate with
    its true error is metrics bookkeeping, so it runs off the clock (the
    oracle strategy still consumes those errors during ranking; its latency
    is a diagnostic, not a deployable number).  Every horizon reuses the
    same per-measurement start streams, so accuracy differences between
    horizons are paired: they reflect integration granularity alone, not
    fresh Monte-Carlo draws.  Instances cycle until at least
    ``min_instances`` are measured; a few warm-up instances are run first so
    allocator/BLAS setup stays out of the numbers.  Latencies are wall-clock
    and single-threaded on purpose.
    """
    insts = testset.instances
    if not insts:
        raise ValueError("empty testset")
    scene = testset.scene_scale
    for idx in range(min(warmup, len(insts))):
        rng = derive_rng(seed, f"bench.warm.{idx}")
        candidates_for_instance(stack, insts[idx], k, hs[0], rng, scene)

    rows = []
    for h_steps in hs:
        rot_errs, trans_errs, cats, times = [], [], [], []
        n_run = max(min_instances, len(insts))
        for j in range(n_run):
            idx = j % len(insts)
            inst = insts[idx]
            rng = derive_rng(seed, f"bench.{j}")
            rank_rng = derive_rng(seed, f"bench.rank.{j}")
            t0 = time.perf_counter()
            cset = _sample_and_score(stack, inst.cloud, k, h_steps, rng)
            elapsed = time.perf_counter() - t0
            if strategy == "oracle":
                errors = [_instance_errors(c.pose, inst, scene)
                          for c in cset.candidates]
            else:
                errors = []
            cand = InstanceCandidates(cset, errors)
            t0 = time.perf_counter()
            pred = _predict_from_candidates(cand, strategy, rho, rank_rng)
            elapsed += time.perf_counter() - t0
            times.append(elapsed)
            d_rot, d_cm = _instance_errors(pred, inst, scene)
            rot_errs.append(d_rot)
            trans_errs.append(d_cm)
            cats.append(inst.category)
        report = _assemble_report(rot_errs, trans_errs, cats, k, h_steps, rho,
                                  strategy, 1000.0 * float(np.median(times)))
        rows.append({"h": h_steps, "ms_per_instance": report.ms_per_instance,
                     "strict_rate": report.strict_rate, "report": report})
    return rows


# ---------------------------------------------------------------------------
# candidate spread (symmetry concentration measurements)
# ---------------------------------------------------------------------------

def candidate_circular_variance(cand: InstanceCandidates, inst) -> float:
    """1 - mean cos(angle to ground truth) over an instance's candidates.

    The angle is symmetry-aware when the instance has a free axis, so spin
    about it does not count as spread.  0 means all candidates sit on the
    ground truth; 2 is the antipodal worst case.
    """
    vecs = np.stack([c.pose.as_vector() for c in cand.cset.candidates])
    rots, ok = rot6d_to_matrix_batch(vecs[:, :6])
    r_gt = quat_to_matrix(inst.quat)
    gt_stack = np.broadcast_to(r_gt, rots.shape)
    if inst.symmetry_axis is not None:
        angles = symmetry_aware_angle_deg_batch(rots, gt_stack, inst.symmetry_axis)
    else:
        angles = geodesic_angle_deg_batch(rots, gt_stack)
    angles = np.where(ok, angles, 180.0)
    return float(1.0 - np.mean(np.cos(np.radians(angles))))


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def _pair_label(pair) -> str:
    return f"{pair[0]:g}deg{pair[1]:g}cm"


def format_report(report: MetricsReport) -> str:
    lines = [f"K={report.k} H={report.h_steps} rho={report.rho:g} "
             f"strategy={report.strategy}"]
    header = "category    " + "  ".join(f"{_pair_label(p):>10}" for p in THRESHOLDS)
    lines.append(header)
    for cat in sorted(report.per_category):
        row = report.per_category[cat]
        lines.append(f"{cat:<12}" + "  ".join(f"{row[p]:>10.1f}" for p in THRESHOLDS))
    lines.append(f"{'overall':<12}" + "  ".join(f"{report.rates[p]:>10.1f}" for p in THRESHOLDS))
    lines.append(f"mean rot err {report.mean_rot_deg:.2f} deg, "
                 f"mean trans err {report.mean_trans_cm:.2f} cm, "
                 f"{report.ms_per_instance:.1f} ms/instance")
    return "\n".join(lines)


def write_grid_csv(path, grid: AblationGrid) -> None:
    """One row per cell: axis values, four rates, mean errors, latency."""
    axis_names = list(grid.axes)
    with open(path, "w", encoding="utf-8") as fh:
        cols = axis_names + [_pair_label(p) for p in THRESHOLDS] + \
            ["mean_rot_deg", "mean_trans_cm", "ms_per_instance"]
        fh.write(",".join(cols) + "\n")
        for key, report in grid.cells.items():
            vals = [str(v) for v in key]
            vals += [repr(float(report.rates[p])) for p in THRESHOLDS]
            vals += [repr(float(report.mean_rot_deg)), repr(float(report.mean_trans_cm)),
                     repr(float(report.ms_per_instance))]
            fh.write(",".join(vals) + "\n")


def write_grid_matrix(path, grid: AblationGrid, pair=RELAXED) -> None:
    """A 2-axis grid as a plottable rate matrix (rows = first axis)."""
    names = list(grid.axes)
    if len(names) != 2:
        raise ValueError("matrix form wants exactly two axes")
    rows_ax, cols_ax = grid.axes[names[0]], grid.axes[names[1]]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{names[0]}\\{names[1]}," + ",".join(str(c) for c in cols_ax) + "\n")
        for r in rows_ax:
            vals = [repr(float(grid.cells[(r, c)].rates[pair])) for c in cols_ax]
            fh.write(f"{r}," + ",".join(vals) + "\n")
