"""Command-line pipeline driver.

Subcommands
-----------
gen-data    build the train/test datasets
train-flow  fit the flow-matching generator on a dataset
train-ppo   refine a trained generator with PPO and fit the value critic
eval        score an estimator stack on a test set
ablate      run one study: grid | ranking | flow-vs-rl | speed

Every command writes its results plus two bookkeeping artifacts under
``--out``: the effective configuration (``config.txt``, reloadable as a
config file) and ``manifest.txt`` with content hashes of all inputs and
outputs.  The manifest's digest line covers everything except wall time, so
two runs produced the same bytes exactly when their digests match.  Inputs
are never modified.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O failure,
4 numerical failure.  Failures print a single diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

from . import config as cf
from . import evalbench as eb
from . import flowmatch as fm
from . import netcore as nc
from . import rlrefine as rl
from . import synthdata as sd


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, seed: int, inputs: dict,
                   outputs: dict, wall_time: float) -> str:
    """Hash all input/output files into ``manifest.txt``; returns the digest.

    Files are recorded by role label, not path, so manifests from different
    working directories stay comparable.  The digest is a hash of every line
    except the wall-time line.
    """
    lines = [f"command {command}", f"seed {seed}"]
    for label in sorted(inputs):
        lines.append(f"input {label} {sha256_file(inputs[label])}")
    for label in sorted(outputs):
        lines.append(f"output {label} {sha256_file(outputs[label])}")
    digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    lines.append(f"wall_time_s {wall_time:.3f}")
    lines.append(f"digest {digest}")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    return digest


def read_manifest_digest(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("digest "):
                return line.split()[1]
    raise ValueError(f"no digest line in {path}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

class InputError(Exception):
    """An input file exists but cannot be parsed; maps to the I/O exit code."""


def _require_file(path, what: str) -> str:
    if not os.path.exists(path):
        raise cf.ConfigError(f"{what} not found: {path}")
    return path


def _read(loader, path, what: str):
    """Load an input file, folding parse failures into the I/O exit path."""
    try:
        return loader(path)
    except ValueError as exc:  # includes format-version mismatches
        raise InputError(f"{what} {path}: {exc}") from None


def _prepare(args):
    """Load the effective config and set up the output directory."""
    cfg = cf.load_config(args.config, args.set or [])
    os.makedirs(args.out, exist_ok=True)
    cf.write_echo(os.path.join(args.out, "config.txt"), cfg)
    inputs = {}
    if args.config is not None:
        inputs["config_file"] = args.config
    return cfg, inputs


def _finish(args, cfg, command: str, inputs: dict, outputs: dict,
            t0: float) -> None:
    outputs = dict(outputs)
    outputs["config"] = os.path.join(args.out, "config.txt")
    write_manifest(args.out, command, cfg.seed, inputs, outputs,
                   time.perf_counter() - t0)


def _workers(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    return args.workers


def _load_stack(args, need_critic: bool) -> eb.EstimatorStack:
    model = _read(fm.load_flow_model,
                  _require_file(args.model, "model checkpoint"), "model")
    critic = None
    if args.critic is not None:
        critic = _read(rl.load_critic,
                       _require_file(args.critic, "critic checkpoint"), "critic")
    elif need_critic:
        raise cf.ConfigError("this run scores candidates by value: "
                             "--critic is required")
    return eb.EstimatorStack(model, critic)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    cfg, inputs = _prepare(args)
    train = sd.build_dataset(cf.dataset_config(cfg, "train"), cfg.seed)
    test = sd.build_dataset(cf.dataset_config(cfg, "test"), cfg.seed)
    train_path = os.path.join(args.out, "train.txt")
    test_path = os.path.join(args.out, "test.txt")
    sd.save_dataset(train, train_path)
    sd.save_dataset(test, test_path)
    _finish(args, cfg, "gen-data", inputs,
            {"train": train_path, "test": test_path}, t0)
    print(f"wrote {len(train.instances)} train / {len(test.instances)} test "
          f"instances to {args.out}")
    return 0


def cmd_train_flow(args) -> int:
    t0 = time.perf_counter()
    cfg, inputs = _prepare(args)
    inputs["dataset"] = _require_file(args.dataset, "dataset")
    dataset = _read(sd.load_dataset, args.dataset, "dataset")
    model, curve = fm.train_flow(dataset, cf.flow_config(cfg))
    ckpt = os.path.join(args.out, "flow.ckpt")
    curve_path = os.path.join(args.out, "loss_curve.csv")
    fm.save_flow_model(model, ckpt)
    fm.write_loss_curve(curve_path, curve)
    _finish(args, cfg, "train-flow", inputs,
            {"flow": ckpt, "loss_curve": curve_path}, t0)
    print(f"trained {cfg.flow.epochs} epochs; "
          f"final loss {curve[-1][1]:.6f}; checkpoint at {ckpt}")
    return 0


def cmd_train_ppo(args) -> int:
    t0 = time.perf_counter()
    cfg, inputs = _prepare(args)
    inputs["flow"] = _require_file(args.flow, "flow checkpoint")
    inputs["dataset"] = _require_file(args.dataset, "dataset")
    flow = _read(fm.load_flow_model, args.flow, "flow checkpoint")
    dataset = _read(sd.load_dataset, args.dataset, "dataset")
    policy, critic, curve = rl.train_ppo(flow, dataset, cf.ppo_config(cfg))
    policy_path = os.path.join(args.out, "policy.ckpt")
    critic_path = os.path.join(args.out, "critic.ckpt")
    curve_path = os.path.join(args.out, "reward_curve.csv")
    fm.save_flow_model(policy.net, policy_path)
    rl.save_critic(critic, critic_path)
    rl.write_reward_curve(curve_path, curve)
    _finish(args, cfg, "train-ppo", inputs,
            {"policy": policy_path, "critic": critic_path,
             "reward_curve": curve_path}, t0)
    first = curve[0].return_rot + curve[0].return_trans
    best = max(row.return_rot + row.return_trans for row in curve)
    print(f"ran {cfg.rl.iterations} PPO iterations; "
          f"mean return {first:.3f} -> best {best:.3f}; "
          f"checkpoints at {args.out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg, inputs = _prepare(args)
    inputs["testset"] = _require_file(args.testset, "testset")
    strategy = args.strategy
    if strategy is None:
        strategy = "value" if args.critic is not None else "mean"
    stack = _load_stack(args, need_critic=strategy in ("value",))
    inputs["model"] = args.model
    if args.critic is not None:
        inputs["critic"] = args.critic
    testset = _read(sd.load_dataset, args.testset, "testset")
    report = eb.evaluate(stack, testset, k=cfg.infer.k,
                         h_steps=cfg.infer.h_steps, rho=cfg.infer.rho,
                         seed=cfg.seed, strategy=strategy,
                         workers=_workers(args),
                         score_step=cf.score_step(cfg))
    if args.deterministic:
        # wall-clock latency would make two otherwise identical runs write
        # different bytes; zero it so manifests compare equal
        report.ms_per_instance = 0.0
    text_path = os.path.join(args.out, "report.txt")
    csv_path = os.path.join(args.out, "report.csv")
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(eb.format_report(report) + "\n")
    grid = eb.AblationGrid({"k": (cfg.infer.k,), "rho": (cfg.infer.rho,)},
                           {(cfg.infer.k, cfg.infer.rho): report})
    eb.write_grid_csv(csv_path, grid)
    _finish(args, cfg, "eval", inputs,
            {"report_txt": text_path, "report_csv": csv_path}, t0)
    print(eb.format_report(report))
    return 0


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    cfg, inputs = _prepare(args)
    inputs["testset"] = _require_file(args.testset, "testset")
    testset = _read(sd.load_dataset, args.testset, "testset")
    workers = _workers(args)
    k, h, rho = cfg.infer.k, cfg.infer.h_steps, cfg.infer.rho
    outputs = {}

    if args.which == "grid":
        stack = _load_stack(args, need_critic=True)
        inputs["model"] = args.model
        inputs["critic"] = args.critic
        grid = eb.run_grid_K_rho(stack, testset, h_steps=h, seed=cfg.seed,
                                 workers=workers)
        grid_path = os.path.join(args.out, "grid.csv")
        matrix_path = os.path.join(args.out, "grid_matrix.csv")
        eb.write_grid_csv(grid_path, grid)
        eb.write_grid_matrix(matrix_path, grid)
        outputs = {"grid": grid_path, "grid_matrix": matrix_path}
    elif args.which == "ranking":
        stack = _load_stack(args, need_critic=True)
        inputs["model"] = args.model
        inputs["critic"] = args.critic
        grid = eb.run_ranking_ablation(stack, testset, k=k, h_steps=h,
                                       rho=rho, seed=cfg.seed, workers=workers)
        path = os.path.join(args.out, "ranking.csv")
        eb.write_grid_csv(path, grid)
        outputs = {"ranking": path}
    elif args.which == "flow-vs-rl":
        if args.flow is None or args.critic is None:
            raise cf.ConfigError("flow-vs-rl needs --flow, --model (the "
                                 "refined policy), and --critic")
        flow = _read(fm.load_flow_model,
                     _require_file(args.flow, "flow checkpoint"), "flow")
        policy = _read(fm.load_flow_model,
                       _require_file(args.model, "model checkpoint"), "model")
        critic = _read(rl.load_critic,
                       _require_file(args.critic, "critic checkpoint"),
                       "critic")
        inputs["flow"] = args.flow
        inputs["model"] = args.model
        inputs["critic"] = args.critic
        grid = eb.run_flow_vs_rl(flow, policy, critic, testset, k=k,
                                 h_steps=h, rho=rho, seed=cfg.seed,
                                 workers=workers)
        path = os.path.join(args.out, "flow_vs_rl.csv")
        eb.write_grid_csv(path, grid)
        outputs = {"flow_vs_rl": path}
    else:  # speed
        strategy = args.strategy or ("value" if args.critic else "mean")
        stack = _load_stack(args, need_critic=strategy in ("value",))
        inputs["model"] = args.model
        if args.critic is not None:
            inputs["critic"] = args.critic
        rows = eb.bench_speed(stack, testset, k=k, rho=rho, seed=cfg.seed,
                              strategy=strategy)
        path = os.path.join(args.out, "speed.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("h,ms_per_instance,strict_rate\n")
            for row in rows:
                fh.write(f"{row['h']},{row['ms_per_instance']!r},"
                         f"{row['strict_rate']!r}\n")
        outputs = {"speed": path}

    _finish(args, cfg, f"ablate-{args.which}", inputs, outputs, t0)
    print(f"wrote {args.which} ablation to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_common(p) -> None:
    p.add_argument("--config", default=None, help="config file path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over the "
                        "file and RFMPOSE_SEED)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="force workers=1 and zero wall-clock fields in "
                        "outputs, so repeated runs write identical bytes "
                        "(training and generation are deterministic either "
                        "way)")


def _add_parallel(p) -> None:
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="worker threads for per-instance evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowpose",
        description="Pose estimation via flow matching, PPO refinement, and "
                    "value-ranked candidate aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build train/test datasets")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-flow", help="fit the flow generator")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="training dataset file")
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("train-ppo", help="PPO refinement of a trained flow")
    _add_common(p)
    p.add_argument("--flow", required=True, help="flow checkpoint to refine")
    p.add_argument("--dataset", required=True, help="training dataset file")
    p.set_defaults(func=cmd_train_ppo)

    p = sub.add_parser("eval", help="evaluate on a test set")
    _add_common(p)
    _add_parallel(p)
    p.add_argument("--model", required=True,
                   help="sampler checkpoint (flow or refined policy)")
    p.add_argument("--critic", default=None, help="critic checkpoint")
    p.add_argument("--testset", required=True, help="test dataset file")
    p.add_argument("--strategy", default=None, choices=eb.STRATEGIES,
                   help="candidate ranking strategy (default: value with a "
                        "critic, mean without)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation study")
    _add_common(p)
    _add_parallel(p)
    p.add_argument("--which", required=True,
                   choices=("grid", "ranking", "flow-vs-rl", "speed"))
    p.add_argument("--model", required=True,
                   help="sampler checkpoint (flow or refined policy)")
    p.add_argument("--critic", default=None, help="critic checkpoint")
    p.add_argument("--flow", default=None,
                   help="unrefined flow checkpoint (flow-vs-rl only)")
    p.add_argument("--testset", required=True, help="test dataset file")
    p.add_argument("--strategy", default=None, choices=eb.STRATEGIES,
                   help="ranking strategy for the speed study")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cf.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except nc.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
