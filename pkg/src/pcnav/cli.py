"""Operator commands: train, eval, replay, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .bench import SUITES, format_rows, run_suite
from .config import (ConfigError, RunConfig, build_env_kwargs,
                     build_policy_config, build_ppo, find_config, load_config,
                     normalize_variant, resolve_worlds, save_config)
from .geom import ContractViolationError
from .nn import CheckpointFormatError, NavPolicy
from .rl import train
from .task import METRICS_FIELDS, NavEnv, OracleAgent, evaluate

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

ENCODER_CHOICES = ("pointnet", "multiscale", "depth-baseline")
CONDITION_CHOICES = ("none", "A", "B", "AB")
REPLAY_FORMATS = ("jsonl", "csv", "svg-path")


class ReplayLogError(ValueError):
    """A trajectory log problem, annotated with file and line."""


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    path = find_config(args.config)
    config = load_config(path)
    if args.seed is not None:
        config = dataclasses.replace(
            config, seeds=dataclasses.replace(config.seeds, train=args.seed,
                                              eval=args.seed))
    if args.encoder is not None:
        config = dataclasses.replace(
            config, encoder=dataclasses.replace(
                config.encoder, variant=normalize_variant(args.encoder)))
    if args.out is not None:
        config = dataclasses.replace(config, output_dir=args.out)

    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.yaml"))

    result = train(build_ppo(config),
                   resolve_worlds(config.worlds.train),
                   resolve_worlds(config.worlds.heldout),
                   config.encoder.variant, out_dir,
                   seed=config.seeds.train,
                   policy_config=build_policy_config(config),
                   env_kwargs=build_env_kwargs(config),
                   resume_from=args.resume)
    best = result["best"]
    print(f"metrics: {result['metrics_csv']}")
    print(f"best checkpoint: {result['best_checkpoint']}")
    print(f"  reward {best['reward_mean']:.3f}  spl {best['spl']:.3f}  "
          f"success {best['success_rate']:.3f}  "
          f"collisions {best['collision_rate']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _eval_config(args, checkpoint_path) -> RunConfig:
    """The run config for evaluation: --config, else the snapshot written
    next to the checkpoint, else defaults."""
    if args.config is not None:
        return load_config(find_config(args.config))
    if checkpoint_path is not None:
        snapshot = os.path.join(os.path.dirname(os.path.abspath(
            str(checkpoint_path))), "config.yaml")
        if os.path.exists(snapshot):
            return load_config(snapshot)
    return RunConfig()


def cmd_eval(args) -> int:
    if args.checkpoint == "oracle":
        config = _eval_config(args, None)
        agent = OracleAgent(
            success_distance=config.reward.success_distance)
        label = "oracle"
    else:
        policy, _, meta = NavPolicy.load(args.checkpoint)
        found = meta.get("version", "<missing>")
        if found != __version__:
            print(f"error: checkpoint {args.checkpoint} was written by "
                  f"pcnav {found}, this is pcnav {__version__}; refusing to "
                  f"evaluate", file=sys.stderr)
            return EXIT_RUNTIME
        config = _eval_config(args, args.checkpoint)
        agent = policy
        label = str(args.checkpoint)

    worlds = resolve_worlds(args.worlds or config.worlds.heldout)
    kwargs = build_env_kwargs(config)
    envs = [NavEnv([w], **kwargs) for w in worlds]

    base_seed = config.seeds.eval if args.seed is None else args.seed
    rows = []
    for i in range(args.seeds):
        log_path = args.log if (args.log and i == 0) else None
        metrics = evaluate(agent, envs, args.episodes,
                           conditions=args.conditions,
                           seed=base_seed + i, log_path=log_path)
        rows.append(dict(seed=base_seed + i, **metrics))

    keys = ("reward_mean", "spl", "success_rate", "collision_rate")
    stacked = {k: np.array([r[k] for r in rows]) for k in keys}
    print(f"{label}: {args.episodes} episodes x {args.seeds} seeds, "
          f"conditions {args.conditions}")
    print(f"{'metric':<16}{'mean':>10}{'std':>10}")
    for k in keys:
        print(f"{k:<16}{stacked[k].mean():>10.4f}{stacked[k].std():>10.4f}")

    out = args.out
    if out is None:
        base = "." if args.checkpoint == "oracle" else os.path.dirname(
            os.path.abspath(args.checkpoint))
        out = os.path.join(base, f"eval_{args.conditions}.csv")
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("seed",) + METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        writer.writerow(dict(
            seed="mean", condition=args.conditions, episodes=args.episodes,
            reward_mean=stacked["reward_mean"].mean(),
            reward_std=float(np.mean([r["reward_std"] for r in rows])),
            spl=stacked["spl"].mean(),
            success_rate=stacked["success_rate"].mean(),
            success_std=stacked["success_rate"].std(),
            collision_rate=stacked["collision_rate"].mean()))
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay


_LOG_FIELDS = ("episode", "step", "x", "y", "heading", "action", "reward",
               "collided", "geodesic", "goal_x", "goal_y")


def read_log(path) -> list:
    """Parse a trajectory JSONL log, reporting the line of any bad record."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise ReplayLogError(f"log file not found: {path}") from None
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as err:
            raise ReplayLogError(
                f"{path}:{lineno}: malformed log line: {err}") from None
        missing = [k for k in _LOG_FIELDS if k not in row]
        if not isinstance(row, dict) or missing:
            raise ReplayLogError(
                f"{path}:{lineno}: log record is missing {missing}")
        rows.append(row)
    return rows


def group_episodes(rows) -> list:
    """Per-episode row lists, ordered by episode then step."""
    episodes = {}
    for row in rows:
        episodes.setdefault(row["episode"], []).append(row)
    return [sorted(v, key=lambda r: r["step"])
            for _, v in sorted(episodes.items())]


def replay_jsonl(episodes) -> str:
    """One JSON object per episode: the polyline plus per-step metadata."""
    lines = []
    for steps in episodes:
        lines.append(json.dumps({
            "episode": steps[0]["episode"],
            "goal": [steps[0]["goal_x"], steps[0]["goal_y"]],
            "vertices": [[r["x"], r["y"]] for r in steps],
            "steps": [{k: r[k] for k in
                       ("step", "heading", "action", "reward", "collided",
                        "geodesic")} for r in steps],
        }))
    return "".join(line + "\n" for line in lines)


def replay_csv(episodes) -> str:
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_LOG_FIELDS, extrasaction="ignore")
    writer.writeheader()
    for steps in episodes:
        for row in steps:
            writer.writerow(row)
    return buf.getvalue()


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def replay_svg(episodes) -> str:
    """An SVG overlay: one path per episode plus a goal marker each.

    The y axis is flipped so the image matches the world's convention
    (y up); coordinates are in meters.
    """
    xs, ys = [], []
    for steps in episodes:
        xs += [r["x"] for r in steps] + [steps[0]["goal_x"]]
        ys += [r["y"] for r in steps] + [steps[0]["goal_y"]]
    margin = 0.5
    x0, x1 = min(xs) - margin, max(xs) + margin
    y0, y1 = min(ys) - margin, max(ys) + margin

    def fy(y):  # flip: world y up, SVG y down
        return y0 + y1 - y

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'viewBox="{x0:.3f} {y0:.3f} {x1 - x0:.3f} {y1 - y0:.3f}">']
    for i, steps in enumerate(episodes):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " L ".join(f"{r['x']:.4f} {fy(r['y']):.4f}" for r in steps)
        parts.append(f'  <path data-episode="{steps[0]["episode"]}" '
                     f'd="M {coords}" fill="none" stroke="{color}" '
                     f'stroke-width="0.05"/>')
        parts.append(f'  <circle data-episode="{steps[0]["episode"]}" '
                     f'class="goal" cx="{steps[0]["goal_x"]:.4f}" '
                     f'cy="{fy(steps[0]["goal_y"]):.4f}" r="0.1" '
                     f'fill="none" stroke="{color}" stroke-width="0.03"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_replay(args) -> int:
    rows = read_log(args.log)
    if not rows:
        text = ""
    elif args.format == "jsonl":
        text = replay_jsonl(group_episodes(rows))
    elif args.format == "csv":
        text = replay_csv(group_episodes(rows))
    else:
        text = replay_svg(group_episodes(rows))
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    rows = run_suite(args.suite, repeats=args.repeats)
    print(format_rows(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcnav",
        description="Point-cloud point-goal navigation: train, evaluate, "
                    "replay, benchmark.")
    parser.add_argument("--version", action="version",
                        version=f"pcnav {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the PPO training protocol")
    p.add_argument("--config", required=True,
                   help="run config (searched in $PCNAV_CONFIG_DIR too)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's train/eval seeds")
    p.add_argument("--out", default=None, help="override the output dir")
    p.add_argument("--encoder", choices=ENCODER_CHOICES, default=None,
                   help="override the config's encoder variant")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or 'oracle')")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'oracle' for the scripted "
                        "shortest-path agent")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--conditions", choices=CONDITION_CHOICES, default="none",
                   help="evaluation-time randomization")
    p.add_argument("--worlds", default=None,
                   help="world split name or .map directory "
                        "(default: the config's heldout corpus)")
    p.add_argument("--config", default=None,
                   help="run config (default: snapshot next to checkpoint)")
    p.add_argument("--seeds", type=int, default=3,
                   help="number of evaluation seeds")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--log", default=None,
                   help="write a trajectory JSONL for the first seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="export trajectories from an eval log")
    p.add_argument("--log", required=True, help="trajectory JSONL from eval")
    p.add_argument("--format", choices=REPLAY_FORMATS, required=True)
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench", help="latency percentiles for hot paths")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ReplayLogError, CheckpointFormatError, ContractViolationError,
            FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
