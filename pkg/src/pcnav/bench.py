"""Steady-state latency percentiles for the hot paths.

Three suites:

* ``raycast``  — depth rendering, timed once per kernel backend so the
  compiled and reference implementations can be compared directly;
* ``pipeline`` — the full per-step observation chain (render, back-project,
  integrate, downsample) at 256 and 1024 target points;
* ``encoder``  — policy forward passes per encoder variant.

Every case reports p50/p90/p99/mean over repeated calls after a warmup
(which also absorbs JIT compilation).  The per-step pipeline carries a soft
real-time budget of 10 ms at 256 points; the budget is reported, not
enforced.
"""

import math
import time

import numpy as np

from . import builtin_worlds_dir
from .cloud import (DownsampleConfig, KeyframeBuffer, downsample_chain,
                    integrate)
from .geom import base_in_world, compose, to_base_frame
from .kernels import BACKEND, available_backends, get_backend
from .nn import (DEPTH_BASELINE, MULTISCALE, POINTNET, EncoderConfig,
                 NavPolicy, PolicyConfig, no_grad)
from .sim import load_worlds, render_depth, sample_episode
from .task import DEFAULT_CAMERA

SUITES = ("raycast", "pipeline", "encoder")
PIPELINE_BUDGET_MS = 10.0

FIELDS = ("suite", "case", "backend", "repeats",
          "p50_ms", "p90_ms", "p99_ms", "mean_ms")


def time_case(fn, repeats: int, warmup: int = 3) -> np.ndarray:
    """Per-call wall-clock seconds after a warmup."""
    for _ in range(warmup):
        fn()
    out = np.empty(repeats)
    for i in range(repeats):
        start = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - start
    return out


def _row(suite, case, backend, seconds) -> dict:
    ms = np.asarray(seconds) * 1e3
    return {
        "suite": suite, "case": case, "backend": backend,
        "repeats": ms.size,
        "p50_ms": float(np.percentile(ms, 50)),
        "p90_ms": float(np.percentile(ms, 90)),
        "p99_ms": float(np.percentile(ms, 99)),
        "mean_ms": float(ms.mean()),
    }


def _scene():
    """A deterministic world / agent pose / camera for the timed cases."""
    world = load_worlds(builtin_worlds_dir("simple"))[0]
    episode = sample_episode(world, np.random.default_rng(0), 1.0, 3.0)
    start = episode.start
    base_pose = base_in_world(start.x, start.y, start.heading)
    return world, base_pose, DEFAULT_CAMERA


def bench_raycast(repeats: int = 50) -> list:
    """64x64 depth render, one case per available kernel backend."""
    world, base_pose, cam = _scene()
    cam_pose = compose(base_pose, cam.extrinsic)
    pos = cam_pose.translation
    rows = []
    for name in available_backends():
        kernel = get_backend(name).raycast_depth

        def call():
            kernel(world.occ_u8, world.cell_size, world.wall_height,
                   world.has_ceiling, pos, cam_pose.rotation,
                   cam.fx, cam.fy, cam.cx, cam.cy,
                   cam.width, cam.height, cam.min_depth, cam.max_depth)

        rows.append(_row("raycast", f"{cam.width}x{cam.height}", name,
                         time_case(call, repeats, warmup=5)))
    return rows


def bench_pipeline(repeats: int = 100) -> list:
    """Full per-step observation chain at 256 and 1024 target points."""
    world, base_pose, cam = _scene()
    rows = []
    for target in (256, 1024):
        cfg = DownsampleConfig(target_points=target)
        buffer = KeyframeBuffer(capacity=8)
        rng = np.random.default_rng(1)

        def step():
            depth = render_depth(world, compose(base_pose, cam.extrinsic),
                                 cam)
            cloud = to_base_frame(depth, cam)
            buffer.add(cloud, base_pose)
            merged = integrate(buffer, base_pose)
            downsample_chain(merged, cfg, rng)

        # Warmup long enough to fill the keyframe buffer to steady state.
        rows.append(_row("pipeline", f"{target}pt", BACKEND,
                         time_case(step, repeats, warmup=10)))
    return rows


def bench_encoder(repeats: int = 30) -> list:
    """Policy forward passes (batch 1) per encoder variant."""
    rng = np.random.default_rng(2)
    cases = [(POINTNET, 256), (POINTNET, 1024), (MULTISCALE, 256),
             (DEPTH_BASELINE, None)]
    rows = []
    for variant, points in cases:
        policy = NavPolicy(PolicyConfig(encoder=EncoderConfig(variant=variant)),
                           np.random.default_rng(3))
        if variant == DEPTH_BASELINE:
            obs = rng.uniform(0.1, 10.0, size=(1, 64, 64)).astype(np.float32)
            case = "64x64"
        else:
            obs = rng.uniform(-5, 5, size=(1, points, 3)).astype(np.float32)
            case = f"{points}pt"
        goal = np.array([[2.0, 0.5]])
        prev = np.array([-1], dtype=np.int64)
        state = policy.initial_state(1)

        def call():
            with no_grad():
                policy.step(obs, goal, prev, state)

        rows.append(_row("encoder", f"{variant}@{case}", "numpy",
                         time_case(call, repeats, warmup=2)))
    return rows


def run_suite(suite: str, repeats: int | None = None) -> list:
    if suite == "raycast":
        return bench_raycast(**({} if repeats is None
                                else {"repeats": repeats}))
    if suite == "pipeline":
        return bench_pipeline(**({} if repeats is None
                                 else {"repeats": repeats}))
    if suite == "encoder":
        return bench_encoder(**({} if repeats is None
                                else {"repeats": repeats}))
    raise ValueError(f"unknown suite {suite!r} (use {', '.join(SUITES)})")


def format_rows(rows) -> str:
    """Fixed-width table, one case per line."""
    header = f"{'suite':<10} {'case':<22} {'backend':<8} {'n':>4} " \
             f"{'p50 ms':>9} {'p90 ms':>9} {'p99 ms':>9} {'mean ms':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['suite']:<10} {r['case']:<22} {r['backend']:<8} "
            f"{r['repeats']:>4} {r['p50_ms']:>9.3f} {r['p90_ms']:>9.3f} "
            f"{r['p99_ms']:>9.3f} {r['mean_ms']:>9.3f}")
    for r in rows:
        if r["suite"] == "pipeline" and r["case"] == "256pt":
            verdict = "within" if r["p50_ms"] < PIPELINE_BUDGET_MS else "over"
            lines.append(f"pipeline@256pt p50 {r['p50_ms']:.3f} ms — "
                         f"{verdict} the {PIPELINE_BUDGET_MS:.0f} ms budget")
    return "\n".join(lines)
