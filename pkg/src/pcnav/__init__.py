"""PointGoal navigation on canonical base-frame point clouds.

Subsystems: geom (frames/camera), cloud (pipeline + ICP), sim (world/agent),
task (environment/reward/metrics), nn (autodiff, encoders, policy),
rl (PPO), cli (operator commands), kernels (numba/numpy hot paths).
"""

__version__ = "0.1.0"


def builtin_worlds_dir(split: str) -> str:
    """Path of a shipped world split: 'simple' or 'complex'."""
    from importlib.resources import files

    if split not in ("simple", "complex"):
        raise ValueError(f"unknown world split {split!r}")
    return str(files("pcnav") / "worlds" / split)
