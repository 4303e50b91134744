"""Point-goal navigation task on floorplan worlds.

Observations are built by the full sensing pipeline — raycast a depth image,
lift it to the robot base frame, merge recent keyframes, crop/voxel/randomly
downsample to a fixed-size cloud — so a policy sees the same canonical-space
representation regardless of camera mounting.  The raw depth frame rides
along for sensor-space baselines.

Rewards follow the shaped point-goal form: a constant per-step slack penalty,
the change in geodesic distance to the goal, and a terminal bonus when the
agent Stops within the success radius.  Collisions optionally terminate the
episode (the training variant).

Per-episode domain randomization covers the camera mounting/intrinsics
(condition A) and odometry noise (condition B), which is what the
robot-to-robot ablation harness toggles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import kernels
from .cloud import DownsampleConfig, KeyframeBuffer, downsample_chain, integrate
from .geom import (CameraModel, ContractViolationError, base_in_world,
                   camera_extrinsic, compose, to_base_frame)
from .nn import DEPTH_BASELINE
from .sim import (ACTION_NAMES, FORWARD, STOP, TURN_ANGLE, TURN_LEFT,
                  TURN_RIGHT, AgentState, FloorplanWorld, MotionNoiseModel,
                  geodesic_distance, render_depth, sample_episode, step_agent,
                  wrap_angle)

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RewardConfig:
    """Shaped point-goal reward: -slack - (geo(t) - geo(t-1)) + success bonus."""

    slack: float = 0.01            # reward units charged every step
    success_reward: float = 10.0   # terminal bonus
    success_distance: float = 0.2  # meters (geodesic)
    terminate_on_collision: bool = True

    def __post_init__(self):
        if self.slack < 0:
            raise ContractViolationError("slack must be >= 0")
        if self.success_reward <= 0:
            raise ContractViolationError("success_reward must be > 0")
        if self.success_distance <= 0:
            raise ContractViolationError("success_distance must be > 0")


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if lo > hi:
        raise ContractViolationError(f"{name} range has low > high")


@dataclass(frozen=True)
class CameraRanges:
    """Per-episode camera draw ranges (condition A)."""

    mount_height: tuple = (0.5, 1.5)                              # meters
    pitch: tuple = (-math.radians(45.0), 0.0)                     # radians
    yaw: tuple = (-math.radians(10.0), math.radians(10.0))        # radians
    hfov: tuple = (math.radians(55.0), math.radians(90.0))        # radians

    def __post_init__(self):
        for name in ("mount_height", "pitch", "yaw", "hfov"):
            _check_range(name, getattr(self, name))


@dataclass(frozen=True)
class RandomizationConfig:
    """What gets randomized per episode.

    ``randomize_camera`` is ablation condition A (a fresh camera drawn from
    ``camera`` at every reset); ``randomize_motion`` is condition B (odometry
    noise from ``motion`` applied to every move).
    """

    camera: CameraRanges = field(default_factory=CameraRanges)
    motion: MotionNoiseModel = field(
        default_factory=lambda: MotionNoiseModel(enabled=True))
    randomize_camera: bool = False
    randomize_motion: bool = False

    @staticmethod
    def for_conditions(conditions: str,
                       base: "RandomizationConfig | None" = None
                       ) -> "RandomizationConfig":
        """Build flags from a condition label: none | A | B | AB."""
        if conditions not in ("none", "A", "B", "AB"):
            raise ContractViolationError(
                f"unknown conditions {conditions!r} (use none, A, B, or AB)")
        base = base or RandomizationConfig()
        return replace(base, randomize_camera="A" in conditions,
                       randomize_motion="B" in conditions)


class GoalObservation(NamedTuple):
    rho: float  # straight-line distance to goal, meters
    phi: float  # bearing in the agent frame, radians, (-pi, pi]


class Observation(NamedTuple):
    points: np.ndarray      # (target_points, 3) base-frame cloud
    depth: np.ndarray       # (H, W) raw depth frame, meters
    goal: GoalObservation
    empty_source: bool      # cloud came from an empty integration result


class StepOutcome(NamedTuple):
    observation: Observation
    reward: float
    done: bool
    info: dict  # success, collision, geodesic_to_goal, path_length_so_far


def relative_goal(state: AgentState, goal) -> GoalObservation:
    """Straight-line distance and agent-frame bearing to the goal."""
    dx = goal[0] - state.x
    dy = goal[1] - state.y
    rho = math.hypot(dx, dy)
    phi = wrap_angle(math.atan2(dy, dx) - state.heading) if rho > 0 else 0.0
    return GoalObservation(rho=rho, phi=phi)


# ---------------------------------------------------------------------------
# the environment


DEFAULT_CAMERA = CameraModel.from_hfov(
    64, 64, math.radians(70.0),
    extrinsic=camera_extrinsic(1.0, pitch=math.radians(-20.0)))


class NavEnv:
    """One navigation environment over a world corpus.

    ``reset(rng)`` keeps the generator for the whole episode: it drives the
    episode draw, the camera draw (condition A), odometry noise (condition B),
    and the random downsampling stage, so a seed fixes the trajectory
    bitwise.  One instance per rollout worker; instances share nothing.
    """

    def __init__(self, worlds, camera: CameraModel = DEFAULT_CAMERA,
                 reward: RewardConfig | None = None,
                 randomization: RandomizationConfig | None = None,
                 downsample: DownsampleConfig | None = None,
                 max_steps: int = 500, keyframes: int = 8,
                 goal_distance: tuple = (1.0, 3.0)):
        if not worlds:
            raise ContractViolationError("need at least one world")
        if max_steps < 1:
            raise ContractViolationError("max_steps must be >= 1")
        _check_range("goal_distance", goal_distance)
        self.worlds = list(worlds)
        self.base_camera = camera
        self.reward = reward or RewardConfig()
        self.randomization = randomization or RandomizationConfig()
        self.downsample = downsample or DownsampleConfig()
        self.max_steps = max_steps
        self.goal_distance = goal_distance
        self._buffer = KeyframeBuffer(capacity=keyframes)
        self._rng: np.random.Generator | None = None
        self._active = False
        # Exposed episode state (read-only by convention).
        self.world: FloorplanWorld | None = None
        self.state: AgentState | None = None
        self.goal: tuple | None = None
        self.camera: CameraModel = camera
        self.camera_draw: dict = {}
        self.steps = 0
        self.path_length = 0.0
        self.geodesic = math.inf
        self.episode_id = -1

    # -- episode control ----------------------------------------------------

    def reset(self, rng: np.random.Generator) -> Observation:
        """Sample an episode (world, start, goal, camera) and observe once."""
        self._rng = rng
        self.episode_id += 1
        self.world = self.worlds[int(rng.integers(len(self.worlds)))]
        episode = sample_episode(self.world, rng, self.goal_distance[0],
                                 self.goal_distance[1])
        self.state = episode.start
        self.goal = episode.goal
        self.camera, self.camera_draw = self._draw_camera(rng)
        self.steps = 0
        self.path_length = 0.0
        self.geodesic = self._geo()
        self._active = True
        self._buffer.clear()
        return self._observe()

    def step(self, action: int) -> StepOutcome:
        """Apply one action; returns the full outcome for this step."""
        if not self._active:
            raise ContractViolationError(
                "step after episode end (reset the environment first)")
        noise = (replace(self.randomization.motion, enabled=True)
                 if self.randomization.randomize_motion else None)
        prev_geo = self.geodesic
        prev_pos = (self.state.x, self.state.y)
        self.state, collided = step_agent(self.state, action, self.world,
                                          noise=noise, rng=self._rng)
        self.steps += 1
        self.path_length += math.hypot(self.state.x - prev_pos[0],
                                       self.state.y - prev_pos[1])
        self.geodesic = self._geo()
        success = (action == STOP
                   and self.geodesic < self.reward.success_distance)
        collision_terminal = self.reward.terminate_on_collision and collided
        if collision_terminal:
            success = False
        timeout = self.steps >= self.max_steps
        done = success or collision_terminal or timeout
        reward = (-self.reward.slack - (self.geodesic - prev_geo)
                  + (self.reward.success_reward if success else 0.0))
        if done:
            self._active = False
        info = {"success": success, "collision": collided,
                "geodesic_to_goal": self.geodesic,
                "path_length_so_far": self.path_length}
        return StepOutcome(self._observe(), reward, done, info)

    # -- internals ------------------------------------------------------------

    def _draw_camera(self, rng: np.random.Generator):
        if not self.randomization.randomize_camera:
            return self.base_camera, {}
        r = self.randomization.camera
        height = rng.uniform(*r.mount_height)
        pitch = rng.uniform(*r.pitch)
        yaw = rng.uniform(*r.yaw)
        hfov = rng.uniform(*r.hfov)
        cam = CameraModel.from_hfov(
            self.base_camera.width, self.base_camera.height, hfov,
            min_depth=self.base_camera.min_depth,
            max_depth=self.base_camera.max_depth,
            extrinsic=camera_extrinsic(height, pitch=pitch, yaw=yaw))
        draw = {"height": height, "pitch": pitch, "yaw": yaw, "hfov": hfov}
        return cam, draw

    def _geo(self) -> float:
        return geodesic_distance(self.world, (self.state.x, self.state.y),
                                 self.goal,
                                 clearance=self.state.footprint_radius)

    def _observe(self) -> Observation:
        base_pose = base_in_world(self.state.x, self.state.y,
                                  self.state.heading)
        depth = render_depth(self.world,
                             compose(base_pose, self.camera.extrinsic),
                             self.camera)
        self._buffer.add(to_base_frame(depth, self.camera), base_pose)
        merged = integrate(self._buffer, base_pose)
        cloud = downsample_chain(merged, self.downsample, self._rng)
        return Observation(points=cloud.points, depth=depth.data,
                           goal=relative_goal(self.state, self.goal),
                           empty_source=cloud.empty_source)


# ---------------------------------------------------------------------------
# scripted shortest-path agent


class OracleAgent:
    """Follows the geodesic next-hop field; Stops inside the success radius.

    A pure function of the environment's ground-truth state — used as the
    upper-baseline in evaluations and for exercising the metrics.
    """

    def __init__(self, lookahead_cells: int = 3, success_distance: float = 0.2):
        self.lookahead = lookahead_cells
        self.success_distance = success_distance

    def action_for(self, env: NavEnv) -> int:
        return oracle_action(env.world, env.state, env.goal,
                             success_distance=self.success_distance,
                             lookahead_cells=self.lookahead)


def oracle_action(world: FloorplanWorld, state: AgentState, goal,
                  success_distance: float = 0.2,
                  lookahead_cells: int = 4) -> int:
    """Greedy geodesic descent with collision-checked forward steps.

    Scores every heading the agent could rotate to by the geodesic distance
    left after one full forward step from it, keeping only headings whose
    swept footprint stays clear of walls (the same sweep the simulator uses,
    so an emitted Forward never collides).  A small penalty for deviating
    from the Dijkstra next-hop bearing breaks ties toward the planned path.
    """
    from .sim import FORWARD_STEP, UnreachableError

    clearance = state.footprint_radius
    if geodesic_distance(world, (state.x, state.y), goal,
                         clearance=clearance) < success_distance:
        return STOP

    # Guidance field.  A corridor exactly as wide as the footprint is
    # traversable on the cell graph but cannot be threaded by the coarse
    # turn/step action lattice, so prefer routes that keep a cell of spare
    # clearance and fall back to the tight field only when inflation
    # disconnects the start from the goal.
    guide = clearance
    tx, ty = goal
    for cand in (clearance + world.cell_size, clearance):
        try:
            goal_cell = world.snap_cell(goal[0], goal[1], cand)
            cx, cy = world.snap_cell(state.x, state.y, cand)
            dgrid, nxt_x, nxt_y = world.goal_field(goal_cell, cand)
        except UnreachableError:
            continue
        if not np.isfinite(dgrid[cy, cx]):
            continue
        guide = cand
        # Reference bearing a few hops down the next-hop chain (the goal
        # point itself once the chain ends inside the goal cell).
        for _ in range(lookahead_cells):
            nx_, ny_ = nxt_x[cy, cx], nxt_y[cy, cx]
            if nx_ < 0:
                tx, ty = goal
                break
            cx, cy = int(nx_), int(ny_)
            tx, ty = world.cell_center(cx, cy)
        break
    path_bearing = math.atan2(ty - state.y, tx - state.x)

    def scan(score_clearance):
        best = None  # (score, turns, signed turn count)
        for i in range(-18, 18):
            heading = state.heading + i * TURN_ANGLE
            dx = FORWARD_STEP * math.cos(heading)
            dy = FORWARD_STEP * math.sin(heading)
            _, hit = kernels.sweep_disk(world.occ_u8, world.cell_size,
                                        state.x, state.y, dx, dy, clearance)
            if hit:
                continue
            try:
                end_geo = geodesic_distance(
                    world, (state.x + dx, state.y + dy), goal,
                    clearance=score_clearance)
            except UnreachableError:
                continue
            if not math.isfinite(end_geo):
                continue
            score = end_geo + 0.02 * abs(wrap_angle(heading - path_bearing))
            key = (score, abs(i))
            if best is None or key < best[:2]:
                best = (score, abs(i), i)
        return best

    best = scan(guide)
    if best is None and guide != clearance:
        best = scan(clearance)  # agent is inside a tight pocket
    if best is None:
        return TURN_LEFT  # cornered: rotate in place and retry
    i = best[2]
    if i == 0:
        return FORWARD
    return TURN_LEFT if i > 0 else TURN_RIGHT


# ---------------------------------------------------------------------------
# metrics


def spl(episodes) -> float:
    """Success weighted by path length, averaged over episodes.

    Each episode record needs ``success`` (flag), ``shortest`` (meters, > 0),
    and ``path`` (meters traveled).
    """
    episodes = list(episodes)
    if not episodes:
        raise ContractViolationError("SPL of an empty episode set is undefined")
    total = 0.0
    for ep in episodes:
        shortest = float(ep["shortest"])
        if shortest <= 0:
            raise ContractViolationError("shortest path must be > 0")
        if ep["success"]:
            total += shortest / max(float(ep["path"]), shortest)
    return total / len(episodes)


def symmetric_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Mean closest-point distance, averaged over both directions."""
    if len(a) == 0 or len(b) == 0:
        raise ContractViolationError("chamfer distance needs nonempty clouds")
    _, d_ab = kernels.nearest_neighbors(np.ascontiguousarray(a),
                                        np.ascontiguousarray(b), 0.25)
    _, d_ba = kernels.nearest_neighbors(np.ascontiguousarray(b),
                                        np.ascontiguousarray(a), 0.25)
    return 0.5 * (float(np.sqrt(d_ab).mean()) + float(np.sqrt(d_ba).mean()))


# ---------------------------------------------------------------------------
# evaluation


def _policy_actor(policy):
    """Step closure for a recurrent policy: feeds points or depth per variant."""
    wants_depth = policy.config.encoder.variant == DEPTH_BASELINE
    state = {"h": policy.initial_state(1), "prev": np.array([-1])}

    def act(env: NavEnv, obs: Observation, rng: np.random.Generator) -> int:
        arr = obs.depth if wants_depth else obs.points
        goal = np.array([[obs.goal.rho, obs.goal.phi]])
        out = policy.act(arr[None], goal, state["prev"], state["h"], rng)
        state["h"] = out.state
        state["prev"] = out.actions
        return int(out.actions[0])

    def reset():
        state["h"] = policy.initial_state(1)
        state["prev"] = np.array([-1])

    return act, reset


def _oracle_actor(agent: OracleAgent):
    def act(env: NavEnv, obs: Observation, rng: np.random.Generator) -> int:
        return agent.action_for(env)

    return act, lambda: None


def evaluate(policy, env_set, episodes: int, conditions: str = "none",
             seed: int = 0, log_path=None) -> dict:
    """Run seeded evaluation episodes and aggregate the navigation metrics.

    ``policy`` is either a recurrent policy (``act``/``initial_state``) or an
    :class:`OracleAgent`.  Episodes cycle through ``env_set``; each gets its
    own generator derived from (seed, episode index), so metrics are
    reproducible and independent of ``env_set`` internals.

    Returns means and standard deviations across episodes plus the aggregate
    SPL / success / collision rates.
    """
    env_set = list(env_set)
    if not env_set:
        raise ContractViolationError("evaluate needs at least one environment")
    if isinstance(policy, OracleAgent):
        act, reset_actor = _oracle_actor(policy)
    else:
        act, reset_actor = _policy_actor(policy)

    for env in env_set:
        env.randomization = RandomizationConfig.for_conditions(
            conditions, env.randomization)

    records = []
    rewards = []
    log_lines = []
    for ep in range(episodes):
        env = env_set[ep % len(env_set)]
        rng = np.random.default_rng([seed, ep])
        obs = env.reset(rng)
        reset_actor()
        shortest = env.geodesic
        total = 0.0
        collided_any = False
        done = False
        while not done:
            action = act(env, obs, rng)
            outcome = env.step(action)
            total += outcome.reward
            collided_any = collided_any or outcome.info["collision"]
            if log_path is not None:
                log_lines.append(json.dumps({
                    "episode": ep, "step": env.steps,
                    "x": env.state.x, "y": env.state.y,
                    "heading": env.state.heading,
                    "action": ACTION_NAMES[action],
                    "reward": outcome.reward,
                    "collided": outcome.info["collision"],
                    "geodesic": outcome.info["geodesic_to_goal"],
                    "goal_x": env.goal[0], "goal_y": env.goal[1],
                    "camera": env.camera_draw}))
            obs = outcome.observation
            done = outcome.done
        records.append({"success": outcome.info["success"],
                        "shortest": shortest,
                        "path": outcome.info["path_length_so_far"],
                        "collided": collided_any})
        rewards.append(total)

    if log_path is not None:
        with open(log_path, "w") as f:
            for line in log_lines:
                f.write(line + "\n")

    rewards = np.asarray(rewards)
    successes = np.array([r["success"] for r in records], dtype=float)
    collisions = np.array([r["collided"] for r in records], dtype=float)
    return {
        "condition": conditions,
        "episodes": episodes,
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "spl": spl(records),
        "success_rate": float(successes.mean()),
        "success_std": float(successes.std()),
        "collision_rate": float(collisions.mean()),
    }


METRICS_FIELDS = ("condition", "episodes", "reward_mean", "reward_std",
                  "spl", "success_rate", "success_std", "collision_rate")


def write_metrics_csv(path, rows) -> None:
    """Metrics summary: one row per evaluated condition."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_FIELDS})
