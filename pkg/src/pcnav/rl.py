"""PPO training: synchronous rollouts, GAE, clipped updates, checkpointing.

The loop is the classic recurrent-PPO recipe: N workers step their own
environments for a fixed segment length under the current policy, advantages
come from generalized advantage estimation with a bootstrap value at the
segment cut, and the update maximizes the clipped surrogate (plus value and
entropy terms) over minibatches that keep whole worker segments together so
recurrent-state replay stays valid.  Training checkpoints periodically and
selects the final model by evaluating every checkpoint on held-out worlds.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import __version__
from .geom import ContractViolationError
from .nn import (DEPTH_BASELINE, Adam, EncoderConfig, NavPolicy, PolicyConfig,
                 Tensor, minimum, no_grad)
from .task import NavEnv, evaluate


class RolloutError(RuntimeError):
    """An environment failed during collection; the message names the worker."""


class NonFiniteLossError(RuntimeError):
    """The PPO loss left the reals; abort instead of poisoning parameters."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PpoConfig:
    rollout_length: int = 128
    num_workers: int = 4
    updates: int = 2000
    epochs: int = 4
    minibatches: int = 2
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    value_weight: float = 0.5
    entropy_weight: float = 0.01
    learning_rate: float = 2.5e-4
    lr_decay: bool = True
    max_grad_norm: float = 0.5
    checkpoint_every: int = 100

    def __post_init__(self):
        for name in ("rollout_length", "num_workers", "epochs", "minibatches",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ContractViolationError(f"{name} must be >= 1")
        if self.updates < 0:
            raise ContractViolationError("updates must be >= 0")
        if self.clip <= 0:
            raise ContractViolationError("clip must be > 0")
        for name in ("gamma", "lam"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ContractViolationError(f"{name} must be in (0, 1]")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ContractViolationError(
                "learning_rate and max_grad_norm must be > 0")
        if self.value_weight < 0 or self.entropy_weight < 0:
            raise ContractViolationError("loss weights must be >= 0")
        if self.num_workers % self.minibatches:
            raise ContractViolationError(
                "minibatches must divide num_workers (minibatches slice "
                "whole worker segments)")


# ---------------------------------------------------------------------------
# rollout collection


@dataclass
class RolloutWorker:
    """One environment plus the carry-over state the collector tracks for it."""

    env: NavEnv
    rng: np.random.Generator
    index: int
    obs: object = None
    h: np.ndarray | None = None
    prev_action: int = -1
    fresh: bool = True        # True when obs starts a new episode
    ep_reward: float = 0.0
    finished: list = field(default_factory=list)  # episode stats to drain


def make_workers(envs, seed: int) -> list:
    """Wrap environments as rollout workers with independent seeded streams."""
    workers = []
    for i, env in enumerate(envs):
        w = RolloutWorker(env=env, rng=np.random.default_rng([seed, i]),
                          index=i)
        try:
            w.obs = env.reset(w.rng)
        except Exception as err:
            raise RolloutError(f"worker {i}: {err}") from err
        workers.append(w)
    return workers


class RolloutBatch(NamedTuple):
    """One synchronous collection: axis 0 is time, axis 1 is the worker."""

    obs: np.ndarray           # (T, W, ...) point clouds or depth frames
    goals: np.ndarray         # (T, W, 2) rho/phi
    prev_actions: np.ndarray  # (T, W)
    masks: np.ndarray         # (T, W) 0.0 where a new episode starts
    actions: np.ndarray       # (T, W)
    log_probs: np.ndarray     # (T, W) under the collecting policy
    values: np.ndarray        # (T, W)
    rewards: np.ndarray       # (T, W)
    dones: np.ndarray         # (T, W) episode ended at this step
    start_state: np.ndarray   # (W, R) recurrent state at the segment start
    bootstrap: np.ndarray     # (W,) value of the post-segment observation


def collect_rollouts(policy, workers, config: PpoConfig,
                     rng: np.random.Generator) -> RolloutBatch:
    """Step every worker rollout_length times under the current policy.

    Episodes that end mid-segment reset inline (fresh seed stream per worker)
    and zero that worker's recurrent state; the mask marks the cut for the
    update's recurrent replay.  Completed-episode statistics accumulate on
    ``worker.finished`` for the caller to drain.
    """
    T, W = config.rollout_length, config.num_workers
    if len(workers) != W:
        raise ContractViolationError(
            f"config expects {W} workers, got {len(workers)}")
    wants_depth = policy.config.encoder.variant == DEPTH_BASELINE

    def obs_row(w):
        return w.obs.depth if wants_depth else w.obs.points

    for w in workers:
        if w.h is None:
            w.h = policy.initial_state(1)[0]
    start_state = np.stack([w.h for w in workers])

    obs = None
    goals = np.empty((T, W, 2), dtype=np.float64)
    prev_actions = np.empty((T, W), dtype=np.int64)
    masks = np.empty((T, W), dtype=np.float64)
    actions = np.empty((T, W), dtype=np.int64)
    log_probs = np.empty((T, W), dtype=np.float64)
    values = np.empty((T, W), dtype=np.float64)
    rewards = np.empty((T, W), dtype=np.float64)
    dones = np.empty((T, W), dtype=bool)

    for t in range(T):
        rows = np.stack([obs_row(w) for w in workers])
        if obs is None:
            obs = np.empty((T,) + rows.shape, dtype=np.float32)
        obs[t] = rows
        goals[t] = [(w.obs.goal.rho, w.obs.goal.phi) for w in workers]
        prev_actions[t] = [w.prev_action for w in workers]
        masks[t] = [0.0 if w.fresh else 1.0 for w in workers]
        out = policy.act(rows, goals[t], prev_actions[t],
                         np.stack([w.h for w in workers]), rng)
        actions[t] = out.actions
        log_probs[t] = out.log_probs
        values[t] = out.values
        for i, w in enumerate(workers):
            a = int(out.actions[i])
            try:
                outcome = w.env.step(a)
            except Exception as err:
                raise RolloutError(f"worker {w.index}: {err}") from err
            rewards[t, i] = outcome.reward
            dones[t, i] = outcome.done
            w.obs = outcome.observation
            w.h = out.state[i]
            w.prev_action = a
            w.fresh = False
            w.ep_reward += outcome.reward
            if outcome.done:
                w.finished.append({"reward": w.ep_reward,
                                   "success": bool(outcome.info["success"]),
                                   "length": w.env.steps})
                w.ep_reward = 0.0
                try:
                    w.obs = w.env.reset(w.rng)
                except Exception as err:
                    raise RolloutError(f"worker {w.index}: {err}") from err
                w.h = policy.initial_state(1)[0]
                w.prev_action = -1
                w.fresh = True

    rows = np.stack([obs_row(w) for w in workers])
    with no_grad():
        _, value, _ = policy.step(
            rows, np.array([(w.obs.goal.rho, w.obs.goal.phi)
                            for w in workers]),
            np.array([w.prev_action for w in workers]),
            np.stack([w.h for w in workers]))
    return RolloutBatch(obs=obs, goals=goals, prev_actions=prev_actions,
                        masks=masks, actions=actions, log_probs=log_probs,
                        values=values, rewards=rewards, dones=dones,
                        start_state=start_state,
                        bootstrap=value.data.astype(np.float64))


def drain_episode_stats(workers) -> list:
    """Pop and return the episode stats accumulated since the last drain."""
    stats = []
    for w in workers:
        stats.extend(w.finished)
        w.finished.clear()
    return stats


# ---------------------------------------------------------------------------
# advantage estimation and the clipped update


def compute_gae(batch: RolloutBatch, gamma: float, lam: float):
    """Raw GAE advantages and value targets (returns = advantages + values).

    delta_t = r_t + gamma * V(t+1) * not_done - V(t), bootstrapped past the
    segment cut; advantages are left unnormalized here so the estimator's
    identities hold exactly — the update normalizes per batch.
    """
    r = batch.rewards.astype(np.float64)
    v = batch.values.astype(np.float64)
    live = 1.0 - batch.dones.astype(np.float64)
    adv = np.zeros_like(r)
    nxt_value = batch.bootstrap.astype(np.float64)
    acc = np.zeros(r.shape[1])
    for t in range(r.shape[0] - 1, -1, -1):
        delta = r[t] + gamma * nxt_value * live[t] - v[t]
        acc = delta + gamma * lam * live[t] * acc
        adv[t] = acc
        nxt_value = v[t]
    return adv, adv + v


def ppo_update(policy, optimizer: Adam, batch: RolloutBatch,
               config: PpoConfig, lr: float | None = None) -> dict:
    """One PPO update: epochs x minibatches over whole worker segments.

    Each minibatch replays its segments through the recurrent policy, builds
    the clipped surrogate with batch-normalized advantages, and performs a
    single gradient step (global-norm clipped).  A non-finite loss aborts the
    whole update before any further parameter writes.
    """
    adv, ret = compute_gae(batch, config.gamma, config.lam)
    with np.errstate(invalid="ignore"):  # bad rewards abort below, not here
        norm = (adv - adv.mean()) / (adv.std() + 1e-8)
    slices = np.array_split(np.arange(batch.actions.shape[1]),
                            config.minibatches)
    dtype = policy.store.dtype
    totals = {"loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0,
              "entropy": 0.0, "grad_norm": 0.0}
    steps = 0
    for epoch in range(config.epochs):
        for mb, ids in enumerate(slices):
            policy.store.zero_grad()
            seq = policy.evaluate(batch.obs[:, ids], batch.goals[:, ids],
                                  batch.prev_actions[:, ids],
                                  batch.masks[:, ids],
                                  batch.start_state[ids],
                                  batch.actions[:, ids])
            old = Tensor(batch.log_probs[:, ids].astype(dtype))
            ratio = (seq.log_probs - old).exp()
            a = Tensor(norm[:, ids].astype(dtype))
            surrogate = minimum(
                ratio * a,
                ratio.clip(1.0 - config.clip, 1.0 + config.clip) * a)
            policy_loss = -surrogate.mean()
            verr = seq.values - Tensor(ret[:, ids].astype(dtype))
            value_loss = (verr * verr).mean()
            loss = (policy_loss + config.value_weight * value_loss
                    - config.entropy_weight * seq.entropy)
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} minibatch {mb} "
                    f"(optimizer step {optimizer.t})")
            loss.backward()
            grad_norm = policy.store.clip_grad_norm(config.max_grad_norm)
            optimizer.step(lr)
            totals["loss"] += loss.item()
            totals["policy_loss"] += policy_loss.item()
            totals["value_loss"] += value_loss.item()
            totals["entropy"] += seq.entropy.item()
            totals["grad_norm"] += grad_norm
            steps += 1
    return {k: v / steps for k, v in totals.items()}


# ---------------------------------------------------------------------------
# the training loop


TRAIN_FIELDS = ("update", "env_steps", "episode_reward_mean", "success_rate",
                "policy_loss", "value_loss", "entropy", "wall_clock")


def default_policy_config(variant: str) -> PolicyConfig:
    return PolicyConfig(encoder=EncoderConfig(variant=variant))


def train(config: PpoConfig, train_worlds, heldout_worlds, variant: str,
          out_dir, seed: int = 0, policy_config: PolicyConfig | None = None,
          env_kwargs: dict | None = None, eval_episodes: int = 20,
          resume_from=None) -> dict:
    """Run the full PPO protocol and select the best checkpoint.

    Alternates collect/update for ``config.updates`` iterations over
    environments built on ``train_worlds``, streaming one metrics row per
    update to ``out_dir/train_metrics.csv`` and checkpointing every
    ``checkpoint_every`` updates.  Afterwards every checkpoint is evaluated
    on ``heldout_worlds`` and the best mean reward wins (the model-selection
    rule); the summary dict names it.  With ``updates=0`` the initial random
    policy is checkpointed and evaluated, nothing more.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env_kwargs = dict(env_kwargs or {})
    policy_config = policy_config or default_policy_config(variant)

    start_update = 0
    if resume_from is not None:
        policy, extra, meta = NavPolicy.load(resume_from)
        if meta["policy"] != _config_as_meta(policy_config):
            raise ContractViolationError(
                f"{resume_from}: checkpoint policy config does not match")
        optimizer = Adam(policy.store, lr=config.learning_rate)
        optimizer.load_arrays(extra)
        start_update = int(meta["update"])
    else:
        # Branch indices well above any worker id keep the streams disjoint.
        policy = NavPolicy(policy_config, np.random.default_rng([seed, 9001]))
        optimizer = Adam(policy.store, lr=config.learning_rate)

    envs = [NavEnv(train_worlds, **env_kwargs)
            for _ in range(config.num_workers)]
    workers = make_workers(envs, seed=seed)
    act_rng = np.random.default_rng([seed, 9002])

    def save_checkpoint(update: int):
        path = out_dir / f"checkpoint_{update:06d}.ckpt"
        policy.save(path, extra_arrays=optimizer.state_arrays(),
                    meta={"update": update,
                          "env_steps": update * config.rollout_length
                          * config.num_workers,
                          "variant": variant, "seed": seed,
                          "version": __version__})
        return path

    checkpoints = []
    t0 = time.perf_counter()
    csv_path = out_dir / "train_metrics.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_FIELDS)
        writer.writeheader()
        for u in range(start_update, config.updates):
            lr = config.learning_rate
            if config.lr_decay:
                lr = lr * (1.0 - u / config.updates)
            batch = collect_rollouts(policy, workers, config, act_rng)
            stats = ppo_update(policy, optimizer, batch, config, lr=lr)
            episodes = drain_episode_stats(workers)
            rew = [e["reward"] for e in episodes]
            suc = [e["success"] for e in episodes]
            writer.writerow({
                "update": u + 1,
                "env_steps": (u + 1) * config.rollout_length
                * config.num_workers,
                "episode_reward_mean": float(np.mean(rew)) if rew
                else float("nan"),
                "success_rate": float(np.mean(suc)) if suc
                else float("nan"),
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
                "wall_clock": time.perf_counter() - t0,
            })
            f.flush()
            if (u + 1) % config.checkpoint_every == 0 or u + 1 == config.updates:
                checkpoints.append(save_checkpoint(u + 1))
    if not checkpoints:  # updates == 0: evaluate the untouched random policy
        checkpoints.append(save_checkpoint(start_update))

    evaluations = []
    for path in checkpoints:
        loaded, _, _ = NavPolicy.load(path)
        eval_envs = [NavEnv([w], **env_kwargs) for w in heldout_worlds]
        metrics = evaluate(loaded, eval_envs, episodes=eval_episodes,
                           seed=seed)
        evaluations.append(dict(metrics, checkpoint=path.name))
    best = max(evaluations, key=lambda m: m["reward_mean"])

    with open(out_dir / "checkpoint_eval.csv", "w", newline="") as f:
        fields = ["checkpoint"] + [k for k in evaluations[0] if k != "checkpoint"]
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in evaluations:
            writer.writerow(row)

    return {"metrics_csv": csv_path,
            "checkpoints": checkpoints,
            "evaluations": evaluations,
            "best_checkpoint": out_dir / best["checkpoint"],
            "best": {k: v for k, v in best.items() if k != "checkpoint"}}


def _config_as_meta(config: PolicyConfig) -> dict:
    """The round-trip form a checkpoint stores (tuples become lists)."""
    import json

    from .nn.policy import _config_dict

    return json.loads(json.dumps(_config_dict(config)))
