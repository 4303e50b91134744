"""Recurrent actor-critic over an observation encoder.

Input per step: encoder feature, the goal as (rho, cos phi, sin phi), and a
one-hot of the previous action.  A single GRU layer carries state across
steps; linear heads emit 4 action logits and a scalar value.  Point
coordinates and rho are divided by the crop half-extent and depth images by
max_depth, so every network input lives in roughly [-1, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, concat, log_softmax, no_grad, stack, take_along
from .encoders import DEPTH_BASELINE, EncoderConfig, encode, init_encoder
from .layers import gru_step, init_gru, init_linear, linear
from .params import ParamStore, read_checkpoint, write_checkpoint

NUM_ACTIONS = 4


@dataclass(frozen=True)
class PolicyConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    recurrent_width: int = 128
    input_scale: float = 5.0   # crop half-extent, meters
    max_depth: float = 10.0    # depth normalizer, meters


class ActOutput(NamedTuple):
    actions: np.ndarray    # (B,) int
    log_probs: np.ndarray  # (B,)
    values: np.ndarray     # (B,)
    state: np.ndarray      # (B, recurrent_width)


class SequenceOutput(NamedTuple):
    log_probs: Tensor  # (T, B)
    entropy: Tensor    # scalar, mean over T*B
    values: Tensor     # (T, B)


class NavPolicy:
    def __init__(self, config: PolicyConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.store = ParamStore(dtype)
        init_encoder(self.store, config.encoder, rng)
        n_in = config.encoder.feature_width + 3 + NUM_ACTIONS
        init_gru(self.store, "gru", n_in, config.recurrent_width, rng)
        init_linear(self.store, "actor", config.recurrent_width,
                    NUM_ACTIONS, rng, gain=0.01)
        init_linear(self.store, "critic", config.recurrent_width, 1, rng)

    # -- input packing -----------------------------------------------------

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.config.recurrent_width),
                        dtype=self.store.dtype)

    def _obs_tensor(self, obs: np.ndarray) -> Tensor:
        obs = np.asarray(obs, dtype=self.store.dtype)
        if self.config.encoder.variant == DEPTH_BASELINE:
            return Tensor(obs / self.store.dtype.type(self.config.max_depth))
        return Tensor(obs / self.store.dtype.type(self.config.input_scale))

    def _goal_tensor(self, goal: np.ndarray) -> Tensor:
        goal = np.asarray(goal, dtype=self.store.dtype)
        rho, phi = goal[..., 0], goal[..., 1]
        vec = np.stack([rho / self.config.input_scale,
                        np.cos(phi), np.sin(phi)], axis=-1)
        return Tensor(vec.astype(self.store.dtype))

    def _prev_tensor(self, prev_action: np.ndarray) -> Tensor:
        prev = np.asarray(prev_action, dtype=np.int64)
        onehot = np.zeros(prev.shape + (NUM_ACTIONS,), dtype=self.store.dtype)
        valid = prev >= 0  # -1 = episode start, no previous action
        onehot[valid] = np.eye(NUM_ACTIONS, dtype=self.store.dtype)[prev[valid]]
        return Tensor(onehot)

    # -- forward -------------------------------------------------------------

    def step(self, obs, goal, prev_action, state) -> tuple:
        """One recurrent step; returns (logits, value, next_state) tensors."""
        feature = encode(self.store, self.config.encoder,
                         self._obs_tensor(obs))
        x = concat([feature, self._goal_tensor(goal),
                    self._prev_tensor(prev_action)], axis=-1)
        h = state if isinstance(state, Tensor) else Tensor(
            np.asarray(state, dtype=self.store.dtype))
        h_next = gru_step(self.store, "gru", x, h)
        logits = linear(self.store, "actor", h_next)
        value = linear(self.store, "critic", h_next).reshape(-1)
        return logits, value, h_next

    def act(self, obs, goal, prev_action, state,
            rng: np.random.Generator) -> ActOutput:
        """Sample actions (inverse-CDF per row) without touching the tape."""
        with no_grad():
            logits, value, h_next = self.step(obs, goal, prev_action, state)
            logp = log_softmax(logits, axis=-1).data
        probs = np.exp(logp)
        u = rng.random((probs.shape[0], 1))
        actions = np.minimum((np.cumsum(probs, axis=-1) < u).sum(axis=-1),
                             NUM_ACTIONS - 1).astype(np.int64)
        chosen = np.take_along_axis(logp, actions[:, None], axis=-1)[:, 0]
        return ActOutput(actions, chosen, value.data.copy(), h_next.data)

    def evaluate(self, obs_seq, goal_seq, prev_seq, mask_seq, state,
                 actions) -> SequenceOutput:
        """Recompute a rollout segment with gradients.

        Sequences are (T, B, ...); ``mask_seq[t]`` is 0 where step t begins a
        new episode (the recurrent state is zeroed there before use).
        """
        h = Tensor(np.asarray(state, dtype=self.store.dtype))
        log_prob_rows = []
        entropy_terms = []
        value_rows = []
        t_steps = len(actions)
        for t in range(t_steps):
            mask = Tensor(np.asarray(mask_seq[t], dtype=self.store.dtype)
                          .reshape(-1, 1))
            logits, value, h = self.step(obs_seq[t], goal_seq[t],
                                         prev_seq[t], h * mask)
            logp = log_softmax(logits, axis=-1)
            log_prob_rows.append(take_along(logp, actions[t], axis=-1))
            entropy_terms.append(-(logp.exp() * logp).sum(axis=-1))
            value_rows.append(value)
        return SequenceOutput(
            log_probs=stack(log_prob_rows, axis=0),
            entropy=stack(entropy_terms, axis=0).mean(),
            values=stack(value_rows, axis=0))

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra_arrays: dict | None = None,
             meta: dict | None = None) -> None:
        arrays = dict(self.store.state_arrays())
        if extra_arrays:
            arrays.update({f"extra.{k}": v for k, v in extra_arrays.items()})
        info = {"policy": _config_dict(self.config)}
        info.update(meta or {})
        write_checkpoint(path, arrays, info)

    @classmethod
    def load(cls, path, dtype=np.float32):
        """Returns (policy, extra_arrays, meta)."""
        arrays, meta = read_checkpoint(path)
        config = config_from_dict(meta["policy"])
        policy = cls(config, np.random.default_rng(0), dtype=dtype)
        params = {k: v for k, v in arrays.items()
                  if not k.startswith("extra.")}
        extra = {k[len("extra."):]: v for k, v in arrays.items()
                 if k.startswith("extra.")}
        policy.store.load_arrays(params)
        return policy, extra, meta


def _config_dict(config: PolicyConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> PolicyConfig:
    enc = d["encoder"]
    enc = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in enc.items()})
    rest = {k: v for k, v in d.items() if k != "encoder"}
    return PolicyConfig(encoder=enc, **rest)
