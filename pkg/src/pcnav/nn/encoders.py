"""Observation encoders: shared-FC point encoder, multi-scale point encoder,
and a strided-convolution depth-image baseline.

The multi-scale encoder follows a nested pyramid: level 1 picks N1
representatives from the input cloud by farthest-point sampling, level 2
picks N2 from those, level 3 picks N3 from level 2.  Each level groups the k
nearest neighbors of every representative (within the set it was sampled
from), encodes the neighborhood with a shared per-neighbor map + max-pool,
re-attaches the representative's own coordinates, maps again, and pools to a
fixed per-level vector; the final feature concatenates the three levels.
Farthest-point sampling is seeded at the lexicographically smallest point so
the whole encoder is a deterministic function of the point *set*.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import ContractViolationError
from .autodiff import Tensor, concat, gather_rows, stack
from .layers import conv2d, init_conv2d, init_linear, linear
from .params import ParamStore

POINTNET = "pointnet"
MULTISCALE = "multiscale"
DEPTH_BASELINE = "depth_baseline"
VARIANTS = (POINTNET, MULTISCALE, DEPTH_BASELINE)


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = POINTNET
    # shared-FC point encoder
    point_widths: tuple = (64, 128, 256)
    # multi-scale encoder
    level_points: tuple = (64, 16, 4)
    neighbors: int = 8
    local_widths: tuple = (32, 64, 128)   # per-neighbor map width, level i
    level_widths: tuple = (64, 64, 128)   # per-level output vector width
    # depth-image baseline
    resolution: tuple = (64, 64)
    conv_channels: tuple = (32, 64, 64)
    fc_width: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolationError(f"unknown encoder {self.variant!r}")
        if self.neighbors < 1:
            raise ContractViolationError("neighbors must be >= 1")
        n = self.level_points
        if not all(a > b for a, b in zip(n, n[1:])):
            raise ContractViolationError(
                "level point counts must strictly decrease")
        for ws in (self.point_widths, self.local_widths, self.level_widths):
            if any(w < 1 for w in ws):
                raise ContractViolationError("layer widths must be >= 1")

    @property
    def feature_width(self) -> int:
        if self.variant == POINTNET:
            return self.point_widths[-1]
        if self.variant == MULTISCALE:
            return sum(self.level_widths)
        return self.fc_width


# -- shared-FC point encoder --------------------------------------------------

def init_pointnet(store: ParamStore, cfg: EncoderConfig,
                  rng: np.random.Generator) -> None:
    n_in = 3
    for i, width in enumerate(cfg.point_widths):
        init_linear(store, f"enc.fc{i}", n_in, width, rng,
                    init="scaled_uniform")
        n_in = width


def encode_pointnet(store: ParamStore, cfg: EncoderConfig,
                    points: Tensor) -> Tensor:
    """(B, P, 3) -> (B, width): shared per-point map, max over points."""
    h = points
    for i in range(len(cfg.point_widths)):
        h = linear(store, f"enc.fc{i}", h).relu()
    return h.max(axis=-2)


# -- multi-scale encoder -------------------------------------------------------

def farthest_point_indices(pts: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest-point sample; seed = lexicographically smallest point,
    distance ties broken toward the lowest index."""
    if len(pts) < n:
        raise ContractViolationError(
            f"cannot sample {n} points from {len(pts)}")
    seed = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed
    d2 = ((pts - pts[seed]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn_indices(queries: np.ndarray, pts: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per query; ties toward lower index."""
    d2 = ((queries[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def init_multiscale(store: ParamStore, cfg: EncoderConfig,
                    rng: np.random.Generator) -> None:
    for i, (f_loc, f_out) in enumerate(zip(cfg.local_widths,
                                           cfg.level_widths)):
        init_linear(store, f"enc.l{i}.nbr", 3, f_loc, rng,
                    init="scaled_uniform")
        init_linear(store, f"enc.l{i}.pt", 3 + f_loc, f_out, rng,
                    init="scaled_uniform")


def encode_multiscale(store: ParamStore, cfg: EncoderConfig,
                      points: Tensor) -> Tensor:
    """(P, 3) -> (sum of level widths,), one cloud at a time."""
    if points.data.ndim != 2 or points.data.shape[1] != 3:
        raise ContractViolationError("expected a (P, 3) cloud")
    if points.data.shape[0] < cfg.level_points[0]:
        raise ContractViolationError(
            f"cloud has {points.data.shape[0]} points, "
            f"level 1 needs {cfg.level_points[0]}")
    level_vectors = []
    current = points  # point set the next level samples from
    for i, n_i in enumerate(cfg.level_points):
        rep_idx = farthest_point_indices(current.data, n_i)
        nbr_idx = knn_indices(current.data[rep_idx], current.data,
                              cfg.neighbors)
        reps = gather_rows(current, rep_idx)              # (N_i, 3)
        nbrs = gather_rows(current, nbr_idx.reshape(-1))  # (N_i*k, 3)
        centered = nbrs.reshape(n_i, cfg.neighbors, 3) - reps.reshape(n_i, 1, 3)
        loc = linear(store, f"enc.l{i}.nbr", centered).relu()
        loc = loc.max(axis=1)                             # (N_i, f_loc)
        per_point = concat([reps, loc], axis=-1)
        mapped = linear(store, f"enc.l{i}.pt", per_point).relu()
        level_vectors.append(mapped.max(axis=0))
        current = reps
    return concat(level_vectors, axis=-1)


def encode_multiscale_batch(store: ParamStore, cfg: EncoderConfig,
                            points: Tensor) -> Tensor:
    """(B, P, 3) -> (B, width); sampling structure is per-sample."""
    feats = [encode_multiscale(store, cfg, points[b])
             for b in range(points.data.shape[0])]
    return stack(feats, axis=0)


# -- depth-image baseline -------------------------------------------------------

_CONV_SPECS = ((8, 4), (4, 2), (3, 1))  # (kernel, stride) per layer


def _conv_out_size(size: int) -> int:
    for kernel, stride in _CONV_SPECS:
        size = (size - kernel) // stride + 1
    return size


def init_depth_baseline(store: ParamStore, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    c_in = 1
    for i, (c_out, (kernel, _)) in enumerate(zip(cfg.conv_channels,
                                                 _CONV_SPECS)):
        init_conv2d(store, f"enc.conv{i}", c_in, c_out, kernel, rng)
        c_in = c_out
    h = _conv_out_size(cfg.resolution[0])
    w = _conv_out_size(cfg.resolution[1])
    init_linear(store, "enc.fc", h * w * cfg.conv_channels[-1],
                cfg.fc_width, rng, gain=np.sqrt(2.0))


def encode_depth_baseline(store: ParamStore, cfg: EncoderConfig,
                          depth: Tensor) -> Tensor:
    """(B, H, W) normalized depth -> (B, fc_width)."""
    b, h, w = depth.data.shape
    if (h, w) != tuple(cfg.resolution):
        raise ContractViolationError(
            f"depth resolution {(h, w)} != configured {cfg.resolution}")
    x = depth.reshape(b, h, w, 1)
    for i, (kernel, stride) in enumerate(_CONV_SPECS):
        x = conv2d(store, f"enc.conv{i}", x, kernel, stride).relu()
    x = x.reshape(b, -1)
    return linear(store, "enc.fc", x).relu()


# -- dispatch -------------------------------------------------------------------

def init_encoder(store: ParamStore, cfg: EncoderConfig,
                 rng: np.random.Generator) -> None:
    {POINTNET: init_pointnet, MULTISCALE: init_multiscale,
     DEPTH_BASELINE: init_depth_baseline}[cfg.variant](store, cfg, rng)


def encode(store: ParamStore, cfg: EncoderConfig, obs: Tensor) -> Tensor:
    """Batched dispatch: points (B,P,3) or depth (B,H,W) -> (B, width)."""
    if cfg.variant == POINTNET:
        return encode_pointnet(store, cfg, obs)
    if cfg.variant == MULTISCALE:
        return encode_multiscale_batch(store, cfg, obs)
    return encode_depth_baseline(store, cfg, obs)
