"""Layers built on the autodiff tape: linear, strided conv2d, GRU step."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .params import ParamStore, orthogonal, scaled_uniform


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int,
                rng: np.random.Generator, gain: float = 1.0,
                init: str = "orthogonal") -> None:
    if init == "orthogonal":
        w = orthogonal((n_in, n_out), rng, gain=gain)
    elif init == "scaled_uniform":
        w = scaled_uniform((n_in, n_out), rng)
    else:
        raise ValueError(f"unknown init {init!r}")
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(n_out))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


# -- conv2d -------------------------------------------------------------------

def _im2col_index(h, w, c, kh, kw, stride):
    """Flat input indices for each (out_y, out_x, ky, kx, c) column entry."""
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    y0 = stride * np.arange(oh)
    x0 = stride * np.arange(ow)
    ys = y0[:, None, None, None] + np.arange(kh)[None, None, :, None]
    xs = x0[None, :, None, None] + np.arange(kw)[None, None, None, :]
    flat = (ys * w + xs)[..., None] * c + np.arange(c)
    return flat.reshape(oh * ow, kh * kw * c), oh, ow


_COL_CACHE: dict = {}


def _im2col(x: Tensor, kh: int, kw: int, stride: int):
    """(B, H, W, C) -> (B, OH*OW, KH*KW*C) patch matrix, differentiable."""
    b, h, w, c = x.data.shape
    key = (h, w, c, kh, kw, stride)
    if key not in _COL_CACHE:
        _COL_CACHE[key] = _im2col_index(h, w, c, kh, kw, stride)
    idx, oh, ow = _COL_CACHE[key]
    flat = x.data.reshape(b, h * w * c)
    cols = flat[:, idx]

    def bwd(g):
        gx = np.zeros((b, h * w * c), dtype=x.data.dtype)
        np.add.at(gx, (slice(None), idx), g)
        x._accum(gx.reshape(x.data.shape))

    return Tensor(cols, (x,), bwd), oh, ow


def init_conv2d(store: ParamStore, name: str, c_in: int, c_out: int,
                kernel: int, rng: np.random.Generator,
                gain: float = np.sqrt(2.0)) -> None:
    k = kernel * kernel * c_in
    store.add(f"{name}.w", orthogonal((k, c_out), rng, gain=gain))
    store.add(f"{name}.b", np.zeros(c_out))


def conv2d(store: ParamStore, name: str, x: Tensor, kernel: int,
           stride: int) -> Tensor:
    """Valid-padding strided convolution on channels-last (B, H, W, C)."""
    b = x.data.shape[0]
    cols, oh, ow = _im2col(x, kernel, kernel, stride)
    out = cols @ store[f"{name}.w"] + store[f"{name}.b"]
    return out.reshape(b, oh, ow, out.data.shape[-1])


# -- gated recurrent unit ------------------------------------------------------

def init_gru(store: ParamStore, name: str, n_in: int, n_hidden: int,
             rng: np.random.Generator) -> None:
    for gate in ("r", "z", "n"):
        store.add(f"{name}.w_{gate}", orthogonal((n_in, n_hidden), rng))
        store.add(f"{name}.u_{gate}", orthogonal((n_hidden, n_hidden), rng))
        store.add(f"{name}.b_{gate}", np.zeros(n_hidden))


def gru_step(store: ParamStore, name: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update: reset/update gates, candidate, convex blend.

        r = sigmoid(x W_r + h U_r + b_r)
        z = sigmoid(x W_z + h U_z + b_z)
        n = tanh(x W_n + r * (h U_n) + b_n)
        h' = (1 - z) * n + z * h
    """
    p = lambda k: store[f"{name}.{k}"]
    r = (x @ p("w_r") + h @ p("u_r") + p("b_r")).sigmoid()
    z = (x @ p("w_z") + h @ p("u_z") + p("b_z")).sigmoid()
    n = (x @ p("w_n") + r * (h @ p("u_n")) + p("b_n")).tanh()
    return (1.0 - z) * n + z * h
