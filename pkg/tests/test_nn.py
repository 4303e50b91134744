"""Autodiff tape, layers, point/depth encoders, and the recurrent policy.

All gradient checks run in 64-bit with central differences and are made at
differentiable points.  relu has a kink at zero: when a perturbed parameter
flips a pre-activation across it, the two-sided difference quotient stops
approximating anything (the analytic convention relu'(0) = 0 is fine; the
quotient is not).  Zero-initialized biases are therefore nudged off the kink
before the composite checks, and the data seeds are ones verified to keep
every pre-activation farther than the step size from zero.
"""

import math

import numpy as np
import pytest

from pcnav.geom import ContractViolationError
from pcnav.nn import (Adam, CheckpointFormatError, EncoderConfig, NavPolicy,
                      ParamStore, PolicyConfig, Tensor, concat, conv2d,
                      encode_depth_baseline, encode_multiscale,
                      encode_multiscale_batch, encode_pointnet,
                      farthest_point_indices, gather_rows, grad_enabled,
                      gru_step, init_conv2d, init_gru, init_linear,
                      knn_indices, linear, log_softmax, minimum, no_grad,
                      orthogonal, read_checkpoint, scaled_uniform, stack,
                      take_along, write_checkpoint)
from pcnav.nn.encoders import (DEPTH_BASELINE, MULTISCALE, POINTNET,
                               _conv_out_size, init_depth_baseline,
                               init_multiscale, init_pointnet)

# ---------------------------------------------------------------------------
# finite-difference helpers


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar f() wrt every entry of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build, leaves, h: float = 1e-6, tol: float = 1e-7) -> None:
    """Gradcheck: build() -> scalar Tensor, leaves -> list of input Tensors."""
    for leaf in leaves:
        leaf.grad = None
    build().backward()
    for leaf in leaves:
        analytic = (leaf.grad if leaf.grad is not None
                    else np.zeros_like(leaf.data))
        numeric = numeric_grad(lambda: build().item(), leaf.data, h=h)
        err = rel_err(analytic, numeric)
        assert err < tol, f"gradient mismatch {err:.3e} on shape {leaf.shape}"


def leaf(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# elementary tape operations

# A fixed projection reused where a plain .sum() would hide sign errors.
leaf_proj = Tensor(np.linspace(-1.0, 1.0, 12).reshape(3, 4))


class TestTensorOps:
    def test_add_broadcast(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        check_grads(lambda: ((a + b) * leaf_proj).sum(), [a, b])

    def test_scalar_arithmetic(self, rng):
        a = leaf(rng, 5)
        check_grads(lambda: (2.0 + a).sum(), [a])
        check_grads(lambda: (3.0 - a).sum(), [a])
        check_grads(lambda: (a * 0.7).sum(), [a])
        check_grads(lambda: (-a).sum(), [a])

    def test_mul_div_pow(self, rng):
        a, b = leaf(rng, 4, 3), leaf(rng, 3)
        b.data = np.abs(b.data) + 0.5  # keep the divisor away from zero
        check_grads(lambda: (a * b).sum(), [a, b])
        check_grads(lambda: (a / b).sum(), [a, b])
        check_grads(lambda: (a ** 3).sum(), [a])

    def test_matmul_2d(self, rng):
        a, b = leaf(rng, 3, 5), leaf(rng, 5, 2)
        check_grads(lambda: (a @ b).sum(), [a, b])

    def test_matmul_batched_times_2d(self, rng):
        # The per-point encoder pattern: (B, P, C) @ (C, F) with broadcast.
        a, b = leaf(rng, 2, 4, 3), leaf(rng, 3, 5)
        check_grads(lambda: ((a @ b) ** 2).sum(), [a, b])

    def test_getitem_and_reshape(self, rng):
        a = leaf(rng, 4, 6)
        check_grads(lambda: (a[1:3] * 2.0).sum(), [a])
        check_grads(lambda: a[2].sum(), [a])
        check_grads(lambda: a.reshape(3, 8).max(axis=0).sum(), [a])
        check_grads(lambda: a.reshape(-1)[::2].sum(), [a])

    def test_unary_nonlinearities(self, rng):
        a = leaf(rng, 6)
        a.data = a.data + np.where(a.data >= 0, 0.2, -0.2)  # off relu's kink
        check_grads(lambda: a.relu().sum(), [a])
        check_grads(lambda: a.exp().sum(), [a])
        check_grads(lambda: a.tanh().sum(), [a])
        check_grads(lambda: a.sigmoid().sum(), [a])
        pos = Tensor(np.abs(a.data) + 0.5, requires_grad=True)
        check_grads(lambda: pos.log().sum(), [pos])

    def test_relu_subgradient_at_zero_is_zero(self):
        a = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
        a.relu().sum().backward()
        np.testing.assert_array_equal(a.grad, [0.0, 0.0, 1.0])

    def test_clip_gradient_mask(self):
        # Gradient passes inside and exactly at the bounds, zero outside.
        a = Tensor(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), requires_grad=True)
        a.clip(-1.0, 1.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0, 1.0, 0.0])

    def test_clip_gradcheck_interior(self, rng):
        a = leaf(rng, 8)
        a.data = np.clip(a.data, -0.8, 0.8)  # keep away from the bounds
        check_grads(lambda: (a.clip(-1.0, 1.0) ** 2).sum(), [a])

    def test_reductions(self, rng):
        a = leaf(rng, 3, 4)
        check_grads(lambda: a.sum(), [a])
        check_grads(lambda: a.sum(axis=0).max(axis=0), [a])
        check_grads(lambda: a.sum(axis=1, keepdims=True).sum(), [a])
        check_grads(lambda: a.mean(), [a])
        check_grads(lambda: a.mean(axis=1).sum(), [a])
        check_grads(lambda: a.max(axis=-2).sum(), [a])
        check_grads(lambda: a.max(axis=1, keepdims=True).sum(), [a])

    def test_max_tie_goes_to_lowest_index(self):
        a = Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]), requires_grad=True)
        a.max(axis=1).sum().backward()
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_minimum(self, rng):
        a, b = leaf(rng, 5), leaf(rng, 5)
        check_grads(lambda: (minimum(a, b) * 2.0).sum(), [a, b])

    def test_minimum_tie_goes_to_first_argument(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 5.0]), requires_grad=True)
        minimum(a, b).sum().backward()
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])

    def test_concat_and_stack(self, rng):
        a, b, c = leaf(rng, 2, 3), leaf(rng, 2, 2), leaf(rng, 2, 3)
        check_grads(lambda: (concat([a, b], axis=-1) ** 2).sum(), [a, b])
        check_grads(lambda: (stack([a, c], axis=0) * 3.0).sum(), [a, c])
        check_grads(lambda: stack([a, c], axis=1).max(axis=1).sum(), [a, c])

    def test_gather_rows_accumulates_repeats(self, rng):
        a = leaf(rng, 4, 3)
        idx = np.array([0, 2, 0, 0])
        gather_rows(a, idx).sum().backward()
        np.testing.assert_array_equal(a.grad[0], [3.0, 3.0, 3.0])
        np.testing.assert_array_equal(a.grad[1], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(a.grad[2], [1.0, 1.0, 1.0])
        check_grads(lambda: (gather_rows(a, idx) ** 2).sum(), [a])

    def test_take_along(self, rng):
        a = leaf(rng, 4, 3)
        idx = np.array([2, 0, 1, 1])
        out = take_along(a, idx, axis=-1)
        assert out.shape == (4,)
        np.testing.assert_array_equal(out.data, a.data[np.arange(4), idx])
        check_grads(lambda: (take_along(a, idx, axis=-1) ** 2).sum(), [a])

    def test_log_softmax(self, rng):
        a = leaf(rng, 3, 4)
        out = log_softmax(a, axis=-1)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0,
                                   atol=1e-12)
        # Stable under a large common offset.
        shifted = log_softmax(Tensor(a.data + 1000.0), axis=-1)
        np.testing.assert_allclose(shifted.data, out.data, atol=1e-9)
        check_grads(lambda: (log_softmax(a, axis=-1) * leaf_proj).sum(), [a])

    def test_gradient_accumulates_over_reuse(self, rng):
        a = leaf(rng, 3)
        (a * 2.0 + a * 3.0).sum().backward()
        np.testing.assert_allclose(a.grad, 5.0 * np.ones(3), atol=1e-12)

    def test_diamond_graph(self, rng):
        a = leaf(rng, 3)
        b = a * 2.0
        ((b + a) * b).sum().backward()  # d/da of (2a + a) * 2a = 12a
        np.testing.assert_allclose(a.grad, 12.0 * a.data, atol=1e-12)

    def test_no_grad_suppresses_the_tape(self, rng):
        a = leaf(rng, 3)
        assert grad_enabled()
        with no_grad():
            assert not grad_enabled()
            out = (a * 2.0).sum()
        assert grad_enabled()
        assert not out.requires_grad
        assert a.grad is None

    def test_no_grad_restores_on_exception(self):
        with pytest.raises(RuntimeError):
            with no_grad():
                raise RuntimeError("boom")
        assert grad_enabled()

    def test_detach_cuts_the_graph(self, rng):
        a = leaf(rng, 3)
        (a.detach() * 2.0).sum().backward()
        assert a.grad is None

    def test_backward_requires_scalar(self, rng):
        a = leaf(rng, 3)
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_requires_grad_propagates(self, rng):
        a = leaf(rng, 3)
        frozen = Tensor(rng.normal(size=3))
        assert (a + frozen).requires_grad
        assert not (frozen * 2.0).requires_grad


# ---------------------------------------------------------------------------
# layers


def float64_store() -> ParamStore:
    return ParamStore(dtype=np.float64)


class TestLinearLayer:
    def test_gradcheck(self, rng):
        store = float64_store()
        init_linear(store, "fc", 4, 3, rng)
        x = leaf(rng, 5, 4)
        params = [store["fc.w"], store["fc.b"], x]
        check_grads(lambda: (linear(store, "fc", x) ** 2).sum(), params)

    def test_matches_plain_numpy(self, rng):
        store = float64_store()
        init_linear(store, "fc", 6, 2, rng)
        x = rng.normal(size=(3, 6))
        out = linear(store, "fc", Tensor(x))
        expect = x @ store["fc.w"].data + store["fc.b"].data
        np.testing.assert_array_equal(out.data, expect)


def conv_oracle(x, w, b, kernel, stride):
    """Direct-loop valid convolution on (B, H, W, C) with (k*k*C, F) weights."""
    bsz, h, width, c = x.shape
    oh = (h - kernel) // stride + 1
    ow = (width - kernel) // stride + 1
    out = np.zeros((bsz, oh, ow, w.shape[1]))
    for n in range(bsz):
        for i in range(oh):
            for j in range(ow):
                patch = x[n, i * stride:i * stride + kernel,
                          j * stride:j * stride + kernel, :]
                out[n, i, j] = patch.reshape(-1) @ w + b
    return out


class TestConv2d:
    def test_forward_matches_loop_oracle(self, rng):
        store = float64_store()
        init_conv2d(store, "conv", 2, 3, 4, rng)
        x = rng.normal(size=(2, 11, 9, 2))
        out = conv2d(store, "conv", Tensor(x), kernel=4, stride=2)
        expect = conv_oracle(x, store["conv.w"].data, store["conv.b"].data,
                             kernel=4, stride=2)
        assert out.shape == (2, 4, 3, 3)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_gradcheck(self, rng):
        store = float64_store()
        init_conv2d(store, "conv", 2, 2, 3, rng)
        x = leaf(rng, 1, 8, 8, 2)
        proj = Tensor(rng.normal(size=(1, 3, 3, 2)))
        params = [store["conv.w"], store["conv.b"], x]
        check_grads(lambda: (conv2d(store, "conv", x, 3, 2) * proj).sum(),
                    params)

    def test_output_ladder_for_square_input(self):
        # 64 -> 15 -> 6 -> 4 through the (8,4), (4,2), (3,1) stack.
        assert (64 - 8) // 4 + 1 == 15
        assert (15 - 4) // 2 + 1 == 6
        assert (6 - 3) // 1 + 1 == 4
        assert _conv_out_size(64) == 4


def gru_oracle(store, name, x, h):
    """The documented update equations, computed with plain numpy."""
    p = lambda k: store[f"{name}.{k}"].data
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    r = sig(x @ p("w_r") + h @ p("u_r") + p("b_r"))
    z = sig(x @ p("w_z") + h @ p("u_z") + p("b_z"))
    n = np.tanh(x @ p("w_n") + r * (h @ p("u_n")) + p("b_n"))
    return (1.0 - z) * n + z * h


class TestGruStep:
    def test_matches_equation_oracle(self, rng):
        store = float64_store()
        init_gru(store, "gru", 5, 4, rng)
        x, h = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
        out = gru_step(store, "gru", Tensor(x), Tensor(h))
        np.testing.assert_allclose(out.data, gru_oracle(store, "gru", x, h),
                                   atol=1e-12)

    def test_gradcheck_all_parameters(self, rng):
        store = float64_store()
        init_gru(store, "gru", 3, 4, rng)
        x, h = leaf(rng, 2, 3), leaf(rng, 2, 4)
        proj = Tensor(rng.normal(size=(2, 4)))
        params = [t for _, t in store.items()] + [x, h]
        check_grads(lambda: (gru_step(store, "gru", x, h) * proj).sum(),
                    params)

    def test_zero_update_gate_keeps_candidate(self, rng):
        # Force z ~ 0 via a large negative gate bias: h' -> tanh candidate.
        store = float64_store()
        init_gru(store, "gru", 3, 4, rng)
        store["gru.b_z"].data -= 50.0
        x, h = rng.normal(size=(1, 3)), rng.normal(size=(1, 4))
        out = gru_step(store, "gru", Tensor(x), Tensor(h))
        assert np.all(np.abs(out.data) <= 1.0)  # tanh range
        store["gru.b_z"].data += 100.0  # z ~ 1: h' -> h
        out = gru_step(store, "gru", Tensor(x), Tensor(h))
        np.testing.assert_allclose(out.data, h, atol=1e-9)


class TestInitializers:
    def test_orthogonal_columns(self, rng):
        w = orthogonal((8, 4), rng)
        np.testing.assert_allclose(w.T @ w, np.eye(4), atol=1e-12)

    def test_orthogonal_rows_when_wide(self, rng):
        w = orthogonal((4, 8), rng)
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-12)

    def test_orthogonal_gain(self, rng):
        w = orthogonal((6, 3), rng, gain=np.sqrt(2.0))
        np.testing.assert_allclose(w.T @ w, 2.0 * np.eye(3), atol=1e-12)

    def test_orthogonal_deterministic(self):
        a = orthogonal((5, 5), np.random.default_rng(7))
        b = orthogonal((5, 5), np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_scaled_uniform_bounds(self, rng):
        w = scaled_uniform((30, 50), rng)
        limit = math.sqrt(6.0 / 80.0)
        assert np.all(np.abs(w) <= limit)
        assert np.abs(w).max() > 0.8 * limit  # actually fills the range

    def test_linear_bias_starts_at_zero(self, rng):
        store = float64_store()
        init_linear(store, "fc", 4, 3, rng)
        np.testing.assert_array_equal(store["fc.b"].data, np.zeros(3))


# ---------------------------------------------------------------------------
# parameter store and optimizer


class TestParamStore:
    def test_add_and_lookup(self, rng):
        store = ParamStore()
        t = store.add("w", rng.normal(size=(3, 2)))
        assert t.data.dtype == np.float32
        assert "w" in store and "b" not in store
        assert store.names() == ["w"]
        assert store.num_values() == 6

    def test_duplicate_name_rejected(self, rng):
        store = ParamStore()
        store.add("w", rng.normal(size=2))
        with pytest.raises(ValueError, match="duplicate"):
            store.add("w", rng.normal(size=2))

    def test_grad_norm_and_zero(self, rng):
        store = float64_store()
        a = store.add("a", rng.normal(size=4))
        b = store.add("b", rng.normal(size=(2, 3)))
        a.grad = np.full(4, 2.0)
        b.grad = np.ones((2, 3))
        expect = math.sqrt(4 * 4.0 + 6 * 1.0)
        assert abs(store.grad_norm() - expect) < 1e-12
        store.zero_grad()
        assert store.grad_norm() == 0.0

    def test_clip_grad_norm(self, rng):
        store = float64_store()
        a = store.add("a", rng.normal(size=3))
        a.grad = np.array([3.0, 4.0, 0.0])  # norm 5
        returned = store.clip_grad_norm(0.5)
        assert abs(returned - 5.0) < 1e-12
        assert abs(store.grad_norm() - 0.5) < 1e-12
        # Under the limit: untouched.
        a.grad = np.array([0.1, 0.0, 0.0])
        assert abs(store.clip_grad_norm(0.5) - 0.1) < 1e-12
        np.testing.assert_array_equal(a.grad, [0.1, 0.0, 0.0])

    def test_state_round_trip(self, rng):
        store = float64_store()
        store.add("a", rng.normal(size=(2, 2)))
        store.add("b", rng.normal(size=3))
        state = {k: v.copy() for k, v in store.state_arrays().items()}
        store["a"].data += 1.0
        store.load_arrays(state)
        np.testing.assert_array_equal(store["a"].data, state["a"])

    def test_load_rejects_missing_and_misshapen(self, rng):
        store = float64_store()
        store.add("a", rng.normal(size=3))
        with pytest.raises(CheckpointFormatError, match="do not match"):
            store.load_arrays({})
        with pytest.raises(CheckpointFormatError, match="shape"):
            store.load_arrays({"a": np.zeros((2, 2))})


def adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-5):
    """Reference bias-corrected update sequence for one scalar parameter."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


class TestAdam:
    def test_matches_reference_sequence(self):
        store = float64_store()
        p = store.add("x", np.array([1.5]))
        opt = Adam(store, lr=0.1)
        grads = [0.4, -0.3, 1.2, 0.05, -2.0]
        seen = []
        for g in grads:
            p.grad = np.array([g])
            opt.step()
            seen.append(p.data[0])
        np.testing.assert_allclose(seen, adam_oracle(1.5, grads, 0.1),
                                   atol=1e-12)

    def test_first_step_is_about_lr(self):
        # After bias correction the first update is lr * g/|g| (mod eps).
        store = float64_store()
        p = store.add("x", np.array([0.0]))
        opt = Adam(store, lr=0.01)
        p.grad = np.array([7.0])
        opt.step()
        assert abs(p.data[0] + 0.01) < 1e-4

    def test_lr_override(self):
        store = float64_store()
        p = store.add("x", np.array([0.0]))
        opt = Adam(store, lr=0.5)
        p.grad = np.array([1.0])
        opt.step(lr=0.001)
        assert abs(p.data[0] + 0.001) < 1e-5

    def test_skips_parameters_without_gradients(self):
        store = float64_store()
        p = store.add("x", np.array([3.0]))
        opt = Adam(store)
        opt.step()
        assert p.data[0] == 3.0

    def test_state_round_trip_resumes_bitwise(self, rng):
        def fresh():
            store = float64_store()
            store.add("x", np.array([1.0, -2.0]))
            return store, Adam(store, lr=0.05)

        grads = [rng.normal(size=2) for _ in range(6)]
        store_a, opt_a = fresh()
        for g in grads:
            store_a["x"].grad = g
            opt_a.step()

        store_b, opt_b = fresh()
        for g in grads[:3]:
            store_b["x"].grad = g
            opt_b.step()
        params = {k: v.copy() for k, v in store_b.state_arrays().items()}
        state = {k: v.copy() for k, v in opt_b.state_arrays().items()}

        store_c, opt_c = fresh()
        store_c.load_arrays(params)
        opt_c.load_arrays(state)
        for g in grads[3:]:
            store_c["x"].grad = g
            opt_c.step()
        np.testing.assert_array_equal(store_c["x"].data, store_a["x"].data)


# ---------------------------------------------------------------------------
# checkpoint files


class TestCheckpointFile:
    def test_round_trip(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        arrays = {
            "w": rng.normal(size=(3, 4)).astype(np.float32),
            "steps": np.arange(5, dtype=np.int64),
            "scalar": np.array(2.5),
            "wide": rng.normal(size=(2, 2, 2)),
        }
        meta = {"note": "hello", "nested": {"k": [1, 2]}}
        write_checkpoint(path, arrays, meta)
        got, got_meta = read_checkpoint(path)
        assert got_meta == meta
        assert set(got) == set(arrays)
        for name in arrays:
            assert got[name].dtype == arrays[name].dtype
            np.testing.assert_array_equal(got[name], arrays[name])

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTME1" + b"\x00" * 32)
        with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
            read_checkpoint(path)

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        write_checkpoint(path, {"a": np.zeros(2)}, {})
        raw = bytearray(path.read_bytes())
        raw[6:10] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="version 9"):
            read_checkpoint(path)

    def test_rejects_truncated_data(self, tmp_path):
        path = tmp_path / "cut.ckpt"
        write_checkpoint(path, {"a": np.arange(10.0)}, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            read_checkpoint(path)

    def test_rejects_empty_file(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        path.write_bytes(b"")
        with pytest.raises(CheckpointFormatError):
            read_checkpoint(path)


# ---------------------------------------------------------------------------
# per-point encoder


class TestPointNetEncoder:
    def make(self, rng, dtype=np.float32):
        cfg = EncoderConfig(variant=POINTNET)
        store = ParamStore(dtype)
        init_pointnet(store, cfg, rng)
        return store, cfg

    def test_feature_shape(self, rng):
        store, cfg = self.make(rng)
        pts = rng.normal(size=(2, 40, 3)).astype(np.float32)
        out = encode_pointnet(store, cfg, Tensor(pts))
        assert out.shape == (2, 256)
        assert cfg.feature_width == 256

    def test_permutation_invariance_is_bitwise(self, rng):
        store, cfg = self.make(rng)
        pts = rng.normal(size=(3, 50, 3)).astype(np.float32)
        base = encode_pointnet(store, cfg, Tensor(pts)).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(50)
            out = encode_pointnet(store, cfg, Tensor(pts[:, perm])).data
            np.testing.assert_array_equal(out, base)

    def test_duplicated_points_do_not_change_the_feature(self, rng):
        store, cfg = self.make(rng)
        pts = rng.normal(size=(1, 30, 3)).astype(np.float32)
        doubled = np.concatenate([pts, pts[:, :7]], axis=1)
        np.testing.assert_array_equal(
            encode_pointnet(store, cfg, Tensor(pts)).data,
            encode_pointnet(store, cfg, Tensor(doubled)).data)

    def test_pool_tie_sends_gradient_to_first_copy(self, rng):
        store, cfg = self.make(rng, dtype=np.float64)
        pts = rng.normal(size=(1, 10, 3))
        pts[0, 3] = pts[0, 0]  # rows 0 and 3 are identical
        x = Tensor(pts, requires_grad=True)
        encode_pointnet(store, cfg, x).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 3], np.zeros(3))
        assert np.any(x.grad[0, 0] != 0.0)

    def test_gradcheck(self, rng):
        cfg = EncoderConfig(variant=POINTNET, point_widths=(8, 8, 16))
        store = float64_store()
        init_pointnet(store, cfg, rng)
        for _, p in store.items():
            p.data += rng.normal(0.0, 0.05, p.data.shape)
        x = leaf(rng, 1, 12, 3)
        proj = Tensor(rng.normal(size=(1, 16)))
        params = [t for _, t in store.items()] + [x]
        check_grads(lambda: (encode_pointnet(store, cfg, x) * proj).sum(),
                    params, h=1e-5, tol=1e-6)


# ---------------------------------------------------------------------------
# farthest point sampling and nearest neighbors


class TestFarthestPointSampling:
    def test_seed_is_lexicographically_smallest(self, rng):
        pts = rng.normal(size=(30, 3))
        idx = farthest_point_indices(pts, 5)
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
        assert idx[0] == order[0]

    def test_each_pick_maximizes_distance_to_chosen(self, rng):
        for trial in range(10):
            pts = np.random.default_rng(trial).normal(size=(25, 3))
            idx = farthest_point_indices(pts, 8)
            for i in range(1, 8):
                chosen = pts[idx[:i]]
                d = np.min(np.linalg.norm(pts[:, None] - chosen[None],
                                          axis=-1), axis=1)
                assert d[idx[i]] >= d.max() - 1e-12

    def test_indices_unique_and_deterministic(self, rng):
        pts = rng.normal(size=(40, 3))
        a = farthest_point_indices(pts, 12)
        b = farthest_point_indices(pts, 12)
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 12

    def test_too_few_points_rejected(self, rng):
        with pytest.raises(ContractViolationError, match="sample 8"):
            farthest_point_indices(rng.normal(size=(5, 3)), 8)


class TestNearestNeighbors:
    def test_matches_sorted_oracle(self, rng):
        pts = rng.normal(size=(20, 3))
        queries = rng.normal(size=(6, 3))
        got = knn_indices(queries, pts, 4)
        for qi, q in enumerate(queries):
            d = [float(np.sum((p - q) ** 2)) for p in pts]
            expect = sorted(range(20), key=lambda j: (d[j], j))[:4]
            np.testing.assert_array_equal(got[qi], expect)

    def test_ties_prefer_lower_index(self):
        pts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                        [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        got = knn_indices(np.zeros((1, 3)), pts, 3)
        np.testing.assert_array_equal(got[0], [0, 1, 2])

    def test_query_in_set_finds_itself_first(self, rng):
        pts = rng.normal(size=(15, 3))
        got = knn_indices(pts[4:5], pts, 2)
        assert got[0, 0] == 4


# ---------------------------------------------------------------------------
# multi-scale encoder


SMALL_MS = EncoderConfig(variant=MULTISCALE, level_points=(8, 4, 2),
                         neighbors=3, local_widths=(8, 8, 8),
                         level_widths=(8, 8, 16))


class TestMultiscaleEncoder:
    def make(self, rng, cfg=None, dtype=np.float64):
        cfg = cfg or EncoderConfig(variant=MULTISCALE)
        store = ParamStore(dtype)
        init_multiscale(store, cfg, rng)
        return store, cfg

    def test_feature_width(self, rng):
        store, cfg = self.make(rng)
        pts = rng.normal(size=(80, 3))
        out = encode_multiscale(store, cfg, Tensor(pts))
        assert out.shape == (sum(cfg.level_widths),)
        assert cfg.feature_width == 256

    def test_small_cloud_rejected(self, rng):
        store, cfg = self.make(rng)
        with pytest.raises(ContractViolationError, match="level 1 needs"):
            encode_multiscale(store, cfg, Tensor(rng.normal(size=(63, 3))))
        with pytest.raises(ContractViolationError, match=r"\(P, 3\)"):
            encode_multiscale(store, cfg, Tensor(rng.normal(size=(2, 64, 3))))

    def test_permutation_invariance(self, rng):
        store, cfg = self.make(rng, cfg=SMALL_MS)
        pts = rng.normal(size=(20, 3))
        base = encode_multiscale(store, cfg, Tensor(pts)).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(20)
            out = encode_multiscale(store, cfg, Tensor(pts[perm])).data
            np.testing.assert_array_equal(out, base)

    def test_batch_matches_per_cloud_loop(self, rng):
        store, cfg = self.make(rng, cfg=SMALL_MS)
        pts = rng.normal(size=(3, 16, 3))
        batched = encode_multiscale_batch(store, cfg, Tensor(pts)).data
        for b in range(3):
            single = encode_multiscale(store, cfg, Tensor(pts[b])).data
            np.testing.assert_array_equal(batched[b], single)

    def test_distinct_shapes_get_distinct_features(self, rng):
        store, cfg = self.make(rng, cfg=SMALL_MS)
        line = np.column_stack([np.linspace(0, 2, 16),
                                np.zeros(16), np.zeros(16)])
        ring = np.column_stack([np.cos(np.linspace(0, 2 * np.pi, 16)),
                                np.sin(np.linspace(0, 2 * np.pi, 16)),
                                np.zeros(16)])
        a = encode_multiscale(store, cfg, Tensor(line)).data
        b = encode_multiscale(store, cfg, Tensor(ring)).data
        assert np.max(np.abs(a - b)) > 1e-3

    def test_translation_changes_the_feature(self, rng):
        # Representative coordinates enter the per-point map, so the encoding
        # is deliberately not translation invariant (poses matter).
        store, cfg = self.make(rng, cfg=SMALL_MS)
        pts = rng.normal(size=(16, 3))
        a = encode_multiscale(store, cfg, Tensor(pts)).data
        b = encode_multiscale(store, cfg, Tensor(pts + 2.0)).data
        assert np.max(np.abs(a - b)) > 1e-3


# ---------------------------------------------------------------------------
# depth-image baseline encoder


DEPTH_CFG = EncoderConfig(variant=DEPTH_BASELINE, resolution=(64, 64),
                          conv_channels=(4, 4, 4), fc_width=16)


class TestDepthBaselineEncoder:
    def make(self, rng, cfg=DEPTH_CFG, dtype=np.float64):
        store = ParamStore(dtype)
        init_depth_baseline(store, cfg, rng)
        return store, cfg

    def test_feature_shape(self, rng):
        store, cfg = self.make(rng)
        out = encode_depth_baseline(store, cfg,
                                    Tensor(rng.uniform(0, 1, (3, 64, 64))))
        assert out.shape == (3, 16)

    def test_resolution_mismatch_rejected(self, rng):
        store, cfg = self.make(rng)
        with pytest.raises(ContractViolationError, match="resolution"):
            encode_depth_baseline(store, cfg,
                                  Tensor(rng.uniform(0, 1, (1, 32, 64))))

    def test_translation_sensitivity(self, rng):
        store, cfg = self.make(rng)
        img = rng.uniform(0, 1, (1, 64, 64))
        shifted = np.roll(img, 8, axis=2)
        a = encode_depth_baseline(store, cfg, Tensor(img)).data
        b = encode_depth_baseline(store, cfg, Tensor(shifted)).data
        assert np.max(np.abs(a - b)) > 1e-4

    def test_all_zero_input_is_finite(self, rng):
        store, cfg = self.make(rng)
        out = encode_depth_baseline(store, cfg, Tensor(np.zeros((2, 64, 64))))
        assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# recurrent policy


def tiny_pointnet_policy(dtype=np.float32, seed=5):
    cfg = PolicyConfig(
        encoder=EncoderConfig(variant=POINTNET, point_widths=(8, 8, 16)),
        recurrent_width=12)
    return NavPolicy(cfg, np.random.default_rng(seed), dtype=dtype)


def policy_inputs(policy, rng, t_steps, batch, n_points=24):
    """Random observation/goal/prev-action/mask/action sequences."""
    variant = policy.config.encoder.variant
    if variant == DEPTH_BASELINE:
        h, w = policy.config.encoder.resolution
        obs = rng.uniform(0.0, 10.0, (t_steps, batch, h, w))
    else:
        obs = rng.uniform(-3.0, 3.0, (t_steps, batch, n_points, 3))
    goal = np.stack([rng.uniform(0.0, 4.0, (t_steps, batch)),
                     rng.uniform(-np.pi, np.pi, (t_steps, batch))], axis=-1)
    prev = rng.integers(-1, 4, (t_steps, batch))
    mask = (rng.random((t_steps, batch)) > 0.3).astype(np.float64)
    actions = rng.integers(0, 4, (t_steps, batch))
    return obs, goal, prev, mask, actions


class TestPolicyForward:
    def test_step_shapes(self, rng):
        policy = tiny_pointnet_policy()
        state = policy.initial_state(3)
        obs = rng.normal(size=(3, 20, 3)).astype(np.float32)
        goal = np.array([[1.0, 0.2]] * 3)
        logits, value, h = policy.step(obs, goal, np.array([-1, 0, 2]), state)
        assert logits.shape == (3, 4)
        assert value.shape == (3,)
        assert h.shape == (3, 12)

    def test_initial_logits_near_uniform(self, rng):
        # The actor head starts tiny, so early exploration is near-uniform.
        policy = tiny_pointnet_policy()
        obs = rng.normal(size=(4, 20, 3)).astype(np.float32)
        goal = np.abs(rng.normal(size=(4, 2)))
        logits, _, _ = policy.step(obs, goal, np.full(4, -1),
                                   policy.initial_state(4))
        logp = log_softmax(logits, axis=-1).data
        assert np.max(np.abs(logp - np.log(0.25))) < 0.05

    def test_previous_action_encoding(self):
        policy = tiny_pointnet_policy()
        onehot = policy._prev_tensor(np.array([-1, 0, 3])).data
        np.testing.assert_array_equal(onehot[0], [0, 0, 0, 0])
        np.testing.assert_array_equal(onehot[1], [1, 0, 0, 0])
        np.testing.assert_array_equal(onehot[2], [0, 0, 0, 1])

    def test_act_is_consistent_and_seeded(self, rng):
        policy = tiny_pointnet_policy()
        obs = rng.normal(size=(5, 20, 3)).astype(np.float32)
        goal = np.abs(rng.normal(size=(5, 2)))
        prev = np.full(5, -1)
        state = policy.initial_state(5)
        out1 = policy.act(obs, goal, prev, state, np.random.default_rng(3))
        out2 = policy.act(obs, goal, prev, state, np.random.default_rng(3))
        np.testing.assert_array_equal(out1.actions, out2.actions)
        assert out1.actions.min() >= 0 and out1.actions.max() <= 3
        # Reported log-prob matches the step logits at the sampled action.
        logits, value, _ = policy.step(obs, goal, prev, state)
        logp = log_softmax(logits, axis=-1).data
        np.testing.assert_allclose(
            out1.log_probs, logp[np.arange(5), out1.actions], atol=1e-6)
        np.testing.assert_allclose(out1.values, value.data, atol=1e-6)

    def test_act_sampling_follows_the_softmax(self, rng):
        policy = tiny_pointnet_policy()
        obs = rng.normal(size=(1, 20, 3)).astype(np.float32)
        goal = np.array([[2.0, 0.5]])
        prev = np.array([1])
        state = policy.initial_state(1)
        logits, _, _ = policy.step(obs, goal, prev, state)
        probs = np.exp(log_softmax(logits, axis=-1).data)[0]
        counts = np.zeros(4)
        sample_rng = np.random.default_rng(0)
        for _ in range(4000):
            out = policy.act(obs, goal, prev, state, sample_rng)
            counts[out.actions[0]] += 1
        np.testing.assert_allclose(counts / 4000.0, probs, atol=0.03)

    def test_evaluate_matches_manual_steps(self, rng):
        policy = tiny_pointnet_policy(dtype=np.float64)
        obs, goal, prev, mask, actions = policy_inputs(policy, rng, 4, 3)
        state = policy.initial_state(3)
        out = policy.evaluate(obs, goal, prev, mask, state, actions)
        assert out.log_probs.shape == (4, 3)
        assert out.values.shape == (4, 3)

        with no_grad():
            h = Tensor(state.copy())
            for t in range(4):
                h = Tensor(h.data * mask[t][:, None])
                logits, value, h = policy.step(obs[t], goal[t], prev[t], h)
                logp = log_softmax(logits, axis=-1).data
                np.testing.assert_array_equal(
                    out.log_probs.data[t], logp[np.arange(3), actions[t]])
                np.testing.assert_array_equal(out.values.data[t], value.data)

    def test_mask_isolates_episodes(self, rng):
        # A masked reset at t makes the tail equal a fresh evaluation.
        policy = tiny_pointnet_policy(dtype=np.float64)
        obs, goal, prev, _, actions = policy_inputs(policy, rng, 6, 2)
        mask = np.ones((6, 2))
        mask[3, :] = 0.0
        state = policy.initial_state(2)
        full = policy.evaluate(obs, goal, prev, mask, state, actions)
        tail = policy.evaluate(obs[3:], goal[3:], prev[3:],
                               np.ones((3, 2)) * np.array([[0], [1], [1]]),
                               state, actions[3:])
        np.testing.assert_array_equal(full.log_probs.data[3:],
                                      tail.log_probs.data)
        np.testing.assert_array_equal(full.values.data[3:], tail.values.data)

    def test_entropy_matches_direct_computation(self, rng):
        policy = tiny_pointnet_policy(dtype=np.float64)
        obs, goal, prev, mask, actions = policy_inputs(policy, rng, 3, 2)
        out = policy.evaluate(obs, goal, prev, mask,
                              policy.initial_state(2), actions)
        with no_grad():
            h = Tensor(policy.initial_state(2))
            ent = []
            for t in range(3):
                h = Tensor(h.data * mask[t][:, None])
                logits, _, h = policy.step(obs[t], goal[t], prev[t], h)
                logp = log_softmax(logits, axis=-1).data
                ent.append(-(np.exp(logp) * logp).sum(axis=-1))
        assert abs(out.entropy.item() - np.mean(ent)) < 1e-12


class TestPolicyCheckpoint:
    def test_save_load_round_trip(self, tmp_path, rng):
        policy = tiny_pointnet_policy()
        path = tmp_path / "policy.ckpt"
        extra = {"update": np.array([42], dtype=np.int64)}
        policy.save(path, extra_arrays=extra, meta={"run": "abc"})
        loaded, got_extra, meta = NavPolicy.load(path)
        assert meta["run"] == "abc"
        assert got_extra["update"][0] == 42
        assert loaded.config == policy.config
        for name, p in policy.store.items():
            np.testing.assert_array_equal(loaded.store[name].data, p.data)
        obs = rng.normal(size=(2, 20, 3)).astype(np.float32)
        goal = np.abs(rng.normal(size=(2, 2)))
        prev = np.array([0, -1])
        a, _, _ = policy.step(obs, goal, prev, policy.initial_state(2))
        b, _, _ = loaded.step(obs, goal, prev, loaded.initial_state(2))
        np.testing.assert_array_equal(a.data, b.data)

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"\x89PNG not a policy at all")
        with pytest.raises(CheckpointFormatError):
            NavPolicy.load(path)

    def test_depth_policy_round_trip(self, tmp_path, rng):
        cfg = PolicyConfig(encoder=DEPTH_CFG, recurrent_width=10)
        policy = NavPolicy(cfg, np.random.default_rng(1))
        path = tmp_path / "depth.ckpt"
        policy.save(path)
        loaded, _, _ = NavPolicy.load(path)
        assert loaded.config.encoder.variant == DEPTH_BASELINE
        assert loaded.config.encoder.resolution == (64, 64)


# ---------------------------------------------------------------------------
# end-to-end gradient checks through the full recurrent policy


def nudge_biases(store, seed=99, scale=0.05):
    """Move zero-initialized biases off relu's kink (see module docstring)."""
    nrng = np.random.default_rng(seed)
    for name, p in store.items():
        if name.endswith(".b"):
            p.data += nrng.normal(0.0, scale, p.data.shape)


def policy_gradcheck(policy, data_seed, per_array=4, extra=0,
                     h=1e-5, t_steps=2, batch=2):
    """Worst relative error between analytic and central-difference grads.

    Samples at least ``per_array`` coordinates from every parameter array so
    each layer is covered, plus ``extra`` more drawn across the whole store.
    The loss is a clipped-update surrogate: policy-gradient term, value error,
    and an entropy bonus.
    """
    rng = np.random.default_rng(data_seed)
    obs, goal, prev, mask, actions = policy_inputs(policy, rng, t_steps,
                                                   batch, n_points=24)
    state = policy.initial_state(batch)
    adv = rng.normal(size=(t_steps, batch))
    ret = rng.normal(size=(t_steps, batch))

    def loss():
        out = policy.evaluate(obs, goal, prev, mask, state, actions)
        return (-(out.log_probs * adv).mean()
                + ((out.values - ret) ** 2).mean()
                - 0.01 * out.entropy)

    policy.store.zero_grad()
    loss().backward()
    worst = 0.0
    checks = 0
    for name, p in policy.store.items():
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None
                else np.zeros_like(p.data)).reshape(-1)
        n = min(per_array, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        if extra:
            budget = max(0, extra // max(1, len(policy.store.names())))
            more = rng.choice(flat.size,
                              size=min(budget, flat.size), replace=False)
            coords = np.unique(np.concatenate([coords, more]))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            plus = loss().item()
            flat[i] = orig - h
            minus = loss().item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, abs(numeric - grad[i])
                        / max(1.0, abs(numeric), abs(grad[i])))
            checks += 1
    return worst, checks


class TestPolicyGradcheck:
    def test_pointnet_full_policy(self):
        policy = tiny_pointnet_policy(dtype=np.float64, seed=5)
        nudge_biases(policy.store)
        worst, checks = policy_gradcheck(policy, data_seed=11, per_array=4,
                                         extra=60, t_steps=3)
        assert checks >= 100
        assert worst < 1e-4, f"worst relative error {worst:.3e}"

    def test_multiscale_full_policy(self):
        cfg = PolicyConfig(encoder=SMALL_MS, recurrent_width=10)
        policy = NavPolicy(cfg, np.random.default_rng(5), dtype=np.float64)
        nudge_biases(policy.store)
        worst, _ = policy_gradcheck(policy, data_seed=11, per_array=4)
        assert worst < 1e-4, f"worst relative error {worst:.3e}"

    def test_depth_full_policy(self):
        cfg = PolicyConfig(encoder=DEPTH_CFG, recurrent_width=10)
        policy = NavPolicy(cfg, np.random.default_rng(5), dtype=np.float64)
        nudge_biases(policy.store)
        # Data seed chosen so no conv pre-activation sits within the step
        # size of relu's kink (seed 3, for example, leaves two units there
        # and the difference quotient goes wild).
        worst, _ = policy_gradcheck(policy, data_seed=4, per_array=4)
        assert worst < 1e-4, f"worst relative error {worst:.3e}"
