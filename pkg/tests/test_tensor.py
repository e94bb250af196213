"""Tests for the autodiff engine: forward fixtures, gradient checks, tape contracts.

Every analytic gradient is checked against a central finite-difference oracle
computed in float64. The oracle re-evaluates the forward expression only; it
never touches the backward rules it is checking.
"""

import math

import numpy as np
import pytest

import roletune.tensor as rt
from roletune.errors import ShapeError
from roletune.tensor import Tape, Tensor


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_grads(build, params):
    """Central-difference gradients of a scalar expression, in float64.

    build(*tensors) -> scalar Tensor; params: list of float64 numpy arrays.
    Perturbation step scales with the entry magnitude: h = 1e-5 * (1 + |a|).
    """
    def eval_loss():
        return build(*[Tensor(p) for p in params]).item()

    grads = []
    for a in params:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = a[ix]
            h = 1e-5 * (1.0 + abs(orig))
            a[ix] = orig + h
            fp = eval_loss()
            a[ix] = orig - h
            fm = eval_loss()
            a[ix] = orig
            g[ix] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(build, params, dtype):
    """Backward-pass gradients for the same expression at the given dtype."""
    tensors = [Tensor(p.astype(dtype), requires_grad=True) for p in params]
    with Tape() as tape:
        loss = build(*tensors)
    grad_map = tape.backward(loss)
    return [grad_map[t] for t in tensors]


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-6)))


def assert_grads_match(build, params, dtype=np.float64, tol=1e-4):
    numeric = numeric_grads(build, [p.copy() for p in params])
    analytic = analytic_grads(build, params, dtype)
    for i, (g_a, g_n) in enumerate(zip(analytic, numeric)):
        assert g_a.shape == g_n.shape, f"param {i}: grad shape {g_a.shape} != {g_n.shape}"
        err = max_rel_err(g_a, g_n)
        assert err < tol, f"param {i}: relative gradient error {err:.3e} >= {tol}"


# ---------------------------------------------------------------------------
# Tensor basics
# ---------------------------------------------------------------------------

class TestTensorBasics:
    def test_float_dtypes_preserved(self):
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
        assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32

    def test_non_float_input_becomes_float32(self):
        t = Tensor(np.arange(4))
        assert t.dtype == np.float32

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_detach_shares_data_and_drops_grad_flag(self):
        t = Tensor(np.ones(3), requires_grad=True)
        d = t.detach()
        assert d.data is t.data
        assert not d.requires_grad

    def test_item_on_scalar(self):
        assert Tensor(np.asarray(2.5)).item() == 2.5

    def test_division_by_tensor_rejected(self):
        a = Tensor(np.ones(2))
        with pytest.raises(TypeError):
            a / a


# ---------------------------------------------------------------------------
# elementwise ops and broadcasting rules
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_add_sub_mul_values(self):
        a = Tensor(np.array([1.0, 2.0, 3.0]))
        b = Tensor(np.array([4.0, 5.0, 6.0]))
        np.testing.assert_array_equal((a + b).data, [5.0, 7.0, 9.0])
        np.testing.assert_array_equal((a - b).data, [-3.0, -3.0, -3.0])
        np.testing.assert_array_equal((a * b).data, [4.0, 10.0, 18.0])
        np.testing.assert_array_equal((-a).data, [-1.0, -2.0, -3.0])

    def test_suffix_broadcast_add(self):
        a = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.arange(4, dtype=np.float64))
        out = (a + b).data
        np.testing.assert_array_equal(out[1, 2], [1.0, 2.0, 3.0, 4.0])

    def test_non_suffix_broadcast_rejected(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((2,)))  # matches leading, not trailing, axis
        with pytest.raises(ShapeError):
            a + b

    def test_size_one_stretching_rejected(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((2, 1)))
        with pytest.raises(ShapeError):
            a * b

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.ones(2, dtype=np.float64))
        with pytest.raises(TypeError):
            a + b

    def test_broadcast_backward_sums_leading_axes(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal(4)
        assert_grads_match(lambda t, u: (t * u).sum(), [x, b])

    def test_scalar_division(self):
        a = Tensor(np.array([2.0, 4.0]))
        np.testing.assert_allclose((a / 2.0).data, [1.0, 2.0])


class TestSilu:
    def test_values(self):
        x = np.array([0.0, 1.0, -1.0])
        out = rt.silu(Tensor(x)).data
        expected = x / (1.0 + np.exp(-x))
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5))
        assert_grads_match(lambda t: rt.silu(t).sum(), [x])


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

class TestShapeOps:
    def test_reshape_roundtrip_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 6))
        w = rng.standard_normal((2, 3, 2))
        assert_grads_match(lambda t: (rt.reshape(t, (2, 3, 2)) * Tensor(w.astype(t.dtype))).sum(), [x])

    def test_swapaxes_values_and_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 4))
        out = rt.swapaxes(Tensor(x), 1, 2)
        np.testing.assert_array_equal(out.data, x.swapaxes(1, 2))
        w = rng.standard_normal((2, 4, 3))
        assert_grads_match(lambda t: (rt.swapaxes(t, 1, 2) * Tensor(w.astype(t.dtype))).sum(), [x])

    def test_concat_values_and_gradient(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 2))
        out = rt.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))
        w = rng.standard_normal((2, 5))

        def build(ta, tb):
            return (rt.concat([ta, tb], axis=1) * Tensor(w.astype(ta.dtype))).sum()

        assert_grads_match(build, [a, b])

    def test_concat_empty_list_rejected(self):
        with pytest.raises(ShapeError):
            rt.concat([], axis=0)

    def test_sum_and_mean_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        assert_grads_match(lambda t: t.sum(), [x])
        assert_grads_match(lambda t: t.mean(), [x])


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_two_by_two_times_column(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[5.0], [6.0]]))
        np.testing.assert_array_equal((a @ b).data, [[17.0], [39.0]])

    def test_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 3))
        out = Tensor(x) @ Tensor(np.eye(3))
        np.testing.assert_allclose(out.data, x, rtol=1e-12)

    def test_inner_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_batch_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3, 4))) @ Tensor(np.ones((3, 4, 5)))

    def test_vector_operand_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones(3))

    def test_gradient_2d(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        assert_grads_match(lambda ta, tb: (ta @ tb).sum(), [a, b])

    def test_gradient_batched(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        assert_grads_match(lambda ta, tb: (ta @ tb).sum(), [a, b])


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_uniform_logits(self):
        out = rt.softmax(Tensor(np.zeros(4))).data
        np.testing.assert_allclose(out, [0.25, 0.25, 0.25, 0.25], atol=1e-12)

    def test_log_three_fixture(self):
        out = rt.softmax(Tensor(np.array([0.0, math.log(3.0)]))).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 5))
        a = rt.softmax(Tensor(x)).data
        b = rt.softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        for dtype, atol in ((np.float64, 1e-12), (np.float32, 1e-6)):
            x = rng.standard_normal((4, 7)).astype(dtype) * 10
            out = rt.softmax(Tensor(x)).data
            np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=atol)

    def test_large_negative_mask_value_gives_exact_zero(self):
        x = np.array([0.0, rt.MASK_NEG], dtype=np.float32)
        out = rt.softmax(Tensor(x)).data
        assert out[1] == 0.0
        assert out[0] == 1.0

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError):
            rt.softmax(Tensor(np.array([0.0, np.nan])))
        with pytest.raises(ValueError):
            rt.softmax(Tensor(np.array([0.0, np.inf])))

    def test_invalid_axis_rejected(self):
        with pytest.raises(ShapeError):
            rt.softmax(Tensor(np.zeros((2, 3))), axis=2)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 6))
        w = rng.standard_normal((2, 6))
        assert_grads_match(lambda t: (rt.softmax(t) * Tensor(w.astype(t.dtype))).sum(), [x])

    def test_gradient_middle_axis(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((2, 3, 4))
        assert_grads_match(lambda t: (rt.softmax(t, axis=1) * Tensor(w.astype(t.dtype))).sum(), [x])


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

class TestCrossEntropy:
    def test_perfect_prediction_near_zero(self):
        logits = np.full((1, 4), -50.0)
        logits[0, 2] = 50.0
        loss, n = rt.cross_entropy(Tensor(logits), np.array([2]))
        assert n == 1
        assert loss.item() < 1e-8

    def test_uniform_logits_give_log_vocab(self):
        loss, n = rt.cross_entropy(Tensor(np.zeros((3, 8))), np.array([0, 3, 7]))
        assert n == 3
        np.testing.assert_allclose(loss.item(), math.log(8.0), rtol=1e-12)

    def test_mask_selects_positions(self):
        rng = np.random.default_rng(13)
        logits = rng.standard_normal((1, 6, 5))
        targets = rng.integers(0, 5, size=(1, 6))
        mask = np.array([[1, 1, 1, 0, 0, 0]])
        loss, n = rt.cross_entropy(Tensor(logits), targets, mask)
        assert n == 3
        # oracle: mean NLL over the three scored positions only
        expected = 0.0
        for j in range(3):
            row = logits[0, j]
            expected += np.log(np.exp(row).sum()) - row[targets[0, j]]
        np.testing.assert_allclose(loss.item(), expected / 3, rtol=1e-10)

    def test_masked_out_invalid_target_ignored(self):
        logits = np.zeros((1, 2, 4))
        targets = np.array([[1, 99]])  # 99 out of vocab but masked out
        mask = np.array([[1, 0]])
        loss, n = rt.cross_entropy(Tensor(logits), targets, mask)
        assert n == 1
        np.testing.assert_allclose(loss.item(), math.log(4.0), rtol=1e-12)

    def test_masked_in_invalid_target_rejected(self):
        with pytest.raises(IndexError):
            rt.cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))
        with pytest.raises(IndexError):
            rt.cross_entropy(Tensor(np.zeros((1, 4))), np.array([-1]))

    def test_all_masked_returns_zero_and_count_zero(self):
        loss, n = rt.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 1]), np.zeros(2))
        assert n == 0
        assert loss.item() == 0.0
        assert not loss.requires_grad

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            rt.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 1, 2]))
        with pytest.raises(ShapeError):
            rt.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 1]), np.ones(3))

    def test_extreme_logits_stay_finite(self):
        logits = np.array([[1000.0, -1000.0, 0.0]])
        loss, _ = rt.cross_entropy(Tensor(logits), np.array([1]))
        assert np.isfinite(loss.item())

    def test_gradient_with_mask(self):
        rng = np.random.default_rng(14)
        logits = rng.standard_normal((2, 4, 6))
        targets = rng.integers(0, 6, size=(2, 4))
        mask = rng.integers(0, 2, size=(2, 4))
        mask[0, 0] = 1  # keep at least one scored position
        assert_grads_match(lambda t: rt.cross_entropy(t, targets, mask)[0], [logits])

    def test_gradient_rows_sum_to_zero(self):
        # softmax minus one-hot sums to zero along the vocab axis
        rng = np.random.default_rng(15)
        logits = rng.standard_normal((3, 5))
        [g] = analytic_grads(lambda t: rt.cross_entropy(t, np.array([0, 2, 4]))[0], [logits], np.float64)
        np.testing.assert_allclose(g.sum(axis=-1), np.zeros(3), atol=1e-12)


# ---------------------------------------------------------------------------
# embedding / rms_norm / rotary positions
# ---------------------------------------------------------------------------

class TestEmbedding:
    def test_gather_values(self):
        table = np.arange(12, dtype=np.float64).reshape(4, 3)
        out = rt.embedding(Tensor(table), np.array([[1, 3], [0, 0]]))
        np.testing.assert_array_equal(out.data[0, 1], [9.0, 10.0, 11.0])
        np.testing.assert_array_equal(out.data[1, 0], [0.0, 1.0, 2.0])

    def test_repeated_ids_accumulate_gradient(self):
        table = np.zeros((4, 3))
        ids = np.array([2, 2, 2])
        [g] = analytic_grads(lambda t: rt.embedding(t, ids).sum(), [table], np.float64)
        np.testing.assert_array_equal(g[2], [3.0, 3.0, 3.0])
        np.testing.assert_array_equal(g[0], [0.0, 0.0, 0.0])

    def test_gradient_matches_oracle(self):
        rng = np.random.default_rng(16)
        table = rng.standard_normal((5, 4))
        ids = np.array([[0, 4, 2], [2, 2, 1]])
        w = rng.standard_normal((2, 3, 4))
        assert_grads_match(lambda t: (rt.embedding(t, ids) * Tensor(w.astype(t.dtype))).sum(), [table])


class TestRmsNorm:
    def test_unit_scale_normalizes_rms(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 5, 8))
        out = rt.rms_norm(Tensor(x), Tensor(np.ones(8)), eps=0.0).data
        rms = np.sqrt((out * out).mean(axis=-1))
        np.testing.assert_allclose(rms, np.ones((2, 5)), rtol=1e-10)

    def test_scale_multiplies_channels(self):
        x = np.ones((1, 4))
        scale = np.array([1.0, 2.0, 3.0, 4.0])
        out = rt.rms_norm(Tensor(x), Tensor(scale), eps=0.0).data
        np.testing.assert_allclose(out, [[1.0, 2.0, 3.0, 4.0]], rtol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((2, 3, 6))
        scale = rng.standard_normal(6)
        w = rng.standard_normal((2, 3, 6))
        assert_grads_match(
            lambda tx, ts: (rt.rms_norm(tx, ts, eps=1e-6) * Tensor(w.astype(tx.dtype))).sum(),
            [x, scale],
        )


class TestRopeRotate:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((1, 2, 3, 8))
        pos = np.zeros((1, 3), dtype=np.int64)
        out = rt.rope_rotate(Tensor(x), pos, base=10000.0).data
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_norm_preserved_per_pair(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((1, 2, 4, 6))
        pos = np.arange(4, dtype=np.int64)[None, :] + 7
        out = rt.rope_rotate(Tensor(x), pos, base=10000.0).data
        n_in = (x[..., 0::2] ** 2 + x[..., 1::2] ** 2)
        n_out = (out[..., 0::2] ** 2 + out[..., 1::2] ** 2)
        np.testing.assert_allclose(n_out, n_in, rtol=1e-10)

    def test_first_pair_rotates_at_unit_frequency(self):
        # pair 0 spins exactly `pos` radians: e1 at position p -> (cos p, sin p)
        x = np.zeros((1, 1, 1, 4))
        x[0, 0, 0, 0] = 1.0
        p = 2
        out = rt.rope_rotate(Tensor(x), np.array([[p]]), base=10000.0).data
        np.testing.assert_allclose(out[0, 0, 0, :2], [math.cos(p), math.sin(p)], rtol=1e-12)

    def test_relative_rotation_composes(self):
        # rotating by p then by q on fresh data equals rotating once by p+q
        rng = np.random.default_rng(21)
        x = rng.standard_normal((1, 1, 1, 8))
        once = rt.rope_rotate(Tensor(x), np.array([[5]]), base=10000.0).data
        twice = rt.rope_rotate(
            rt.rope_rotate(Tensor(x), np.array([[2]]), base=10000.0),
            np.array([[3]]),
            base=10000.0,
        ).data
        np.testing.assert_allclose(twice, once, rtol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((2, 2, 3, 8))
        pos = rng.integers(0, 50, size=(2, 3))
        w = rng.standard_normal((2, 2, 3, 8))
        assert_grads_match(
            lambda t: (rt.rope_rotate(t, pos, base=10000.0) * Tensor(w.astype(t.dtype))).sum(),
            [x],
        )


# ---------------------------------------------------------------------------
# tape contracts
# ---------------------------------------------------------------------------

class TestTape:
    def test_product_rule(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        y = Tensor(np.asarray(3.0), requires_grad=True)
        with Tape() as tape:
            z = x * y
        grads = tape.backward(z)
        assert grads[x] == 3.0
        assert grads[y] == 2.0

    def test_reused_operand_accumulates(self):
        x = Tensor(np.asarray(3.0), requires_grad=True)
        with Tape() as tape:
            z = x * x  # d/dx = 2x
        grads = tape.backward(z)
        assert grads[x] == 6.0

    def test_detached_tensor_absent_from_gradients(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        with Tape() as tape:
            z = x.detach() * x
        grads = tape.backward(z)
        assert grads[x] == 2.0  # only the tracked factor contributes
        assert len(grads) == 1

    def test_frozen_tensor_absent_from_gradients(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        w = Tensor(np.asarray(5.0))
        with Tape() as tape:
            z = x * w
        grads = tape.backward(z)
        assert w not in grads
        assert grads[x] == 5.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_tape_single_use(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        with Tape() as tape:
            z = x * x
        tape.backward(z)
        with pytest.raises(RuntimeError):
            tape.backward(z)

    def test_each_entry_visited_once(self):
        x = Tensor(np.asarray(1.5), requires_grad=True)
        with Tape() as tape:
            y = rt.silu(x * x + x)
            z = (y * y).sum()
        tape.backward(z)
        assert len(tape.entry_visits) == len(tape.entries) > 0
        assert all(v == 1 for v in tape.entry_visits)

    def test_ops_outside_tape_record_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            pass
        y = x * x  # after exit: plain evaluation
        assert not y.requires_grad
        assert len(tape.entries) == 0

    def test_nested_tapes_restore_outer(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        with Tape() as outer:
            _ = x * x
            with Tape() as inner:
                _ = x * x
            _ = x * x
        assert len(inner.entries) == 1
        assert len(outer.entries) == 2

    def test_leaf_grad_survives_for_optimizer(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        with Tape() as tape:
            z = x * x
        tape.backward(z)
        assert x.grad == 4.0
        x.zero_grad()
        assert x.grad is None

    def test_grad_accumulates_across_tapes(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        for _ in range(3):
            with Tape() as tape:
                z = x * x
            tape.backward(z)
        assert x.grad == 12.0

    def test_intermediate_grads_freed(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        with Tape() as tape:
            y = x * x
            z = y * y
        tape.backward(z)
        assert y.grad is None
        assert z.grad is None


# ---------------------------------------------------------------------------
# composite expressions: whole-graph gradient checks
# ---------------------------------------------------------------------------

def _attention_like(tx, tw, tv):
    """Tiny attention-shaped composite: softmax(x @ w / 2) @ v, then masked CE."""
    scores = (tx @ tw) / 2.0
    probs = rt.softmax(scores)
    mixed = probs @ tv
    return (rt.silu(mixed)).mean()

def test_composite_expression_gradients_float64():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((2, 4, 3))
    v = rng.standard_normal((2, 3, 5))
    assert_grads_match(_attention_like, [x, w, v], dtype=np.float64, tol=1e-4)


def test_composite_expression_gradients_float32():
    rng = np.random.default_rng(24)
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((2, 4, 3))
    v = rng.standard_normal((2, 3, 5))
    assert_grads_match(_attention_like, [x, w, v], dtype=np.float32, tol=1e-2)


def test_normalized_projection_gradients_float32():
    rng = np.random.default_rng(25)
    x = rng.standard_normal((2, 4, 8))
    scale = rng.standard_normal(8) * 0.5 + 1.0
    w = rng.standard_normal((8, 6))
    targets = rng.integers(0, 6, size=(2, 4))

    def build(tx, ts, tw):
        h = rt.rms_norm(tx, ts, eps=1e-6)
        logits = rt.reshape(rt.reshape(h, (8, 8)) @ tw, (2, 4, 6))
        return rt.cross_entropy(logits, targets)[0]

    assert_grads_match(build, [x, scale, w], dtype=np.float64, tol=1e-4)
    assert_grads_match(build, [x, scale, w], dtype=np.float32, tol=1e-2)
