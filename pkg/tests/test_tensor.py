import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ioreward import tensor as T
from ioreward.errors import ContractError, NumericError, ShapeError
from ioreward.tensor import Tensor


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).normal(0, 1, shape).astype(dtype)


class TestMatmul:
    def test_identity_case(self):
        out = T.matmul(T.identity(2, np.float64),
                       Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])))
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_projector_case(self):
        out = T.matmul(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])),
                       Tensor(np.array([[5.0], [7.0]])))
        assert np.array_equal(out.data, [[5.0], [0.0]])

    def test_matches_triple_loop_oracle(self):
        a, b = rand((3, 4), 1), rand((4, 2), 2)
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - want).max() < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(Tensor(rand((3, 4))), Tensor(rand((5, 2))))
        assert "(3, 4)" in str(exc.value) and "(5, 2)" in str(exc.value)

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(NumericError):
            T.matmul(Tensor(rand((2, 2), dtype=np.float32)),
                     Tensor(rand((2, 2), dtype=np.float64)))

    def test_batched_backward_unbroadcasts(self):
        a = Tensor(rand((5, 3, 4), 3), requires_grad=True)
        b = Tensor(rand((4, 2), 4), requires_grad=True)
        T.backward(T.tsum(T.matmul(a, b)))
        assert a.grad.shape == a.shape and b.grad.shape == b.shape


class TestSoftmaxRows:
    def test_symmetry_case(self):
        out = T.softmax_rows(Tensor(np.array([[0.0, 0.0]])))
        assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-12)

    def test_analytically_forced_case(self):
        out = T.softmax_rows(Tensor(np.array([[math.log(2.0), 0.0]])))
        assert np.allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_random_rows_sum_to_one_and_match_oracle(self):
        m = rand((4, 5), 7)
        got = T.softmax_rows(Tensor(m)).data
        want = np.exp(m) / np.exp(m).sum(axis=-1, keepdims=True)
        assert np.abs(got.sum(axis=-1) - 1.0).max() < 1e-6
        assert np.abs(got - want).max() < 1e-12

    def test_nonfinite_input_raises(self):
        with pytest.raises(NumericError):
            T.softmax_rows(Tensor(np.array([[1.0, np.nan]])))
        with pytest.raises(NumericError):
            T.softmax_rows(Tensor(np.array([[np.inf, 0.0]])))

    def test_large_values_stable(self):
        out = T.softmax_rows(Tensor(np.array([[1e4, 1e4 - 2.0]])))
        assert np.isfinite(out.data).all()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_rows_sum_to_one_property(self, seed):
        m = np.random.default_rng(seed).normal(0, 10, (3, 6))
        got = T.softmax_rows(Tensor(m)).data
        assert np.abs(got.sum(axis=-1) - 1.0).max() < 1e-6


class TestCosineSimilarityMatrix:
    def test_self_similarity(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        assert abs(T.cosine_similarity_matrix(a, a).data[0, 0] - 1.0) < 1e-12

    def test_orthogonality(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        b = Tensor(np.array([[0.0, 1.0]]))
        assert abs(T.cosine_similarity_matrix(a, b).data[0, 0]) < 1e-12

    def test_matches_normalize_then_dot_oracle(self):
        a, b = rand((3, 4), 5), rand((2, 4), 6)
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-6)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-6)
        got = T.cosine_similarity_matrix(Tensor(a), Tensor(b)).data
        assert np.abs(got - an @ bn.T).max() < 1e-10

    def test_entries_bounded(self):
        a, b = rand((6, 3), 8), rand((5, 3), 9)
        got = T.cosine_similarity_matrix(Tensor(a), Tensor(b)).data
        assert got.min() >= -1 - 1e-6 and got.max() <= 1 + 1e-6

    def test_zero_vector_clamped_with_finite_gradient(self):
        # regression: sqrt backward at zero rows must not produce NaN
        a = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(rand((2, 3), 10), requires_grad=True)
        out = T.cosine_similarity_matrix(a, b)
        assert np.isfinite(out.data).all()
        T.backward(T.tsum(out))
        assert np.isfinite(a.grad).all() and np.isfinite(b.grad).all()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1),
           st.floats(min_value=0.01, max_value=100.0))
    def test_scale_invariance_property(self, seed, c):
        a = np.random.default_rng(seed).normal(0, 1, (3, 4)) + 0.1
        b = rand((2, 4), 11)
        base = T.cosine_similarity_matrix(Tensor(a), Tensor(b)).data
        scaled = a.copy()
        scaled[1] *= c
        got = T.cosine_similarity_matrix(Tensor(scaled), Tensor(b)).data
        assert np.abs(got[1] - base[1]).max() < 1e-6


class TestCyclicShift:
    def test_zero_shift_is_identity(self):
        x = rand((4, 4, 2), 12)
        assert np.array_equal(T.cyclic_shift(Tensor(x), 0, 0).data, x)

    def test_two_by_two_roll(self):
        x = np.arange(4.0).reshape(2, 2, 1)   # [[a,b],[c,d]]
        got = T.cyclic_shift(Tensor(x), 1, 1).data[..., 0]
        assert np.array_equal(got, [[3.0, 2.0], [1.0, 0.0]])   # [[d,c],[b,a]]

    def test_matches_modular_index_oracle(self):
        x = rand((4, 4, 2), 13)
        got = T.cyclic_shift(Tensor(x), 1, 3).data
        want = np.empty_like(x)
        for y in range(4):
            for xx in range(4):
                want[(y + 1) % 4, (xx + 3) % 4] = x[y, xx]
        assert np.array_equal(got, want)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(-7, 7), st.integers(-7, 7))
    def test_roundtrip_property(self, dy, dx):
        x = rand((5, 6, 3), 14)
        back = T.cyclic_shift(T.cyclic_shift(Tensor(x), dy, dx),
                              -dy, -dx).data
        assert np.array_equal(back, x)

    def test_rank_error(self):
        with pytest.raises(ShapeError):
            T.cyclic_shift(Tensor(rand((4, 4))), 1, 1)


class TestWindowOps:
    def test_partition_reverse_identity_batched(self):
        x = rand((2, 8, 8, 3), 15)
        wins = T.window_partition(Tensor(x), 4)
        assert wins.shape == (8, 16, 3)
        back = T.window_reverse(wins, 4, 8, 8, batch=2).data
        assert np.array_equal(back, x)

    def test_partition_reverse_identity_single(self):
        x = rand((6, 6, 2), 16)
        wins = T.window_partition(Tensor(x), 2)
        back = T.window_reverse(wins, 2, 6, 6).data
        assert np.array_equal(back, x)

    def test_divisibility_rejected(self):
        with pytest.raises(ShapeError):
            T.window_partition(Tensor(rand((6, 6, 2))), 4)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([(4, 2), (8, 4), (6, 3), (8, 2)]))
    def test_roundtrip_property(self, dims):
        side, w = dims
        x = rand((side, side, 2), 17)
        back = T.window_reverse(T.window_partition(Tensor(x), w),
                                w, side, side).data
        assert np.array_equal(back, x)


class TestBackward:
    def test_square_derivative(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        T.backward(T.mul(x, x))
        assert abs(float(x.grad) - 6.0) < 1e-12

    def test_softmax_sum_conserved(self):
        v = Tensor(rand((3, 5), 18), requires_grad=True)
        T.backward(T.tsum(T.softmax_rows(v)))
        assert np.abs(v.grad).max() < 1e-12

    def test_non_scalar_loss_rejected(self):
        v = Tensor(rand((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(v, v))

    def test_all_reachable_tensors_get_grads(self):
        x = Tensor(rand((2, 3), 19), requires_grad=True)
        mid = T.gelu(x)
        T.backward(T.tsum(mid))
        assert x.grad is not None and mid.grad is not None

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        T.backward(T.mul(x, x))
        g1 = float(x.grad)
        T.backward(T.mul(x, x))
        assert abs(float(x.grad) - 2 * g1) < 1e-12

    def test_no_grad_skips_tape(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with T.no_grad():
            y = T.matmul(x, x)
        assert not y.requires_grad and y._parents == ()


class TestCompositeKernels:
    def test_layernorm_constant_input_is_zero(self):
        gamma = Tensor(np.ones(4))
        beta = Tensor(np.zeros(4))
        out = T.layernorm(Tensor(np.full((2, 4), 3.3)), gamma, beta)
        assert np.abs(out.data).max() < 1e-6

    def test_layernorm_normalizes(self):
        x = rand((5, 8), 20)
        out = T.layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.data.std(axis=-1) - 1.0).max() < 1e-3

    def test_cross_entropy_soft_known_value(self):
        logits = Tensor(np.array([[0.0, 0.0]]))
        loss = T.cross_entropy_soft(logits, Tensor(np.array([[1.0, 0.0]])))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_cross_entropy_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.cross_entropy_soft(Tensor(rand((2, 2))), Tensor(rand((3, 2))))

    def test_mean_pool_tokens(self):
        x = rand((2, 3, 4), 21)
        got = T.mean_pool_tokens(Tensor(x)).data
        assert np.abs(got - x.mean(axis=(0, 1))).max() < 1e-12

    def test_gelu_values(self):
        # GELU(0) = 0; GELU is near-identity for large positive inputs
        x = Tensor(np.array([0.0, 10.0, -10.0]))
        out = T.gelu(x).data
        assert abs(out[0]) < 1e-12
        assert abs(out[1] - 10.0) < 1e-6
        assert abs(out[2]) < 1e-6


class TestKernelGradients:
    """Central finite differences for every differentiable kernel (f64)."""

    def _fd_check(self, f, params, h=1e-6, tol=1e-5):
        from ioreward.verify import finite_diff_check
        res = finite_diff_check(f, params, h=h, rtol=tol, max_coords=64,
                                seed=0)
        worst = max(r.max_rel_err for r in res.values())
        assert worst < tol, f"worst rel err {worst}"

    def test_matmul_and_linear(self):
        x = Tensor(rand((3, 4), 22), requires_grad=True)
        w = Tensor(rand((4, 2), 23), requires_grad=True)
        b = Tensor(rand(2, 24), requires_grad=True)
        self._fd_check(lambda: T.tsum(T.gelu(T.linear(x, w, b))),
                       {"x": x, "w": w, "b": b})

    def test_softmax_and_cosine(self):
        a = Tensor(rand((3, 4), 25), requires_grad=True)
        b = Tensor(rand((5, 4), 26), requires_grad=True)
        w = Tensor(rand((5, 1), 27), requires_grad=True)

        def f():
            attn = T.softmax_rows(T.cosine_similarity_matrix(a, b))
            return T.tsum(T.matmul(attn, w))

        self._fd_check(f, {"a": a, "b": b, "w": w})

    def test_layernorm(self):
        x = Tensor(rand((4, 6), 28), requires_grad=True)
        gamma = Tensor(np.random.default_rng(29).uniform(0.5, 1.5, 6),
                       requires_grad=True)
        beta = Tensor(rand(6, 30), requires_grad=True)
        self._fd_check(
            lambda: T.tsum(T.mul(T.layernorm(x, gamma, beta),
                                 Tensor(rand((4, 6), 31)))),
            {"x": x, "gamma": gamma, "beta": beta})

    def test_window_roll_concat_gather(self):
        x = Tensor(rand((4, 4, 2), 32), requires_grad=True)
        y = Tensor(rand((4, 4, 2), 33), requires_grad=True)
        table = Tensor(rand((9, 2), 34), requires_grad=True)
        idx = np.array([[0, 3], [8, 5]])

        def f():
            z = T.concat([T.cyclic_shift(x, 1, 2), y], axis=-1)
            wins = T.window_partition(z, 2)
            pooled = T.mean_pool_tokens(wins)
            return T.tsum(T.mul(T.take_rows(table, idx),
                                Tensor(rand((2, 2, 2), 35)))) + \
                T.tsum(pooled)

        self._fd_check(f, {"x": x, "y": y, "table": table})

    def test_cross_entropy_soft(self):
        logits = Tensor(rand((4, 2), 36), requires_grad=True)
        targets = Tensor(np.array([[1.0, 0.0], [0.0, 1.0],
                                   [0.5, 0.5], [0.3, 0.7]]))
        self._fd_check(lambda: T.cross_entropy_soft(logits, targets),
                       {"logits": logits})


class TestDeterminism:
    def test_identical_seeds_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(0, 1, (4, 4)).astype(np.float32),
                       requires_grad=True)
            y = T.softmax_rows(T.matmul(x, x))
            T.backward(T.tsum(T.mul(y, y)))
            return y.data.copy(), x.grad.copy()

        (y1, g1), (y2, g2) = run(), run()
        assert np.array_equal(y1, y2) and np.array_equal(g1, g2)
