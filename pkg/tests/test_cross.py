import numpy as np
import pytest

from ioreward import tensor as T
from ioreward.cross import (CrossAttentionParams, CrossBlockStack,
                            cross_attend, cross_block_stack)
from ioreward.encoder import FeatureMap
from ioreward.errors import ConfigError, ContractError, WiringError
from ioreward.tensor import Tensor
from ioreward.verify import (check_cross_scale_invariance,
                             check_cross_shift_toggle_constant,
                             check_cross_sidedness, cross_oracle_max_diff)


def fm(arr):
    t = Tensor(arr)
    if t.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    return FeatureMap(t)


def make_params(dim=8, heads=1, w=4, seed=0, cyclic=False,
                dtype=np.float64):
    return CrossAttentionParams(dim, heads, w, np.random.default_rng(seed),
                                cyclic_shift_enabled=cyclic, dtype=dtype)


class TestCrossAttend:
    def test_constant_input_side_gives_uniform_weights_and_mean_value(self):
        # tau = 1, zero bias: identical keys force uniform rows, so the
        # pre-projection output is the mean of V(i) for every query
        rng = np.random.default_rng(1)
        p = make_params(heads=1)
        i_map = np.full((4, 4, 8), 0.37)
        o_map = rng.normal(0, 1, (4, 4, 8))
        stats = {}
        cross_attend(fm(i_map), fm(o_map), p, stats=stats)
        w = stats["attn_weights"]
        assert np.abs(w - 1.0 / 16).max() < 1e-12
        v_tokens = stats["v"].data  # [1, heads, N, dh]
        v_mean = v_tokens[0, 0].mean(axis=0)
        pre = stats["pre_projection"][0]
        assert np.abs(pre - v_mean).max() < 1e-10

    def test_single_token_window_passes_value_through(self):
        rng = np.random.default_rng(2)
        p = make_params(dim=6, heads=1, w=1, seed=2)
        i_map = rng.normal(0, 1, (1, 1, 6))
        o_map = rng.normal(0, 1, (1, 1, 6))
        stats = {}
        cross_attend(fm(i_map), fm(o_map), p, stats=stats)
        assert np.abs(stats["attn_weights"] - 1.0).max() == 0.0
        v = stats["v"][0, 0, 0] if isinstance(stats["v"], np.ndarray) \
            else stats["v"].data[0, 0, 0]
        assert np.abs(stats["pre_projection"][0, 0] - v).max() < 1e-12

    def test_matches_bruteforce_oracle_f64(self):
        worst = cross_oracle_max_diff(n_instances=4, dtype=np.float64)
        assert worst < 1e-10

    def test_matches_bruteforce_oracle_f32(self):
        worst = cross_oracle_max_diff(n_instances=2, dtype=np.float32,
                                      seed=900)
        assert worst < 1e-5

    def test_mutation_detected_by_oracle(self):
        # transposing the K projection must break oracle equivalence
        def perturb(p):
            p.k.w.data = p.k.w.data.T.copy()

        worst = cross_oracle_max_diff(n_instances=2, dtype=np.float64,
                                      perturb=perturb)
        assert worst > 1e-3

    def test_wiring_error_on_mismatched_taps(self):
        p = make_params()
        with pytest.raises(WiringError):
            cross_attend(fm(np.zeros((4, 4, 8))), fm(np.zeros((2, 2, 8))), p)

    def test_window_divisibility(self):
        p = make_params(w=4)
        with pytest.raises(ConfigError):
            cross_attend(fm(np.zeros((6, 6, 8))), fm(np.zeros((6, 6, 8))), p)

    def test_row_stochastic_with_shift_and_mask(self):
        rng = np.random.default_rng(3)
        p = make_params(heads=2, seed=3, cyclic=True)
        stats = {}
        cross_attend(fm(rng.normal(0, 1, (8, 8, 8))),
                     fm(rng.normal(0, 1, (8, 8, 8))), p, stats=stats)
        assert np.abs(stats["attn_weights"].sum(-1) - 1.0).max() < 1e-6

    def test_sidedness_structural(self):
        assert check_cross_sidedness().passed

    def test_scale_invariance_zero_q_bias(self):
        assert check_cross_scale_invariance().passed

    def test_shift_toggle_constant_input_exact(self):
        assert check_cross_shift_toggle_constant().passed

    def test_gradients_flow_to_both_sides(self):
        rng = np.random.default_rng(4)
        p = make_params(heads=2, seed=4)
        i_t = Tensor(rng.normal(0, 1, (1, 4, 4, 8)), requires_grad=True)
        o_t = Tensor(rng.normal(0, 1, (1, 4, 4, 8)), requires_grad=True)
        out = cross_attend(FeatureMap(i_t), FeatureMap(o_t), p)
        T.backward(T.tsum(out.data))
        assert np.abs(i_t.grad).max() > 0 and np.abs(o_t.grad).max() > 0


class TestCrossBlockStack:
    def test_count_one_equals_cross_attend(self):
        rng = np.random.default_rng(5)
        stack = CrossBlockStack(8, 1, 4, 1, np.random.default_rng(5))
        i_map = rng.normal(0, 1, (4, 4, 8)).astype(np.float32)
        o_map = rng.normal(0, 1, (4, 4, 8)).astype(np.float32)
        with T.no_grad():
            a = stack(fm(i_map), fm(o_map)).data.data
            b = cross_attend(fm(i_map), fm(o_map),
                             stack.blocks[0]).data.data
        assert np.array_equal(a, b)

    def test_value_free_second_block_is_near_identity(self):
        # documented tolerance: layernorm idempotence leaves ~1e-3 residue
        rng = np.random.default_rng(6)
        stack = CrossBlockStack(8, 1, 4, 2, np.random.default_rng(6),
                                dtype=np.float64)
        blk2 = stack.blocks[1]
        blk2.v.w.data[:] = 0.0
        blk2.v.b.data[:] = 0.0
        blk2.proj.b.data[:] = 0.0
        i_map = rng.normal(0, 1, (4, 4, 8))
        o_map = rng.normal(0, 1, (4, 4, 8))
        with T.no_grad():
            one = cross_attend(fm(i_map), fm(o_map),
                               stack.blocks[0]).data.data
            two = stack(fm(i_map), fm(o_map)).data.data
        assert np.abs(one - two).max() < 1e-3

    def test_shapes_preserved_through_stack(self):
        stack = CrossBlockStack(8, 2, 4, 3, np.random.default_rng(7))
        out = stack(fm(np.zeros((8, 8, 8), dtype=np.float32)),
                    fm(np.zeros((8, 8, 8), dtype=np.float32)))
        assert (out.height, out.width, out.channels) == (8, 8, 8)

    def test_param_count_contract(self):
        with pytest.raises(ContractError):
            cross_block_stack(fm(np.zeros((4, 4, 8), dtype=np.float32)),
                              fm(np.zeros((4, 4, 8), dtype=np.float32)),
                              [make_params()], 2)
        with pytest.raises(ContractError):
            CrossBlockStack(8, 1, 4, 0, np.random.default_rng(8))

    def test_keys_reused_from_original_input_tap(self):
        # with the i-side zeroed, every block's K/V see the zero tap even
        # though the query stream evolves
        stack = CrossBlockStack(8, 1, 4, 2, np.random.default_rng(9),
                                dtype=np.float64)
        rng = np.random.default_rng(10)
        i_map = np.zeros((4, 4, 8))
        o_map = rng.normal(0, 1, (4, 4, 8))
        stats = {}
        first = cross_attend(fm(i_map), fm(o_map), stack.blocks[0])
        cross_attend(fm(i_map), first, stack.blocks[1], stats=stats)
        k = stats["k"].data
        # K of zero tap = bias only, identical for all tokens
        assert np.abs(k - k[..., :1, :]).max() < 1e-12
