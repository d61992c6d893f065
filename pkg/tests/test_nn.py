"""Neural building blocks: linear/attention/block semantics, losses, Adam,
the frozen partition, and the binary parameter table."""

import math

import numpy as np
import pytest

from sensorlm import autodiff as ad
from sensorlm import nn


def rand32(rng, shape):
    return rng.normal(0.0, 1.0, size=shape).astype(np.float32)


class TestParamSet:
    def test_sorted_iteration(self):
        ps = nn.ParamSet()
        ps.add("b", ad.tensor_from([1], [1]))
        ps.add("a", ad.tensor_from([1], [2]))
        assert ps.paths() == ["a", "b"]

    def test_duplicate_rejected(self):
        ps = nn.ParamSet()
        ps.add("x", ad.tensor_from([1], [1]))
        with pytest.raises(nn.ContractError):
            ps.add("x", ad.tensor_from([1], [2]))

    def test_freeze_partitions_trainable(self):
        ps = nn.ParamSet()
        ps.add("lm.w", ad.tensor_from([1], [1]))
        ps.add("adapter.w", ad.tensor_from([1], [2]))
        ps.freeze_prefix("lm.")
        assert ps.trainable_paths() == ["adapter.w"]

    def test_missing_path(self):
        with pytest.raises(nn.ContractError):
            nn.ParamSet()["nope"]


class TestLinear:
    def test_identity_weights(self):
        x = ad.tensor_from([2, 3], [1, 2, 3, 4, 5, 6])
        w = ad.Tensor(np.eye(3, dtype=np.float32))
        b = ad.tensor_from([3], [0, 0, 0])
        assert np.array_equal(nn.linear_apply(w, b, x).data, x.data)

    def test_zero_input_gives_bias(self):
        x = ad.tensor_from([2, 3], [0] * 6)
        w = ad.Tensor(np.eye(3, dtype=np.float32))
        b = ad.tensor_from([3], [1, 2, 3])
        out = nn.linear_apply(w, b, x).data
        assert out.tolist() == [[1, 2, 3], [1, 2, 3]]

    def test_random_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rand32(rng, (3, 4)), rand32(rng, (4, 2)), rand32(rng, (2,))
        out = nn.linear_apply(ad.Tensor(w), ad.Tensor(b), ad.Tensor(x)).data
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                expect[i, j] = b[j] + sum(float(x[i, k]) * float(w[k, j]) for k in range(4))
        assert np.allclose(out, expect, atol=1e-5)


class TestAttention:
    def test_single_token_returns_value_row(self):
        rng = np.random.default_rng(1)
        q, k, v = (ad.Tensor(rand32(rng, (1, 4))) for _ in range(3))
        out = nn.attention_apply(q, k, v, 1, True)
        assert np.allclose(out.data, v.data, atol=1e-6)

    def test_causal_mask_blocks_future(self):
        rng = np.random.default_rng(2)
        base = rand32(rng, (3, 4))
        perturbed = base.copy()
        perturbed[2] += 5.0
        outs = []
        for arr in (base, perturbed):
            x = ad.Tensor(arr)
            outs.append(nn.attention_apply(x, x, x, 2, True).data)
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_two_token_one_head_matches_hand_oracle(self):
        q = ad.tensor_from([2, 2], [1, 0, 0, 1])
        k = ad.tensor_from([2, 2], [1, 1, 0, 2])
        v = ad.tensor_from([2, 2], [1, 2, 3, 4])
        out = nn.attention_apply(q, k, v, 1, False).data
        # hand-rolled: scores = q k^T / sqrt(2), softmax rows, times v
        scores = (q.data @ k.data.T) / math.sqrt(2)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(out, attn @ v.data, atol=1e-5)

    def test_indivisible_heads_rejected(self):
        x = ad.Tensor(np.zeros((2, 6), dtype=np.float32))
        with pytest.raises(nn.ContractError):
            nn.attention_apply(x, x, x, 4, True)


class TestTransformerBlock:
    def _params(self, d, rng):
        ps = nn.ParamSet()
        nn.init_transformer_block(ps, "blk", d, rng)
        return ps

    def test_zero_output_projections_give_identity(self):
        rng = np.random.default_rng(3)
        ps = self._params(8, rng)
        ps["blk.attn.wo"].data[...] = 0.0
        ps["blk.mlp.w2"].data[...] = 0.0
        x = ad.Tensor(rand32(rng, (5, 8)))
        out = nn.transformer_block_apply(ps, "blk", x, 2)
        assert np.allclose(out.data, x.data, atol=1e-6)

    def test_shape_preserved_for_any_length(self):
        rng = np.random.default_rng(4)
        ps = self._params(8, rng)
        for t in (1, 3, 9):
            x = ad.Tensor(rand32(rng, (t, 8)))
            assert nn.transformer_block_apply(ps, "blk", x, 2).shape == (t, 8)

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        ps = self._params(8, rng)
        x = ad.Tensor(rand32(rng, (2, 8)), requires_grad=True)
        mix = ad.Tensor(rand32(rng, (2, 8)))
        params = [x] + [ps[p] for p in ps.paths()]
        rep = ad.finite_diff_check(
            lambda: ad.reduce(ad.mul(nn.transformer_block_apply(ps, "blk", x, 2), mix), "sum"),
            params)
        assert rep.max_rel_err < 1e-3

    def test_missing_parameter_path(self):
        ps = nn.ParamSet()
        with pytest.raises(nn.ContractError):
            nn.transformer_block_apply(ps, "blk", ad.Tensor(np.zeros((2, 4), dtype=np.float32)), 2)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = ad.Tensor(np.zeros((3, 4), dtype=np.float32))
        loss = nn.cross_entropy(logits, [0, 1, 2])
        assert abs(loss.item() - math.log(4)) < 1e-6

    def test_confident_correct_is_near_zero(self):
        logits = np.full((1, 4), -50.0, dtype=np.float32)
        logits[0, 2] = 50.0
        loss = nn.cross_entropy(ad.Tensor(logits), [2])
        assert loss.item() < 1e-5

    def test_all_ignored_gives_zero_loss_and_grad(self):
        logits = ad.Tensor(rand32(np.random.default_rng(6), (2, 4)), requires_grad=True)
        loss = nn.cross_entropy(logits, [-1, -1])
        assert loss.item() == 0.0
        assert loss.node is None  # constant: no gradient flows

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            logits = ad.Tensor(rand32(rng, (3, 5)))
            targets = [int(rng.integers(0, 5)) for _ in range(3)]
            assert nn.cross_entropy(logits, targets).item() >= 0.0

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            nn.cross_entropy(ad.Tensor(np.zeros((1, 3), dtype=np.float32)), [3])

    def test_gradient_check(self):
        logits = ad.Tensor(rand32(np.random.default_rng(8), (3, 5)), requires_grad=True)
        rep = ad.finite_diff_check(lambda: nn.cross_entropy(logits, [0, -1, 4]), [logits])
        assert rep.max_rel_err < 1e-3


class TestMSE:
    def test_equal_inputs(self):
        x = ad.tensor_from([2, 2], [1, 2, 3, 4])
        assert nn.mse_loss(x, ad.tensor_from([2, 2], [1, 2, 3, 4])).item() == 0.0

    def test_all_ones_difference(self):
        pred = ad.tensor_from([2, 2], [1, 1, 1, 1])
        target = ad.tensor_from([2, 2], [0, 0, 0, 0])
        assert nn.mse_loss(pred, target).item() == 1.0

    def test_random_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        p, t = rand32(rng, (3, 4)), rand32(rng, (3, 4))
        loss = nn.mse_loss(ad.Tensor(p), ad.Tensor(t)).item()
        expect = sum((float(p[i, j]) - float(t[i, j])) ** 2 for i in range(3) for j in range(4)) / 12
        assert abs(loss - expect) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            nn.mse_loss(ad.tensor_from([2], [1, 2]), ad.tensor_from([3], [1, 2, 3]))


class TestAdam:
    def _paramset(self, value=1.0, frozen=False):
        ps = nn.ParamSet()
        ps.add("w", ad.tensor_from([1], [value], requires_grad=True))
        if frozen:
            ps.freeze(["w"])
        return ps

    def test_default_hyperparameters(self):
        s = nn.AdamState()
        assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-4, 0.9, 0.999, 1e-8)

    def test_zero_gradient_leaves_parameter(self):
        ps = self._paramset(2.5)
        before = ps["w"].data.copy()
        nn.adam_update(ps, nn.AdamState(), {"w": np.zeros(1, dtype=np.float32)})
        assert np.array_equal(ps["w"].data, before)

    def test_single_step_matches_hand_formula(self):
        ps = self._paramset(1.0)
        state = nn.AdamState(lr=0.1)
        g = 0.5
        nn.adam_update(ps, state, {"w": np.array([g], dtype=np.float32)})
        # hand-computed: m=0.1g/0.1=g ; v=0.001g^2/0.001=g^2 ; step = lr*g/(|g|+eps)
        expect = 1.0 - 0.1 * g / (math.sqrt(g * g) + 1e-8)
        assert abs(float(ps["w"].data[0]) - expect) < 1e-7

    def test_frozen_parameter_bitwise_unchanged(self):
        ps = self._paramset(3.0, frozen=True)
        before = ps["w"].data.tobytes()
        nn.adam_update(ps, nn.AdamState(lr=1.0), {})
        assert ps["w"].data.tobytes() == before

    def test_missing_gradient_is_contract_error(self):
        ps = self._paramset()
        with pytest.raises(nn.ContractError):
            nn.adam_update(ps, nn.AdamState(), {})


class TestSerialization:
    def _paramset(self):
        rng = np.random.default_rng(10)
        ps = nn.ParamSet()
        ps.add("a.w", ad.Tensor(rand32(rng, (3, 2)), requires_grad=True))
        ps.add("b.bias", ad.Tensor(rand32(rng, (4,)), requires_grad=True))
        ps.add("scalar", ad.Tensor(np.float32(1.5)), )
        return ps

    def test_round_trip_bitwise(self):
        ps = self._paramset()
        blob = nn.params_serialize(ps)
        back = nn.params_deserialize(blob)
        assert back.paths() == ps.paths()
        for p in ps.paths():
            assert back[p].data.tobytes() == ps[p].data.tobytes()
        assert nn.params_serialize(back) == blob

    def test_empty_paramset_round_trips(self):
        blob = nn.params_serialize(nn.ParamSet())
        assert len(nn.params_deserialize(blob)) == 0

    def test_truncated_blob_is_format_error(self):
        blob = nn.params_serialize(self._paramset())
        with pytest.raises(nn.FormatError):
            nn.params_deserialize(blob[:-3])

    def test_trailing_garbage_rejected(self):
        blob = nn.params_serialize(self._paramset())
        with pytest.raises(nn.FormatError):
            nn.params_deserialize(blob + b"xx")
