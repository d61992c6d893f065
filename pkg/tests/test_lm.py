"""Tokenizer round-trips, prefix-aware forward, generation, and the
frozen-build contract."""

import math

import numpy as np
import pytest

from sensorlm import autodiff as ad
from sensorlm import lm as lmmod
from sensorlm import nn
from sensorlm.lm import (BOS, EOS, ByteTokenizer, CausalLM, LMConfig, LM_PRESETS,
                         LengthError, build_frozen_lm, generate_greedy,
                         lm_next_token_loss)

TINY = LMConfig(d_model=32, n_layers=2, n_heads=2, max_seq=64)


def fresh_lm(seed=0):
    return CausalLM.build(TINY, nn.ParamSet(), seed)


class TestTokenizer:
    def test_empty_round_trip(self):
        tok = ByteTokenizer()
        assert tok.tokenize("") == []
        assert tok.detokenize([]) == ""

    def test_byte_identity(self):
        tok = ByteTokenizer()
        assert tok.tokenize("ab") == [97, 98]
        assert tok.detokenize([97, 98]) == "ab"

    def test_random_byte_strings_round_trip(self):
        tok = ByteTokenizer()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            raw = bytes(rng.integers(0, 256, size=int(rng.integers(0, 40))).tolist())
            assert tok.detokenize_bytes(tok.tokenize(raw)) == raw

    def test_specials_stripped(self):
        tok = ByteTokenizer()
        assert tok.detokenize_bytes([BOS, 104, 105, EOS]) == b"hi"

    def test_vocab_constants(self):
        assert ByteTokenizer.vocab_size == 260
        assert (lmmod.PAD, lmmod.BOS, lmmod.EOS, lmmod.SEP) == (256, 257, 258, 259)


class TestForward:
    def test_no_prefix_is_plain_forward(self):
        lm = fresh_lm()
        hidden, logits = lm.forward(None, [1, 2, 3])
        assert hidden.shape == (3, 32)
        assert logits.shape == (3, 260)

    def test_prefix_shifts_hidden_layout(self):
        lm = fresh_lm()
        prefix = ad.Tensor(np.random.default_rng(1).normal(size=(4, 32)).astype(np.float32))
        hidden, logits = lm.forward(prefix, [1, 2])
        assert hidden.shape == (6, 32)
        assert logits.shape == (2, 260)

    def test_prefix_perturbation_changes_text_logits(self):
        lm = fresh_lm()
        rng = np.random.default_rng(2)
        base = rng.normal(size=(3, 32)).astype(np.float32)
        _, l1 = lm.forward(ad.Tensor(base), [5, 6])
        _, l2 = lm.forward(ad.Tensor(base + 1.0), [5, 6])
        assert not np.allclose(l1.data, l2.data)

    def test_causality_last_token_cannot_touch_earlier_logits(self):
        lm = fresh_lm()
        _, l1 = lm.forward(None, [5, 6, 7])
        _, l2 = lm.forward(None, [5, 6, 9])
        assert np.array_equal(l1.data[:2], l2.data[:2])
        assert not np.allclose(l1.data[2], l2.data[2])

    def test_prefix_gradient_matches_finite_difference(self):
        lm = fresh_lm()
        rng = np.random.default_rng(3)
        prefix = ad.Tensor(rng.normal(size=(2, 32)).astype(np.float32), requires_grad=True)

        def f():
            _, logits = lm.forward(prefix, [10, 20, 30])
            return ad.reduce(logits, "mean")

        rep = ad.finite_diff_check(f, [prefix], max_coords_per_param=24)
        assert rep.max_rel_err < 1e-3

    def test_sequence_overflow(self):
        lm = fresh_lm()
        with pytest.raises(LengthError):
            lm.forward(None, list(range(100)) * 2)


class TestNextTokenLoss:
    def test_untrained_loss_near_uniform(self):
        lm = fresh_lm()
        loss = lm_next_token_loss(lm, [60, 61, 62, 63, 64, 65, 66, 67])
        assert abs(loss.item() - math.log(260)) < 0.3

    def test_loss_nonnegative(self):
        lm = fresh_lm()
        assert lm_next_token_loss(lm, [1, 2, 3]).item() >= 0

    def test_too_short_sequence(self):
        with pytest.raises(nn.ContractError):
            lm_next_token_loss(fresh_lm(), [1])

    def test_memorizes_repeated_sequence(self):
        # training-run oracle: a single repeated line should be driven
        # below 0.1 within 500 steps at d=64
        config = LMConfig(d_model=64, n_layers=2, n_heads=4, max_seq=64)
        lm = CausalLM.build(config, nn.ParamSet(), 0)
        losses = lmmod.stub_pretrain(lm, "the quick brown fox jumps\n", steps=500, seed=0)
        assert losses[-1] < 0.1


class TestGenerate:
    def test_zero_budget(self):
        assert generate_greedy(fresh_lm(), None, [1, 2], 0) == []

    def test_deterministic(self):
        lm = fresh_lm()
        a = generate_greedy(lm, None, [1, 2, 3], 10)
        b = generate_greedy(lm, None, [1, 2, 3], 10)
        assert a == b

    def test_stops_at_stop_id(self):
        # train a tiny lm to emit a short line, then check EOS terminates it
        config = LMConfig(d_model=64, n_layers=2, n_heads=4, max_seq=64)
        lm = CausalLM.build(config, nn.ParamSet(), 0)
        lmmod.stub_pretrain(lm, "ab\n", steps=300, seed=0)
        out = generate_greedy(lm, None, [BOS], 20)
        assert len(out) <= 2 or EOS not in out

    def test_budget_overflow(self):
        with pytest.raises(LengthError):
            generate_greedy(fresh_lm(), None, [1], 100)


class TestBuildFrozen:
    def test_no_corpus_frozen_random_init(self):
        lm = build_frozen_lm(TINY, seed=1)
        assert set(lm.lm_paths()) == lm.params.frozen_paths

    def test_deterministic_parameters(self):
        lmmod._FROZEN_LM_CACHE.clear()
        a = build_frozen_lm(TINY, corpus="hello world\n", seed=2, pretrain_steps=20)
        blob_a = nn.params_serialize(a.params)
        lmmod._FROZEN_LM_CACHE.clear()
        b = build_frozen_lm(TINY, corpus="hello world\n", seed=2, pretrain_steps=20)
        assert blob_a == nn.params_serialize(b.params)

    def test_cache_returns_identical_bytes(self):
        lmmod._FROZEN_LM_CACHE.clear()
        a = build_frozen_lm(TINY, corpus="cache me\n", seed=3, pretrain_steps=10)
        b = build_frozen_lm(TINY, corpus="cache me\n", seed=3, pretrain_steps=10)
        assert nn.params_serialize(a.params) == nn.params_serialize(b.params)

    def test_frozen_paths_cover_all_lm_parameters(self):
        lm = build_frozen_lm(TINY, seed=4)
        assert all(p.startswith("lm.") for p in lm.params.frozen_paths)
        assert lm.params.trainable_paths() == []
