"""Payload validation, the two front-end families, and the shared-width
encoder contract."""

import numpy as np
import pytest

from sensorlm import autodiff as ad
from sensorlm import nn
from sensorlm.data import gen_task_data
from sensorlm.encoders import (EncoderConfig, DataError, GridPayload, ModalityKind,
                               PAYLOAD_SCHEMA, SeqPayload, encode_modality,
                               encode_sample, init_encoder_params, patchify_grid,
                               window_sequence)

CFG = EncoderConfig(d=16)


def make_params(cfg=CFG, seed=0):
    ps = nn.ParamSet()
    init_encoder_params(cfg, ps, np.random.default_rng(seed))
    return ps


class TestPayloads:
    def test_grid_length_checked(self):
        with pytest.raises(DataError):
            GridPayload(2, 2, 1, [1, 2, 3])

    def test_grid_rejects_non_finite(self):
        with pytest.raises(DataError):
            GridPayload(1, 2, 1, [np.nan, 1.0])

    def test_seq_needs_a_step(self):
        with pytest.raises(DataError):
            SeqPayload(0, 2, 10.0, [])

    def test_every_kind_has_schema_and_family(self):
        for kind in ModalityKind:
            schema = PAYLOAD_SCHEMA[kind]
            assert schema.family in ("grid", "seq")


class TestPatchify:
    def test_single_patch(self):
        p = GridPayload(4, 4, 1, np.arange(16, dtype=np.float32))
        out = patchify_grid(p, 4)
        assert out.shape == (1, 16)
        assert np.array_equal(out.data[0], np.arange(16))

    def test_patch_order_matches_index_oracle(self):
        vals = np.arange(16, dtype=np.float32)
        p = GridPayload(4, 4, 1, vals)
        out = patchify_grid(p, 2).data
        grid = vals.reshape(4, 4)
        # index-arithmetic oracle: row-major patches, each row-major inside
        expect = []
        for bi in range(2):
            for bj in range(2):
                expect.append(grid[2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2].reshape(-1))
        assert np.array_equal(out, np.stack(expect))

    def test_padding_to_patch_multiple(self):
        p = GridPayload(3, 3, 1, np.ones(9, dtype=np.float32))
        out = patchify_grid(p, 2).data
        assert out.shape == (4, 4)
        assert out.sum() == 9.0  # pad values are zero


class TestWindowing:
    def test_exact_single_window(self):
        p = SeqPayload(4, 1, 10.0, [1, 2, 3, 4])
        out = window_sequence(p, 4, 4)
        assert out.shape == (1, 4)

    def test_partial_window_zero_padded(self):
        p = SeqPayload(5, 1, 10.0, [1, 2, 3, 4, 5])
        out = window_sequence(p, 2, 2).data
        assert out.shape == (3, 2)
        assert out[2].tolist() == [5, 0]

    def test_stride_equals_window_partitions(self):
        p = SeqPayload(8, 2, 10.0, np.arange(16, dtype=np.float32))
        out = window_sequence(p, 4, 4).data
        assert out.shape == (2, 8)
        assert np.array_equal(out.reshape(-1), np.arange(16))


class TestEncodeModality:
    def test_zero_payload_zero_projection_gives_type_embedding(self):
        ps = make_params()
        ps["encoder.image.proj_w"].data[...] = 0.0
        ps["encoder.image.type_emb"].data[...] = 1.5
        payload = GridPayload(16, 16, 1, np.zeros(256, dtype=np.float32))
        out = encode_modality(ModalityKind.IMAGE, payload, CFG, ps)
        assert np.allclose(out.data, 1.5)

    def test_imu_window_count_before_cap(self):
        # 128 steps, window 16, stride 16 -> 8 windows
        p = SeqPayload(128, 9, 50.0, np.zeros(128 * 9, dtype=np.float32))
        assert window_sequence(p, 16, 16).shape[0] == 8

    def test_output_width_is_d_for_every_kind(self):
        ps = make_params()
        sample = {}
        for kind in ModalityKind:
            schema = PAYLOAD_SCHEMA[kind]
            if schema.family == "grid":
                h, w, c = schema.dims
                payload = GridPayload(h, w, c, np.zeros(h * w * c, dtype=np.float32))
            else:
                t, c = schema.dims
                payload = SeqPayload(t, c, schema.sample_rate_hz,
                                     np.zeros(t * c, dtype=np.float32))
            out = encode_modality(kind, payload, CFG, ps)
            assert out.shape == (CFG.cap, CFG.d)

    def test_gradient_through_encoder(self):
        ps = make_params()
        payload = GridPayload(16, 16, 1,
                              np.random.default_rng(1).normal(size=256).astype(np.float32))
        w = ps["encoder.image.proj_w"]
        b = ps["encoder.image.proj_b"]
        emb = ps["encoder.image.type_emb"]
        mix = ad.Tensor(np.random.default_rng(2).normal(size=(CFG.cap, CFG.d)).astype(np.float32))

        def f():
            out = encode_modality(ModalityKind.IMAGE, payload, CFG, ps)
            return ad.reduce(ad.mul(out, mix), "sum")

        rep = ad.finite_diff_check(f, [w, b, emb], max_coords_per_param=24)
        assert rep.max_rel_err < 1e-3


class TestEncodeSample:
    def test_single_modality_singleton(self):
        ps = make_params()
        s = gen_task_data("gesture", 1, seed=0)[0]
        only = {ModalityKind.IMU: s.payloads[ModalityKind.IMU]}
        s.payloads = only
        out = encode_sample(s, CFG, ps)
        assert [k for k, _ in out] == [ModalityKind.IMU]

    def test_canonical_order_and_independence(self):
        ps = make_params()
        s = gen_task_data("gaze", 1, seed=0)[0]
        out_full = encode_sample(s, CFG, ps)
        kinds = [k for k, _ in out_full]
        assert kinds == sorted(kinds, key=lambda k: k.value)
        # dropping a modality leaves remaining blocks bitwise unchanged
        reduced = dict(s.payloads)
        del reduced[ModalityKind.DEPTH]
        s.payloads = reduced
        out_reduced = dict((k, t) for k, t in encode_sample(s, CFG, ps))
        for kind, block in out_full:
            if kind in out_reduced:
                assert block.data.tobytes() == out_reduced[kind].data.tobytes()

    def test_unknown_family_mismatch_rejected(self):
        ps = make_params()
        bad = SeqPayload(4, 1, 10.0, [1, 2, 3, 4])
        with pytest.raises(Exception):
            encode_modality(ModalityKind.IMAGE, bad, CFG, ps)
