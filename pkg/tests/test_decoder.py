import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformable_hmr import functional as F
from deformable_hmr.config import DecoderConfig
from deformable_hmr.decoder import (
    AttentionTrace,
    Decoder,
    DeformableCrossAttention,
    OffsetNetwork,
    SelfAttention,
    extract_attention_hotspots,
    make_reference_grid,
    read_pgm,
    render_head_heatmap,
    scale_offsets,
    write_pgm,
)
from deformable_hmr.diagnostics import randomize_parameters
from deformable_hmr.errors import ConfigurationError, DimensionError, NumericError, StateError
from deformable_hmr.tensor import Tensor


def _context(rng, cfg, b=2, scale=1.0):
    return Tensor(scale * rng.standard_normal((b,) + cfg.context_shape))


class TestReferenceGrid:
    def test_two_by_two(self):
        g = make_reference_grid(2, 2)
        assert sorted(set(g[0, 0].ravel())) == [-1.0, 0.0]
        assert sorted(set(g[0, 1].ravel())) == [-1.0, 0.0]

    @pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (8, 6)])
    def test_origin(self, h, w):
        assert tuple(make_reference_grid(h, w)[0, :, 0, 0]) == (-1.0, -1.0)

    def test_h4_row2(self):
        # 2/4*2 - 1
        assert make_reference_grid(4, 3)[0, 0, 2, 0] == 0.0

    def test_batch_groups_shape(self):
        assert make_reference_grid(3, 4, 6).shape == (6, 2, 3, 4)


class TestOffsetNetwork:
    def test_zero_context_zero_output(self, rng):
        cfg = DecoderConfig(context_channels=8, num_groups=4, context_height=5, context_width=5)
        net = OffsetNetwork(cfg, rng, zero_output=True)
        assert np.all(net(Tensor(np.zeros((2,) + cfg.context_shape))).data == 0.0)

    def test_shape(self, rng):
        cfg = DecoderConfig(context_channels=8, num_groups=4, context_height=8, context_width=6)
        assert OffsetNetwork(cfg, rng)(_context(rng, cfg)).shape == (8, 2, 8, 6)

    def test_batch_permutation_equivariance(self, rng, tiny_config):
        net = OffsetNetwork(tiny_config, rng)
        ctx = rng.standard_normal((3,) + tiny_config.context_shape)
        perm = [2, 0, 1]
        g = tiny_config.num_groups
        out = net(Tensor(ctx)).data.reshape(3, g, 2, 3, 4)
        out_p = net(Tensor(ctx[perm])).data.reshape(3, g, 2, 3, 4)
        np.testing.assert_array_equal(out_p, out[perm])


class TestScaleOffsets:
    def test_zero(self):
        assert np.all(scale_offsets(np.zeros((1, 2, 3, 3)), 1.0, 3, 3).data == 0.0)

    def test_saturation(self):
        out = scale_offsets(np.full((1, 2, 1, 1), 1e3), 1.0, 16, 8).data
        assert out[0, 0, 0, 0] == np.nextafter(2.0 / 16, 0) and out[0, 1, 0, 0] == np.nextafter(2.0 / 8, 0)
        assert abs(out[0, 0, 0, 0] - 0.125) < 1e-16

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-1e6, 1e6), st.sampled_from([1.0, 2.0]), st.integers(1, 16), st.integers(1, 16))
    def test_strict_bound(self, r, lam, h, w):
        out = scale_offsets(np.full((1, 2, 1, 1), r), lam, h, w).data
        assert abs(out[0, 0, 0, 0]) < lam * 2 / h and abs(out[0, 1, 0, 0]) < lam * 2 / w

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-20, 20))
    def test_doubling(self, r):
        raw = np.full((1, 2, 1, 1), r)
        np.testing.assert_allclose(scale_offsets(raw, 2.0, 6, 4).data, 2.0 * scale_offsets(raw, 1.0, 6, 4).data, rtol=1e-15)


class TestCrossAttention:
    def test_single_key_weight_is_one(self, rng):
        cfg = DecoderConfig(model_dim=8, num_heads=2, num_groups=1, context_channels=4, context_height=1, context_width=1, num_layers=1)
        attn = DeformableCrossAttention(cfg, rng)
        randomize_parameters(attn, rng)
        tokens = Tensor(rng.standard_normal((1, 25, 8)))
        ctx = rng.standard_normal((1, 4, 1, 1))
        out = attn(tokens, Tensor(ctx)).data
        # every query receives the single value vector, through the output projection
        v = ctx.reshape(1, 4) @ attn.v_weight.data[0] + attn.v_bias.data[0]
        expected = tokens.data + (v @ attn.w_o.weight.data + attn.w_o.bias.data)
        np.testing.assert_allclose(out, expected, atol=1e-13)

    def test_positions_are_reference_plus_offsets(self, rng, tiny_config):
        attn = DeformableCrossAttention(tiny_config, rng)
        field = attn.sampling_field(_context(rng, tiny_config))
        assert np.array_equal(field.positions.data, field.offsets.data + field.reference)

    def test_query_agnostic(self, rng, tiny_config):
        attn = DeformableCrossAttention(tiny_config, rng)
        ctx = _context(rng, tiny_config)
        trace_a, trace_b = AttentionTrace(tiny_config), AttentionTrace(tiny_config)
        attn(Tensor(rng.standard_normal((2, 25, 16))), ctx, trace=trace_a)
        attn(Tensor(rng.standard_normal((2, 25, 16)) * 7.0), ctx, trace=trace_b)
        assert np.array_equal(trace_a.layers[0].positions, trace_b.layers[0].positions)

    def test_regular_variant_pins_to_grid(self, rng, tiny_config):
        attn = DeformableCrossAttention(tiny_config.replace(deformable=False), rng)
        field = attn.sampling_field(_context(rng, tiny_config, scale=10.0))
        np.testing.assert_array_equal(field.positions.data, make_reference_grid(3, 4, 4))

    def test_rows_sum_to_one(self, rng, tiny_config):
        dec = Decoder(tiny_config.replace(num_layers=2), rng)
        randomize_parameters(dec, rng)
        _, trace = dec.forward_with_trace(_context(rng, tiny_config))
        for lt in trace.layers:
            np.testing.assert_allclose(lt.weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_bad_context_shape(self, rng, tiny_config):
        attn = DeformableCrossAttention(tiny_config, rng)
        with pytest.raises(DimensionError):
            attn(Tensor(np.zeros((1, 25, 16))), Tensor(np.zeros((1, 8, 3, 3))))


class TestSelfAttention:
    def test_single_token(self, rng):
        sa = SelfAttention(8, 2, rng)
        x = rng.standard_normal((1, 1, 8))
        v = x @ sa.w_v.weight.data + sa.w_v.bias.data
        expected = x + v @ sa.w_o.weight.data + sa.w_o.bias.data
        np.testing.assert_allclose(sa(Tensor(x)).data, expected, atol=1e-14)

    def test_permutation_equivariance(self, rng):
        sa = SelfAttention(8, 2, rng)
        x = rng.standard_normal((2, 25, 8))
        perm = rng.permutation(25)
        np.testing.assert_allclose(sa(Tensor(x[:, perm])).data, sa(Tensor(x)).data[:, perm], atol=1e-13)

    def test_bad_heads(self, rng):
        with pytest.raises(ConfigurationError):
            SelfAttention(10, 3, rng)


class TestDecoder:
    def test_zero_layers_returns_queries(self, rng, tiny_config):
        dec = Decoder(tiny_config.replace(num_layers=0), rng)
        out = dec(_context(rng, tiny_config, b=3)).data
        for i in range(3):
            np.testing.assert_array_equal(out[i], dec.query_tokens.data)

    @pytest.mark.parametrize("multi_query,queries", [(True, 25), (False, 1)])
    @pytest.mark.parametrize("pe_type", ["none", "absolute", "relative"])
    def test_output_shape(self, rng, tiny_config, multi_query, queries, pe_type):
        cfg = tiny_config.replace(multi_query=multi_query, pe_type=pe_type)
        assert Decoder(cfg, rng)(_context(rng, cfg)).shape == (2, queries, 16)

    def test_nonfinite_context_reports_layer(self, rng, tiny_config):
        dec = Decoder(tiny_config, rng)
        ctx = np.zeros((1,) + tiny_config.context_shape)
        ctx[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError) as info:
            dec(Tensor(ctx))
        assert info.value.layer == 0

    def test_same_seed_same_init(self, tiny_config):
        a = Decoder(tiny_config, np.random.default_rng(9)).state_dict()
        b = Decoder(tiny_config, np.random.default_rng(9)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)


def test_config_expresses_ablation_variants():
    for deformable in (False, True):
        for multi in (False, True):
            cfg = DecoderConfig(deformable=deformable, multi_query=multi)
            assert cfg.num_queries == (25 if multi else 1)
    for heads in (8, 16):
        for lam in (1.0, 2.0):
            DecoderConfig(num_heads=heads, num_groups=heads // 2, offset_range=lam)


class TestHotspots:
    def _trace(self, rng, cfg):
        dec = Decoder(cfg, rng)
        randomize_parameters(dec, rng)
        return dec.forward_with_trace(_context(rng, cfg, b=1))[1]

    def test_threshold_zero_gives_every_position(self, rng, tiny_config):
        trace = self._trace(rng, tiny_config)
        spots = extract_attention_hotspots(trace, 0.0)
        assert len(spots) == tiny_config.num_heads * 12

    def test_above_mass_bound_is_empty(self, rng, tiny_config):
        trace = self._trace(rng, tiny_config)
        assert extract_attention_hotspots(trace, 25.0 + 1e-9) == []

    def test_single_key_mass_is_exactly_25(self, rng):
        cfg = DecoderConfig(model_dim=8, num_heads=2, num_groups=1, context_channels=4, context_height=1, context_width=1, num_layers=1)
        spots = extract_attention_hotspots(self._trace(rng, cfg), 0.25)
        assert [s.weight for s in spots] == [25.0, 25.0]
        assert {s.head for s in spots} == {0, 1}

    def test_sorted_descending(self, rng, tiny_config):
        w = [s.weight for s in extract_attention_hotspots(self._trace(rng, tiny_config), 0.1)]
        assert w == sorted(w, reverse=True)

    def test_empty_trace(self, tiny_config):
        with pytest.raises(StateError):
            extract_attention_hotspots(AttentionTrace(tiny_config), 0.25)

    def test_records_cover_every_point(self, rng, tiny_config):
        trace = self._trace(rng, tiny_config)
        assert len(trace.to_records()) == tiny_config.num_heads * 12


def test_pgm_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (5, 7)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img, atol=1e-12)


def test_heatmap_normalized(rng, tiny_config):
    dec = Decoder(tiny_config, rng)
    _, trace = dec.forward_with_trace(_context(rng, tiny_config, b=1))
    img = render_head_heatmap(trace, 0, 0, scale=4)
    assert img.shape == (12, 16) and img.max() == 1.0 and img.min() >= 0.0
