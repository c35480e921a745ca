import numpy as np
import pytest

from rstcanet import autograd as ag
from rstcanet.autograd import Tape, Tensor
from rstcanet.gradcheck import check_gradients, finite_diff_grad_at, max_rel_error
from rstcanet.layers import cast_params, collect_params
from rstcanet.model import (
    ChannelAttention,
    ModelConfig,
    Rstcab,
    RstcaNet,
    build_variant,
    channel_attention_apply,
    config_from_dict,
    config_to_dict,
    param_count,
    variant_config,
    zero_deep_parameters,
)

F64 = np.float64

TINY = ModelConfig(channels=16, num_blocks=1, heads=2, layers_per_block=2,
                   window=4, reduction=4)


def rand_t(rng, shape, lo=-1.0, hi=1.0, dtype=np.float32, requires_grad=False):
    return Tensor(rng.uniform(lo, hi, shape).astype(dtype), requires_grad=requires_grad)


class TestModelConfig:
    def test_variants_match_published_table(self):
        b = variant_config("B")
        assert (b.channels, b.num_blocks, b.heads, b.layers_per_block) == (72, 2, 6, 6)
        s = variant_config("S")
        assert (s.channels, s.num_blocks, s.heads, s.layers_per_block) == (96, 4, 6, 6)
        l = variant_config("L")
        assert (l.channels, l.num_blocks, l.heads, l.layers_per_block) == (128, 4, 8, 8)
        assert b.window == s.window == l.window == 8

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            variant_config("XL")

    def test_odd_layers_with_per_pair_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ModelConfig(layers_per_block=5, ca_mode="per_pair").validate()

    def test_bad_ca_mode(self):
        with pytest.raises(ValueError, match="ca_mode"):
            ModelConfig(ca_mode="dual").validate()

    def test_roundtrip_through_dict(self):
        cfg = variant_config("S")
        back = config_from_dict({k: str(v) for k, v in config_to_dict(cfg).items()})
        assert back == cfg


class TestChannelAttention:
    def test_zero_weights_half_scale(self):
        rng = np.random.default_rng(0)
        ca = ChannelAttention(rng, 8, 4)
        for t in collect_params(ca).values():
            t.data[...] = 0.0
        x = rand_t(rng, (2, 8, 4, 4), lo=0, hi=1)
        out = channel_attention_apply(ca, x, x)
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-6)

    def test_shape_contract_under_stats_scaling(self):
        rng = np.random.default_rng(1)
        ca = ChannelAttention(rng, 8, 4)
        ca.down.bias.data[...] = 0.0
        ca.up.bias.data[...] = 0.0
        # keep the bottleneck active so the gates actually move
        ca.down.weight.data = np.abs(ca.down.weight.data)
        x = rand_t(rng, (2, 8, 4, 4), lo=0.2, hi=1)
        tgt = rand_t(rng, (2, 8, 4, 4))
        out1 = channel_attention_apply(ca, x, tgt)
        out2 = channel_attention_apply(ca, ag.scale(x, 3.0), tgt)
        assert out1.shape == out2.shape == (2, 8, 4, 4)
        assert not np.allclose(out1.data, out2.data)

    def test_hand_computed_scalar_case(self):
        # 1 channel, r=1: gap=2, w_down=1, w_up=1, no bias
        rng = np.random.default_rng(2)
        ca = ChannelAttention(rng, 1, 1)
        ca.down.weight.data[...] = 1.0
        ca.up.weight.data[...] = 1.0
        ca.down.bias.data[...] = 0.0
        ca.up.bias.data[...] = 0.0
        src = Tensor(np.full((1, 1, 2, 2), 2.0, dtype=np.float32))
        tgt = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        out = channel_attention_apply(ca, src, tgt)
        np.testing.assert_allclose(out.data, 0.8807970779778823, rtol=1e-6)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(3)
        ca = ChannelAttention(rng, 8, 4)
        with pytest.raises(ValueError, match="channel mismatch"):
            channel_attention_apply(ca, Tensor(np.zeros((1, 8, 2, 2))), Tensor(np.zeros((1, 4, 2, 2))))

    def test_gate_in_unit_interval(self):
        rng = np.random.default_rng(4)
        ca = ChannelAttention(rng, 16, 4)
        g = ca.gate(rand_t(rng, (5, 16), lo=-3, hi=3)).data
        assert np.all(g > 0) and np.all(g < 1)


class TestRstcab:
    def _block(self, seed=0, **overrides):
        cfg = ModelConfig(**{**config_to_dict(TINY), **overrides}).validate()
        return Rstcab(np.random.default_rng(seed), cfg), cfg

    def test_zero_params_identity(self):
        block, _ = self._block()
        for t in collect_params(block).values():
            t.data[...] = 0.0
        rng = np.random.default_rng(5)
        x = rand_t(rng, (2, 64, 16))
        out = block(x, (8, 8))
        np.testing.assert_array_equal(out.data, x.data)

    def test_odd_layers_per_pair_rejected(self):
        with pytest.raises(ValueError, match="even"):
            self._block(layers_per_block=3)

    def test_ca_zero_scales_body_by_half(self):
        # with CA weights zero and no conv, the per-pair gate is exactly 0.5,
        # so the block residual is half of the ungated one
        block, _ = self._block(conv_in_block=0)
        none_block, _ = self._block(conv_in_block=0, ca_mode="none")
        # copy shared STL weights; zero the CA
        pp = collect_params(block)
        nn_ = collect_params(none_block)
        for name, t in nn_.items():
            t.data[...] = pp[name].data
        for t in collect_params(block.ca).values():
            t.data[...] = 0.0
        rng = np.random.default_rng(6)
        x = rand_t(rng, (1, 64, 16))
        out_pp = block(x, (8, 8))
        out_none = none_block(x, (8, 8))
        np.testing.assert_allclose(out_pp.data - x.data, 0.5 * (out_none.data - x.data),
                                   rtol=1e-4, atol=1e-6)

    def test_per_pair_single_shared_ca(self):
        block, cfg = self._block(layers_per_block=4)
        ca_tensors = {id(t) for t in collect_params(block.ca).values()}
        all_named = collect_params(block)
        ca_named = [n for n, t in all_named.items() if id(t) in ca_tensors]
        assert len(ca_named) == 4  # down.w, down.b, up.w, up.b — one set only
        # N/2 applications share it: perturbing the gate changes every pair
        rng = np.random.default_rng(7)
        x = rand_t(rng, (1, 64, 16))
        base = block(x, (8, 8)).data.copy()
        block.ca.up.bias.data[...] += 1.0
        bumped = block(x, (8, 8)).data
        assert not np.allclose(base, bumped)

    def test_short_skip_changes_output(self):
        b0, _ = self._block(short_skip=False)
        b1, _ = self._block(short_skip=True)
        for name, t in collect_params(b1).items():
            t.data[...] = collect_params(b0)[name].data
        rng = np.random.default_rng(8)
        x = rand_t(rng, (1, 64, 16))
        assert not np.allclose(b0(x, (8, 8)).data, b1(x, (8, 8)).data)

    @pytest.mark.parametrize("mode", ["none", "single", "per_pair", "per_layer"])
    def test_modes_run_and_preserve_shape(self, mode):
        block, _ = self._block(ca_mode=mode)
        rng = np.random.default_rng(9)
        x = rand_t(rng, (2, 64, 16))
        out = block(x, (8, 8))
        assert out.shape == x.shape
        assert np.all(np.isfinite(out.data))

    def test_gradcheck_tiny_block(self):
        cfg = ModelConfig(channels=8, num_blocks=1, heads=2, layers_per_block=2,
                          window=2, reduction=4).validate()
        block = Rstcab(np.random.default_rng(10), cfg)
        cast_params(block, F64)
        rng = np.random.default_rng(11)
        x = rand_t(rng, (1, 16, 8), dtype=F64, requires_grad=True)
        w = rng.uniform(-1, 1, (1, 16, 8))
        params = list(collect_params(block).values())

        def f():
            return ag.sum_(ag.mul(block(x, (4, 4)), Tensor(w)))

        err = check_gradients(f, [x] + params, h=1e-3)
        assert err < 1e-3, err


class TestShallowAndReconstruct:
    def test_constant_mosaic_linear_embed(self):
        net = RstcaNet(TINY, seed=0)
        c = 0.37
        net.embed.bias.data[...] = 0.0
        mosaic = Tensor(np.full((1, 1, 8, 8), c, dtype=np.float32))
        tokens, hw = net.shallow_extract(mosaic)
        assert hw == (4, 4)
        expect = c * net.embed.weight.data.sum(axis=0)
        np.testing.assert_allclose(tokens.data, np.broadcast_to(expect, (1, 16, 16)), rtol=1e-5)

    def test_token_count(self):
        net = RstcaNet(TINY, seed=0)
        tokens, _ = net.shallow_extract(Tensor(np.zeros((2, 1, 12, 16), dtype=np.float32)))
        assert tokens.shape[1] == 12 * 16 // 4

    def test_rggb_unshuffle_order(self):
        net = RstcaNet(TINY, seed=0)
        # identity embed so the pre-embed packing is visible
        net.embed.weight.data[...] = 0.0
        net.embed.weight.data[:4, :4] = np.eye(4)
        net.embed.bias.data[...] = 0.0
        mosaic = Tensor(np.array([[0.1, 0.2], [0.3, 0.4]], dtype=np.float32).reshape(1, 1, 2, 2))
        tokens, _ = net.shallow_extract(mosaic)
        np.testing.assert_allclose(tokens.data[0, 0, :4], [0.1, 0.2, 0.3, 0.4], rtol=1e-6)

    def test_odd_dims_rejected(self):
        net = RstcaNet(TINY, seed=0)
        with pytest.raises(ValueError, match="even"):
            net.shallow_extract(Tensor(np.zeros((1, 1, 7, 8), dtype=np.float32)))

    def test_reconstruct_zero_weights_zero_image(self):
        net = RstcaNet(TINY, seed=0)
        for conv in (net.recon_up, net.recon_conv1, net.recon_conv2):
            conv.weight.data[...] = 0.0
            conv.bias.data[...] = 0.0
        out = net.reconstruct(Tensor(np.ones((1, 16, 4, 4), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 8, 8)))

    def test_reconstruct_doubles_spatial(self):
        net = RstcaNet(TINY, seed=0)
        out = net.reconstruct(Tensor(np.zeros((2, 16, 5, 7), dtype=np.float32)))
        assert out.shape == (2, 3, 10, 14)

    def test_gradient_reaches_recon_up(self):
        net = RstcaNet(TINY, seed=0)
        rng = np.random.default_rng(12)
        mosaic = rand_t(rng, (1, 1, 8, 8), lo=0, hi=1)
        with Tape() as tape:
            out = net(mosaic)
            tape.backward(ag.sum_(out))
        assert net.recon_up.weight.grad is not None
        assert np.abs(net.recon_up.weight.grad).max() > 0


class TestForward:
    def test_zero_deep_reduces_to_shallow_plus_recon(self):
        net = RstcaNet(TINY, seed=0)
        zero_deep_parameters(net)
        rng = np.random.default_rng(13)
        mosaic = rand_t(rng, (1, 1, 16, 16), lo=0, hi=1)
        out = net(mosaic)
        tokens, (hm, wm) = net.shallow_extract(mosaic)
        from rstcanet.model import tokens_to_nchw
        expect = net.reconstruct(tokens_to_nchw(tokens, hm, wm))
        np.testing.assert_array_equal(out.data, expect.data)

    def test_finite_after_random_init(self):
        net = RstcaNet(TINY, seed=3)
        rng = np.random.default_rng(14)
        out = net(rand_t(rng, (2, 1, 16, 16), lo=0, hi=1))
        assert np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("hw", [(8, 8), (16, 24), (8, 40)])
    def test_shape_contract(self, hw):
        net = RstcaNet(TINY, seed=0)
        h, w = hw
        out = net(Tensor(np.zeros((1, 1, h, w), dtype=np.float32)))
        assert out.shape == (1, 3, h, w)

    def test_too_small_input_rejected(self):
        net = RstcaNet(TINY, seed=0)
        with pytest.raises(ValueError, match="window"):
            net(Tensor(np.zeros((1, 1, 6, 6), dtype=np.float32)))

    def test_nondivisible_padding_path(self):
        # 20x28 -> 10x14 token grid, window 4 -> padded to 12x16 and cropped back
        net = RstcaNet(TINY, seed=1)
        rng = np.random.default_rng(15)
        out = net(rand_t(rng, (1, 1, 20, 28), lo=0, hi=1))
        assert out.shape == (1, 3, 20, 28)
        assert np.all(np.isfinite(out.data))

    def test_full_network_gradcheck(self):
        cfg = ModelConfig(channels=8, num_blocks=1, heads=2, layers_per_block=2,
                          window=2, reduction=4).validate()
        net = RstcaNet(cfg, seed=4)
        cast_params(net, F64)
        rng = np.random.default_rng(16)
        mosaic = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)).astype(F64), requires_grad=True)
        w = rng.uniform(-1, 1, (1, 3, 8, 8))

        def f():
            return ag.sum_(ag.mul(net(mosaic), Tensor(w)))

        # full FD over the mosaic input at the pinned step size
        err = check_gradients(f, [mosaic], h=1e-3)
        assert err < 1e-3, f"input gradient err {err}"
        # spot-check entries of every parameter; bias directions shift whole
        # token maps coherently, so h=1e-3 truncation (O(h^2), verified to
        # scale as such) exceeds 1e-3 there — probe at h=1e-4 instead
        params = net.named_parameters()
        with Tape() as tape:
            tape.backward(f())
        rng_pick = np.random.default_rng(0)
        worst = 0.0
        for name, t in params.items():
            flat = t.grad.reshape(-1)
            n_pick = min(4, t.size)
            picks = rng_pick.choice(t.size, size=n_pick, replace=False)
            fd = finite_diff_grad_at(f, t, picks, h=1e-4)
            for i, v in fd.items():
                worst = max(worst, max_rel_error(np.array([flat[i]]), np.array([v])))
        assert worst < 1e-3, f"parameter gradient err {worst}"


class TestParamCounts:
    def test_published_sizes_decimal_mb(self):
        for name, mb in [("B", 5.5), ("S", 16.0), ("L", 32.6)]:
            net = build_variant(name)
            size = 4 * param_count(net) / 1e6
            assert abs(size / mb - 1) < 0.10, f"{name}: {size:.2f} vs {mb}"

    def test_monotone_sizes(self):
        nb = param_count(build_variant("B"))
        ns = param_count(build_variant("S"))
        nl = param_count(build_variant("L"))
        assert nb < ns < nl

    def test_ca_delta_exact(self):
        cfg = variant_config("B")
        n_pp = param_count(RstcaNet(cfg, seed=0))
        cfg_none = config_from_dict({**config_to_dict(cfg), "ca_mode": "none"})
        n_none = param_count(RstcaNet(cfg_none, seed=0))
        c, r, k = cfg.channels, cfg.reduction, cfg.num_blocks
        hidden = c // r
        assert n_pp - n_none == k * (2 * c * hidden + c + hidden)

    def test_shared_ca_counted_once(self):
        net = RstcaNet(TINY, seed=0)
        names = [n for n in net.named_parameters() if ".ca." in n]
        assert len(names) == 4 * TINY.num_blocks

    def test_deterministic_construction(self):
        a = RstcaNet(TINY, seed=9).named_parameters()
        b = RstcaNet(TINY, seed=9).named_parameters()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_seed_changes_weights(self):
        a = RstcaNet(TINY, seed=1).named_parameters()
        b = RstcaNet(TINY, seed=2).named_parameters()
        assert any(not np.array_equal(a[n].data, b[n].data) for n in a)
