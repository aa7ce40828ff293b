import math

import numpy as np
import pytest
import torch

from skeldiff.schedule import make_linear_schedule
from skeldiff.unet import (
    NetworkConfig,
    SkeletalDenoiser,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    time_embedding,
)


def tiny_config(**overrides):
    kw = dict(base_channels=8, channel_mult=[1, 2], res_blocks_per_level=1,
              dropout=0.0, attention_resolution=8, attention_heads=1,
              in_channels=2, out_channels=1, image_size=16)
    kw.update(overrides)
    return NetworkConfig(**kw)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return SkeletalDenoiser(tiny_config(), make_linear_schedule(10))


class TestTimeEmbedding:
    def test_t_zero(self):
        emb = time_embedding(0, 16)[0]
        np.testing.assert_allclose(emb[:8], 0.0, atol=0)
        np.testing.assert_allclose(emb[8:], 1.0, atol=0)

    def test_norm_at_zero(self):
        emb = time_embedding(0, 32)[0]
        assert float(torch.linalg.norm(emb)) == pytest.approx(math.sqrt(16), abs=1e-12)

    def test_injective_over_thousand_steps(self):
        embs = time_embedding(torch.arange(1000), 32).numpy()
        for i in range(0, 1000, 100):
            gaps = np.abs(embs - embs[i]).max(axis=1)
            gaps[i] = np.inf
            assert gaps.min() > 1e-6
        # full pairwise check on the coarsest (slowest) frequency pair
        diffs = np.abs(embs[:, None, [0, 16]] - embs[None, :, [0, 16]]).max(axis=2)
        diffs[np.arange(1000), np.arange(1000)] = np.inf
        assert diffs.min() > 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            time_embedding(3, 15)


class TestConfigValidation:
    def test_attention_resolution_must_be_reachable(self):
        with pytest.raises(ValueError, match="attention_resolution"):
            tiny_config(attention_resolution=5)

    def test_dropout_bounds(self):
        with pytest.raises(ValueError, match="dropout"):
            tiny_config(dropout=1.0)

    def test_empty_channel_mult(self):
        with pytest.raises(ValueError, match="channel_mult"):
            tiny_config(channel_mult=[])

    def test_indivisible_image_size(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(channel_mult=[1, 2, 3], image_size=18, attention_resolution=9)


class TestForward:
    def test_eval_mode_deterministic(self):
        torch.manual_seed(0)
        model = SkeletalDenoiser(tiny_config(dropout=0.5), make_linear_schedule(10))
        model.eval()
        d = torch.randn(1, 1, 16, 16)
        c = torch.rand(1, 1, 16, 16)
        with torch.no_grad():
            a = model(d, c, 3)
            b = model(d, c, 3)
        assert torch.equal(a.eps_hat, b.eps_hat)
        assert torch.equal(a.attention, b.attention)

    def test_dropout_varies_in_train_mode(self):
        torch.manual_seed(0)
        model = SkeletalDenoiser(tiny_config(dropout=0.5), make_linear_schedule(10))
        model.train()
        d = torch.randn(1, 1, 16, 16)
        c = torch.rand(1, 1, 16, 16)
        torch.manual_seed(1)
        a = model(d, c, 3).eps_hat
        torch.manual_seed(2)
        b = model(d, c, 3).eps_hat
        assert not torch.equal(a, b)

    def test_feature_resolutions_halve_per_level(self):
        torch.manual_seed(0)
        cfg = NetworkConfig(base_channels=8, channel_mult=[1, 2, 3, 4],
                            res_blocks_per_level=1, dropout=0.0,
                            attention_resolution=8, in_channels=2,
                            out_channels=1, image_size=64)
        model = SkeletalDenoiser(cfg, make_linear_schedule(10))
        out = model(torch.randn(1, 1, 64, 64), torch.rand(1, 1, 64, 64), 0)
        assert [f.shape[-1] for f in out.features] == [64, 32, 16, 8]
        assert len(out.features) == len(cfg.channel_mult)

    def test_eps_shape_matches_input(self, tiny_model):
        d = torch.randn(3, 1, 16, 16)
        out = tiny_model(d, torch.rand(3, 1, 16, 16), torch.tensor([0, 5, 9]))
        assert out.eps_hat.shape == d.shape
        assert out.sigma.shape == d.shape

    def test_spatial_mismatch_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="spatial"):
            tiny_model(torch.randn(1, 1, 16, 16), torch.rand(1, 1, 8, 8), 0)

    def test_indivisible_input_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="divisible"):
            tiny_model(torch.randn(1, 1, 15, 15), torch.rand(1, 1, 15, 15), 0)

    def test_attention_map_in_unit_range(self, tiny_model):
        out = tiny_model(torch.randn(2, 1, 16, 16), torch.rand(2, 1, 16, 16), 1)
        assert out.attention.shape == (2, 8, 8)
        assert out.attention.min() >= 0.0
        assert out.attention.max() <= 1.0

    def test_attention_rows_sum_to_one(self, tiny_model):
        tiny_model(torch.randn(1, 1, 16, 16), torch.rand(1, 1, 16, 16), 1)
        for attn in tiny_model._attention_modules():
            if attn.last_weights is not None:
                rows = attn.last_weights.sum(dim=-1)
                assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)

    def test_fixed_posterior_sigma(self, tiny_model):
        sched = tiny_model.schedule
        out = tiny_model(torch.randn(1, 1, 16, 16), torch.rand(1, 1, 16, 16), 4)
        expected = sched.posterior_variance[4]
        assert torch.allclose(out.sigma, torch.full_like(out.sigma, expected), atol=1e-6)

    def test_learned_range_sigma_between_bounds(self):
        torch.manual_seed(0)
        sched = make_linear_schedule(10)
        model = SkeletalDenoiser(tiny_config(variance_mode="learned_range"), sched)
        out = model(torch.randn(1, 1, 16, 16), torch.rand(1, 1, 16, 16), 4)
        lo = min(sched.posterior_variance[4], sched.beta[4])
        hi = max(sched.posterior_variance[4], sched.beta[4])
        assert out.sigma.min() >= lo - 1e-9
        assert out.sigma.max() <= hi + 1e-9


def _oracle_count(base, mult, blocks, attn_res, image_size, in_ch, out_ch):
    """Layer-by-layer parameter inventory, independent of the module tree."""
    conv = lambda ci, co, k: ci * co * k * k + co
    lin = lambda ci, co: ci * co + co
    gn = lambda c: 2 * c
    res = lambda ci, co, tdim: (gn(ci) + conv(ci, co, 3) + lin(tdim, co)
                                + gn(co) + conv(co, co, 3)
                                + (conv(ci, co, 1) if ci != co else 0))
    attn = lambda c: gn(c) + conv(c, 3 * c, 1) + conv(c, c, 1)

    tdim = base * 4
    chans = [base * m for m in mult]
    levels = len(mult)
    total = lin(base, tdim) + lin(tdim, tdim)  # time MLP
    total += conv(in_ch, chans[0], 3)
    ch = chans[0]
    for i in range(levels):
        for _ in range(blocks):
            total += res(ch, chans[i], tdim)
            ch = chans[i]
        if image_size // 2**i == attn_res:
            total += attn(ch)
        if i < levels - 1:
            total += conv(ch, ch, 3)  # downsample
    total += res(ch, ch, tdim)
    if image_size // 2 ** (levels - 1) == attn_res:
        total += attn(ch)
    total += res(ch, ch, tdim)
    for i in reversed(range(levels)):
        cin = ch + chans[i]
        for _ in range(blocks):
            total += res(cin, chans[i], tdim)
            cin = chans[i]
        ch = chans[i]
        if image_size // 2**i == attn_res:
            total += attn(ch)
        if i > 0:
            total += conv(ch, ch, 3)  # upsample
    total += gn(ch) + conv(ch, out_ch, 3)
    return total


class TestCountParameters:
    def test_matches_hand_inventory(self):
        cfg = tiny_config()
        assert count_parameters(cfg) == _oracle_count(8, [1, 2], 1, 8, 16, 2, 1)

    def test_matches_hand_inventory_deeper(self):
        cfg = NetworkConfig(base_channels=16, channel_mult=[1, 2, 3],
                            res_blocks_per_level=2, dropout=0.1,
                            attention_resolution=16, in_channels=2,
                            out_channels=1, image_size=32)
        assert count_parameters(cfg) == _oracle_count(16, [1, 2, 3], 2, 16, 32, 2, 1)

    def test_doubling_base_roughly_quadruples(self):
        small = count_parameters(tiny_config(base_channels=16))
        big = count_parameters(tiny_config(base_channels=32))
        assert 3.3 < big / small < 4.3

    def test_paper_profile_count_is_reported(self, capsys):
        cfg = NetworkConfig(image_size=512)  # paper defaults otherwise
        n = count_parameters(cfg)
        print(f"paper-profile parameter count: {n:,} (reported value: 37,539,809)")
        assert n > 10_000_000


class TestCheckpoint:
    def test_round_trip(self, tiny_model, tmp_path):
        save_checkpoint(tmp_path / "ck", tiny_model, step=7, metrics={"ssim": 0.5})
        loaded, manifest = load_checkpoint(tmp_path / "ck", tiny_model.schedule)
        assert manifest["step"] == 7
        assert manifest["metrics"]["ssim"] == 0.5
        for (ka, va), (kb, vb) in zip(tiny_model.state_dict().items(),
                                      loaded.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_missing_entry_fails(self, tiny_model, tmp_path):
        save_checkpoint(tmp_path / "ck", tiny_model, step=1)
        victim = next((tmp_path / "ck" / "params").glob("*.npy"))
        victim.unlink()
        with pytest.raises(ValueError, match="missing"):
            load_checkpoint(tmp_path / "ck")

    def test_extra_entry_fails(self, tiny_model, tmp_path):
        save_checkpoint(tmp_path / "ck", tiny_model, step=1)
        np.save(tmp_path / "ck" / "params" / "bogus.npy", np.zeros(3))
        with pytest.raises(ValueError, match="extra"):
            load_checkpoint(tmp_path / "ck")

    def test_misshaped_entry_fails(self, tiny_model, tmp_path):
        save_checkpoint(tmp_path / "ck", tiny_model, step=1)
        victim = next((tmp_path / "ck" / "params").glob("*weight.npy"))
        np.save(victim, np.zeros((2, 2)))
        with pytest.raises(ValueError, match="shape mismatch"):
            load_checkpoint(tmp_path / "ck")

    def test_missing_manifest_fails(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope")
