import numpy as np
import pytest
import torch

from echosdm.labelmaps import encode_onehot
from echosdm.sdm_net import (DenoiserConfig, LabelResize, SpatialAdaptiveNorm, build_denoiser,
                             denoise, timestep_embedding)

from stubs import n_params

SMALL = dict(resolution=(8, 8), base_channels=8, channel_multipliers=[1, 2], time_embed_dim=16,
             cond_hidden=4, norm_groups=4)


def test_parameter_count_hand_tally():
    # time mlp 144 + 272, in conv 80,
    # down: res(8->8) 1336 + pool 584, res(8->16) 3952,
    # mid: 2 x cond res(16->16) 7648,
    # up: cond res(32->16) 11664 + upsample conv 2320, cond res(24->8) 5392,
    # out norm 16 + out conv 146
    model = build_denoiser(DenoiserConfig(**SMALL), seed=0)
    assert n_params(model) == 41202


def test_output_shapes_and_variance_range():
    cfg = DenoiserConfig(**SMALL)
    model = build_denoiser(cfg, seed=0)
    y = torch.randn(3, 1, 8, 8)
    lm = torch.randint(0, 5, (3, 8, 8))
    out = denoise(model, y, torch.tensor([1, 5, 9]), encode_onehot(lm, 5), T=10)
    assert out.eps_hat.shape == (3, 1, 8, 8)
    assert out.v.shape == (3, 1, 8, 8)
    assert float(out.v.min().detach()) > 0 and float(out.v.max().detach()) < 1


def test_condition_changes_output():
    model = build_denoiser(DenoiserConfig(**SMALL), seed=1)
    y = torch.randn(1, 1, 8, 8)
    a = encode_onehot(torch.zeros(1, 8, 8, dtype=torch.long), 5)
    b = encode_onehot(torch.full((1, 8, 8), 3), 5)
    assert not torch.allclose(denoise(model, y, 4, a).eps_hat, denoise(model, y, 4, b).eps_hat)
    # None is the all-zeros null condition
    zero = torch.zeros(1, 5, 8, 8)
    assert torch.equal(denoise(model, y, 4, None).eps_hat, denoise(model, y, 4, zero).eps_hat)


def test_same_seed_same_weights():
    a = build_denoiser(DenoiserConfig(**SMALL), seed=5)
    b = build_denoiser(DenoiserConfig(**SMALL), seed=5)
    for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(v, w), k
    with pytest.raises(ValueError):
        build_denoiser(DenoiserConfig(**SMALL), seed=None)


def test_label_resize_is_nearest_and_hookable():
    model = build_denoiser(DenoiserConfig(**SMALL), seed=0)
    seen = []
    for m in model.modules():
        if isinstance(m, LabelResize):
            m.register_forward_hook(lambda mod, args, out: seen.append(out))
    lm = torch.randint(0, 5, (1, 8, 8))
    denoise(model, torch.randn(1, 1, 8, 8), 3, encode_onehot(lm, 5))
    assert seen
    for out in seen:
        # nearest resampling of a one-hot map is still one-hot
        assert torch.equal(out.sum(1), torch.ones_like(out.sum(1)))
        assert set(out.unique().tolist()) <= {0.0, 1.0}
    half = LabelResize()(encode_onehot(lm, 5).float(), (4, 4))
    assert torch.equal(half, encode_onehot(lm, 5).float()[:, :, ::2, ::2])


def test_spatial_norm_is_identity_transform_when_modulation_zero():
    norm = SpatialAdaptiveNorm(8, 5, 4, 4)
    with torch.no_grad():
        norm.gamma_beta.weight.zero_()
        norm.gamma_beta.bias.zero_()
    h = torch.randn(2, 8, 6, 6)
    seg = encode_onehot(torch.randint(0, 5, (2, 6, 6)), 5).float()
    ref = torch.nn.functional.group_norm(h, 4)
    assert torch.allclose(norm(h, seg), ref, atol=1e-6)


def test_attention_resolution_builds():
    cfg = DenoiserConfig(**{**SMALL, "attention_resolutions": [4]})
    model = build_denoiser(cfg, seed=0)
    out = denoise(model, torch.randn(2, 1, 8, 8), 2)
    assert out.eps_hat.shape == (2, 1, 8, 8)
    assert n_params(model) > 41202


def test_gradients_reach_every_parameter():
    model = build_denoiser(DenoiserConfig(**SMALL), seed=0)
    lm = torch.randint(0, 5, (2, 8, 8))
    out = denoise(model, torch.randn(2, 1, 8, 8), torch.tensor([2, 7]), encode_onehot(lm, 5))
    (out.eps_hat.square().mean() + out.v.mean()).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert dead == []


@pytest.mark.parametrize("kw", [dict(resolution=(9, 8)), dict(num_condition_classes=1),
                                dict(base_channels=6)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DenoiserConfig(**{**SMALL, **kw})


def test_denoise_input_checks():
    model = build_denoiser(DenoiserConfig(**SMALL), seed=0)
    with pytest.raises(ValueError):
        denoise(model, torch.randn(1, 1, 16, 16), 1)
    with pytest.raises(IndexError):
        denoise(model, torch.randn(1, 1, 8, 8), 0)
    with pytest.raises(IndexError):
        denoise(model, torch.randn(1, 1, 8, 8), 11, T=10)
    with pytest.raises(ValueError):
        denoise(model, torch.randn(1, 1, 8, 8), 1, torch.zeros(1, 4, 8, 8))


def test_timestep_embedding():
    e = timestep_embedding(torch.tensor([0, 1, 50]), 8)
    assert e.shape == (3, 8)
    assert torch.allclose(e[0], torch.tensor([1.0] * 4 + [0.0] * 4, dtype=e.dtype))
    freqs = np.exp(-np.log(10000.0) * np.arange(4) / 4)
    assert np.allclose(e[2, :4].numpy(), np.cos(50 * freqs))
    assert timestep_embedding(torch.tensor([3]), 7).shape == (1, 7)


def test_config_dict_round_trip():
    cfg = DenoiserConfig(**SMALL)
    assert DenoiserConfig(**cfg.to_dict()) == cfg
