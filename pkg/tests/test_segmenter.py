import numpy as np
import pytest
import torch

from echosdm.errors import DataError, NumericError
from echosdm.pipeline.toy import make_phantom
from echosdm.segmenter import (SegTrainConfig, UNet, UNetConfig, argmax_lowest, build_unet, mean_dice,
                               predict_mask, train_segmenter)

from stubs import n_params


def toy_pairs(n, res=(32, 32), seed=0):
    imgs, lms = [], []
    for i in range(n):
        img, lm, _ = make_phantom(f"s{i}", ("2CH", "4CH")[i % 2], ("ED", "ES")[i // 2 % 2], res, seed=seed)
        imgs.append(img)
        lms.append(lm)
    return np.stack(imgs).astype(np.float32), np.stack(lms)


def test_parameter_count_hand_tally():
    # double conv(cin, c) = 9 cin c + 9 c c + 4 c (two bias-free convs, two batch norms)
    # depth 2, base 2: enc 62 + 232, up-conv 34, dec 116, head 15
    assert n_params(build_unet(UNetConfig(depth=2, base_channels=2), seed=0)) == 459
    # depth 4 adds enc 896 + 3520, up-convs 520 + 132, decs 1760 + 448
    assert n_params(build_unet(UNetConfig(depth=4, base_channels=2), seed=0)) == 7735


def test_paper_channel_rule():
    assert UNetConfig().channels() == [2, 4, 8, 16, 32, 64, 128, 256]


def test_output_shape_and_seeding():
    model = build_unet(UNetConfig(depth=3, base_channels=4), seed=3, resolution=(16, 16))
    assert model(torch.zeros(2, 1, 16, 16)).shape == (2, 5, 16, 16)
    again = build_unet(UNetConfig(depth=3, base_channels=4), seed=3)
    for a, b in zip(model.parameters(), again.parameters()):
        assert torch.equal(a, b)


def test_resolution_depth_incompatibility():
    with pytest.raises(ValueError):
        build_unet(UNetConfig(depth=4), seed=0, resolution=(20, 20))
    with pytest.raises(ValueError):
        build_unet(UNetConfig(depth=3), seed=0)(torch.zeros(1, 1, 10, 12))
    with pytest.raises(ValueError):
        UNetConfig(depth=1)


def test_argmax_matches_exhaustive_scan():
    gen = torch.Generator().manual_seed(0)
    # coarse integer logits produce plenty of ties
    logits = torch.randint(0, 3, (2, 5, 16, 16), generator=gen).float()
    got = argmax_lowest(logits)
    for n in range(2):
        for i in range(16):
            for j in range(16):
                vals = logits[n, :, i, j].tolist()
                best = 0
                for c in range(1, 5):
                    if vals[c] > vals[best]:
                        best = c
                assert got[n, i, j] == best


class ConstantModel(torch.nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0], 5, *x.shape[-2:])


def test_constant_logits_predict_background():
    out = predict_mask(ConstantModel(), np.random.default_rng(0).random((8, 8)))
    assert out.shape == (8, 8) and not out.any()
    with pytest.raises(DataError):
        predict_mask(ConstantModel(), np.zeros((8, 8)), resolution=(16, 16))


def test_prediction_is_pure():
    model = build_unet(UNetConfig(depth=3, base_channels=4), seed=1)
    img = np.random.default_rng(1).random((3, 16, 16))
    a = predict_mask(model, img)
    b = predict_mask(model, img)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= set(range(5))
    assert model.training


def _cfg(**kw):
    base = dict(epochs=2, lr=1e-3, input_resolution=(32, 32), batch_size=4, seed=0)
    return SegTrainConfig(**{**base, **kw})


def test_loss_decreases_over_first_steps():
    x, y = toy_pairs(8)
    model = build_unet(UNetConfig(depth=3, base_channels=8), seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    xb, yb = torch.from_numpy(x)[:, None], torch.from_numpy(y).long()
    losses = []
    for _ in range(6):
        loss = torch.nn.functional.cross_entropy(model(xb), yb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.slow
def test_overfits_eight_pairs():
    x, y = toy_pairs(8)
    model = build_unet(UNetConfig(depth=3, base_channels=8), seed=0)
    best, hist, _ = train_segmenter(model, (x, y), (x, y), _cfg(epochs=200, lr=3e-3, batch_size=8))
    assert mean_dice(predict_mask(best, x), y) >= 0.99


def test_determinism_and_best_checkpoint():
    x, y = toy_pairs(8)
    vx, vy = toy_pairs(2, seed=1)
    runs = []
    for _ in range(2):
        model = build_unet(UNetConfig(depth=3, base_channels=4), seed=0)
        runs.append(train_segmenter(model, (x, y), (vx, vy), _cfg(epochs=3)))
    assert runs[0][1][0].train_loss == runs[1][1][0].train_loss
    best, hist, state = runs[0]
    assert [h.epoch for h in hist] == [1, 2, 3]
    assert mean_dice(predict_mask(best, vx), vy) == pytest.approx(max(h.val_dice for h in hist))
    assert max(h.val_dice for h in hist) >= hist[-1].val_dice


def test_zero_extra_epochs_resume_identically():
    x, y = toy_pairs(4)
    model = build_unet(UNetConfig(depth=3, base_channels=4), seed=0)
    best, hist, state = train_segmenter(model, (x, y), (x, y), _cfg(epochs=2))
    fresh = build_unet(UNetConfig(depth=3, base_channels=4), seed=9)
    best2, hist2, state2 = train_segmenter(fresh, (x, y), (x, y), _cfg(epochs=2), state=state)
    assert len(hist2) == 2
    for k, v in state["model"].items():
        assert torch.equal(v, state2["model"][k])
    for a, b in zip(best.state_dict().values(), best2.state_dict().values()):
        assert torch.equal(a, b)


def test_resume_continues_like_uninterrupted():
    x, y = toy_pairs(4)
    straight = train_segmenter(build_unet(UNetConfig(depth=3, base_channels=4), seed=0),
                               (x, y), (x, y), _cfg(epochs=3))[2]
    half = train_segmenter(build_unet(UNetConfig(depth=3, base_channels=4), seed=0),
                           (x, y), (x, y), _cfg(epochs=1))[2]
    resumed = train_segmenter(build_unet(UNetConfig(depth=3, base_channels=4), seed=0),
                              (x, y), (x, y), _cfg(epochs=3), state=half)[2]
    for k, v in straight["model"].items():
        assert torch.allclose(v.float(), resumed["model"][k].float(), atol=1e-6), k


def test_input_checks():
    x, y = toy_pairs(2)
    model = build_unet(UNetConfig(depth=3, base_channels=4), seed=0)
    with pytest.raises(DataError):
        train_segmenter(model, (x[:0], y[:0]), (x, y), _cfg())
    with pytest.raises(DataError):
        train_segmenter(model, (x, y), (x, y), _cfg(input_resolution=(64, 64)))
    with pytest.raises(ValueError):
        SegTrainConfig(lr=0)


def test_non_finite_loss_aborts_with_callback():
    x, y = toy_pairs(4)
    x[0, 0, 0] = np.nan
    seen = []
    model = build_unet(UNetConfig(depth=3, base_channels=4), seed=0)
    with pytest.raises(NumericError):
        train_segmenter(model, (x, y), (x, y), _cfg(), on_abort=lambda e, m, o: seen.append(e))
    assert seen == [0]
    assert isinstance(model, UNet)
