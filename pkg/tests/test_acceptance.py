"""
Acceptance criteria AC-1 .. AC-10. Each test records one pass/fail line that
is printed in the terminal summary.

AC-8 and AC-9 share one end-to-end toy run (about 40 minutes on one CPU).
Set ECHOSDM_ACCEPTANCE_RUN to a run directory to reuse a finished run there,
or to an empty/missing directory to keep the artifacts of a fresh one.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from echosdm.augment import AugmentationSpec, elastic_field, expand_dataset, sample_affine
from echosdm.diffusion import DiffusionTrainConfig, SamplerConfig, guided_eps, hybrid_loss, q_sample, sample
from echosdm.labelmaps import read_label
from echosdm.metrics import dice, structure_masks
from echosdm.pipeline import stages
from echosdm.pipeline.config import ALL, DATASETS, VIEWS, paper_preset, toy_preset
from echosdm.pipeline.toy import make_phantom
from echosdm.schedules import alpha_bar_at, make_cosine_schedule, make_linear_schedule

from stubs import StubDenoiser, n_params
from test_diffusion import _batch, _dyadic, _fd_loss, _flat_grad
from test_schedules import COSINE_AB_500_OF_1000

GOLDEN = Path(__file__).parent / "data" / "paper_preset.yaml"


def test_ac1_schedule_numerics(criterion):
    t0 = time.perf_counter()
    s = make_cosine_schedule(1000, offset=0.008)
    rel = abs(alpha_bar_at(s, 500) - COSINE_AB_500_OF_1000) / COSINE_AB_500_OF_1000
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(50):
        T = int(rng.integers(1, 2001))
        s = make_cosine_schedule(T) if rng.random() < 0.5 else make_linear_schedule(T)
        ab = np.asarray(s.alpha_bar)
        bad += not (np.all(np.diff(ab) < 0) and np.all((ab[1:] > 0) & (ab[1:] < 1))
                    and np.allclose(np.cumprod(1 - np.asarray(s.betas)), ab[1:], rtol=1e-12, atol=0))
    secs = time.perf_counter() - t0
    ok = rel < 1e-6 and bad == 0 and secs < 1
    criterion("AC-1", ok, f"rel err {rel:.1e}, {50 - bad}/50 configs hold invariants, {secs:.2f}s")
    assert ok


def test_ac2_forward_moments(criterion):
    t0 = time.perf_counter()
    s = make_cosine_schedule(100)
    rng = np.random.default_rng(2)
    g = torch.Generator().manual_seed(2)
    n = 100_000
    y0 = torch.linspace(-1, 1, 7, dtype=torch.float64)
    worst = 0.0
    for t in rng.integers(1, 101, size=5):
        ab = s.alpha_bar[int(t)]
        y = q_sample(y0.expand(n, 7), int(t), torch.randn(n, 7, generator=g, dtype=torch.float64), s).numpy()
        z_mean = np.abs(y.mean(0) - math.sqrt(ab) * y0.numpy()) / math.sqrt((1 - ab) / n)
        z_var = np.abs(y.var(0, ddof=1) - (1 - ab)) / ((1 - ab) * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    secs = time.perf_counter() - t0
    ok = worst < 4 and secs < 30
    criterion("AC-2", ok, f"worst deviation {worst:.2f} standard errors, {secs:.1f}s")
    assert ok


def test_ac3_guidance_algebra(criterion):
    g = torch.Generator().manual_seed(3)
    held = 0
    for _ in range(100):
        ec, eu = _dyadic(g, (2, 1, 8, 8)), _dyadic(g, (2, 1, 8, 8))
        s1, s2 = float(_dyadic(g, (), 4) * 4), float(_dyadic(g, (), 4) * 4)
        held += (torch.equal(guided_eps(ec, eu, 0.0), ec)
                 and torch.equal(guided_eps(ec, ec, s1), ec)
                 and torch.equal(guided_eps(ec, eu, (s1 + s2) / 2),
                                 (guided_eps(ec, eu, s1) + guided_eps(ec, eu, s2)) / 2))
    criterion("AC-3", held == 100, f"{held}/100 field pairs satisfy all three identities exactly")
    assert held == 100


def test_ac4_gradient_check(criterion):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    worst = 0.0
    for lam in (0.0, 0.001, 1.0):
        model = StubDenoiser()
        y0, eps, x = _batch(21)
        t = torch.tensor([1, 12, 55, 99])
        cfg = DiffusionTrainConfig(schedule=make_cosine_schedule(100), lambda_vlb=lam)
        total, _, _ = hybrid_loss(model, y0, x, t, eps, cfg)
        model.zero_grad()
        total.backward()
        analytic = _flat_grad(model)
        with torch.no_grad():
            eps0 = model(q_sample(y0, t, eps, cfg.schedule), t, x).eps_hat.clone()
            numeric = []
            for p in model.parameters():
                flat = p.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + 1e-6
                    lp = _fd_loss(model, y0, x, t, eps, cfg, eps0).item()
                    flat[i] = orig - 1e-6
                    lm = _fd_loss(model, y0, x, t, eps, cfg, eps0).item()
                    flat[i] = orig
                    numeric.append((lp - lm) / 2e-6)
        numeric = torch.tensor(numeric, dtype=torch.float64)
        worst = max(worst, float((analytic - numeric).norm() / numeric.norm()))
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 120 and n_params(StubDenoiser()) <= 1000
    criterion("AC-4", ok, f"max relative error {worst:.1e} over lambda in (0, 0.001, 1), "
                          f"{n_params(StubDenoiser())} params, {secs:.1f}s")
    assert ok


def test_ac5_evaluation_count(criterion):
    model = StubDenoiser().float()
    calls = []
    model.register_forward_hook(lambda *_: calls.append(1))
    lm = np.zeros((8, 8), np.uint8)
    counts = {}
    for T in (10, 37):
        s = make_cosine_schedule(T)
        calls.clear()
        sample(model, lm, s, SamplerConfig(use_guidance=False))
        off = len(calls)
        calls.clear()
        sample(model, lm, s, SamplerConfig(use_guidance=True, guidance_scale=2.0))
        counts[T] = (off, len(calls))
    ok = all(c == (T, 2 * T) for T, c in counts.items())
    criterion("AC-5", ok, "calls (off, on): " + ", ".join(f"T={T}: {c}" for T, c in counts.items()))
    assert ok


def test_ac6_dice_oracle(criterion):
    rng = np.random.default_rng(6)
    exact = sym = ident = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 20, 2))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
        na, nb = int(sum(a.ravel())), int(sum(b.ravel()))
        brute = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
        exact += dice(a, b) == brute
        sym += dice(a, b) == dice(b, a)
        ident += dice(a, a) == 1.0
    epi = 0
    for _ in range(100):
        lm = rng.integers(0, 5, (16, 16))
        m = structure_masks(lm)
        epi += np.array_equal(m["lv_epi"], m["lv_endo"] | (lm == 3))
    ok = exact == sym == ident == 1000 and epi == 100
    criterion("AC-6", ok, f"exact {exact}/1000, symmetric {sym}/1000, identity {ident}/1000, "
                          f"epi = endo | myo {epi}/100")
    assert ok


def test_ac7_augmentation_fidelity(criterion):
    spec = AugmentationSpec()
    rng = np.random.default_rng(7)
    draws = [sample_affine(spec, rng) for _ in range(10_000)]
    in_range = sum(-5 <= d.rotation <= 5 and 0 <= d.tx <= 0.05 and 0 <= d.ty <= 0.05
                   and 0.8 <= d.scale <= 1.05 and abs(d.shear) <= 5 for d in draws)
    field_max = max(float(np.hypot(*elastic_field((256, 256), spec, seed)).max()) for seed in range(20))
    flat = AugmentationSpec(elastic_max_displacement_px=(0, 0, 0))
    counts = []
    for k in range(4):
        maps = [(f"v{k}m{i}", np.full((8, 8), 2, np.uint8), None) for i in range(450)]
        counts.append((len(expand_dataset(maps[:400], flat)), len(expand_dataset(maps[400:], flat))))
    agg = tuple(map(sum, zip(*counts)))
    small = [(f"m{i}", make_phantom(f"p{i}", "4CH", "ED", (64, 64))[1], None) for i in range(6)]
    ref = expand_dataset(small, spec, master_seed=11, workers=1)
    identical = all(
        all(a.tobytes() == b.tobytes() for (a, _, _), (b, _, _) in zip(ref, expand_dataset(small, spec, 11, w)))
        for w in (1, 2, 4))
    ok = (in_range == 10_000 and field_max <= 30 * math.sqrt(2) and set(counts) == {(2000, 250)}
          and agg == (8000, 1000) and identical)
    criterion("AC-7", ok, f"{in_range}/10000 draws in range, field max {field_max:.1f} px "
                          f"(bound {30 * math.sqrt(2):.1f}), per dataset {counts[0]}, aggregate {agg}, "
                          f"byte-identical across workers: {identical}")
    assert ok


def test_ac10_paper_preset_freeze(criterion, tmp_path):
    golden = yaml.safe_load(GOLDEN.read_text())
    cfg = paper_preset()
    # round trip through the on-disk format first
    from echosdm.pipeline.config import load_config
    frozen = load_config(cfg.dump(tmp_path / "paper.yaml")).to_dict()
    diffs = [f"{sec}.{k}: {frozen[sec][k]!r} != {v!r}" for sec, vals in golden.items()
             for k, v in vals.items() if frozen[sec][k] != v]
    n = sum(len(v) for v in golden.values())
    criterion("AC-10", not diffs, f"{n - len(diffs)}/{n} published values match" +
              (f"; {diffs}" if diffs else ""))
    assert not diffs


# ---------------------------------------------------------------- end-to-end toy run

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    env = os.environ.get("ECHOSDM_ACCEPTANCE_RUN")
    out = Path(env) if env else tmp_path_factory.mktemp("toy_run")
    if (out / "reports" / "summary.csv").exists():
        return out, None
    cfg = toy_preset()
    t0 = time.perf_counter()
    stages.run_end_to_end(cfg, out)
    return out, time.perf_counter() - t0


def _summary(out):
    with open(out / "reports" / "summary.csv", newline="") as fh:
        return {r["dataset"]: float(r["row_mean"]) for r in csv.DictReader(fh)}


@pytest.mark.slow
def test_ac8_toy_reproduction(criterion, toy_run):
    out, secs = toy_run
    means = _summary(out)
    allf = means[ALL]
    singles = {n: means[n] for n in DATASETS}
    ok = allf >= 0.85 and all(allf >= v - 0.05 for v in singles.values())
    if secs is None:
        timing = "reused run"
    else:
        # the pipeline runs on CPU; the 30 min budget is for an accelerator
        timing = f"{secs / 60:.1f} min on CPU (not asserted)"
    criterion("AC-8", ok, f"all-frames Dice {allf:.3f}; singles " +
              ", ".join(f"{n} {v:.3f}" for n, v in singles.items()) + f"; {timing}")
    assert ok


def _sector_mass(out, view, seeds=4):
    cfg = toy_preset()
    model, _ = stages.load_denoiser(out / "sdm" / view / "checkpoint.pt")
    held_out = [r for r in stages.load_prepared(out) if r.split == "test" and r.view == view]
    lms = [read_label(r.label) for r in held_out for _ in range(seeds)]
    imgs = stages.synthesize(model, lms, list(range(len(lms))), cfg)
    inside = sum(float(img[lm != 0].sum()) for lm, img in zip(lms, imgs))
    return inside / float(imgs.sum()), len(lms)


@pytest.mark.slow
def test_ac9_sdm_training_sanity(criterion, toy_run):
    out, _ = toy_run
    parts, ok = [], True
    for view in VIEWS:
        with open(out / "sdm" / view / "loss.csv", newline="") as fh:
            loss = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
        ratio = loss[-100:].mean() / loss[:100].mean()
        mass, n = _sector_mass(out, view)
        ok = ok and ratio <= 0.10 and mass >= 0.80
        parts.append(f"{view}: loss ratio {ratio:.3f}, sector mass {mass:.3f} over {n} samples")
    criterion("AC-9", ok, "; ".join(parts))
    assert ok
