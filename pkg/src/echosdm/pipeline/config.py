"""
Run configuration: nested dataclasses with YAML round-tripping and two presets.

``paper`` pins the published training values; ``toy`` is the desk-scale
configuration used for end-to-end verification on phantom data.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from ..augment import AugmentationSpec, derive_seed
from ..diffusion import DiffusionTrainConfig, SamplerConfig
from ..errors import ConfigError
from ..schedules import schedule_from_config
from ..sdm_net import DenoiserConfig
from ..segmenter import SegTrainConfig, UNetConfig

VIEWS = ("2CH", "4CH")
PHASES = ("ED", "ES")
DATASETS = ("2CED", "2CES", "4CED", "4CES")
ALL = "all"


def dataset_name(view: str, phase: str) -> str:
    return f"{view[0]}C{phase}"


def dataset_view_phase(name: str) -> tuple[str, str]:
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASETS + (ALL,)}")
    return f"{name[0]}CH", name[2:]


@dataclass
class DataConfig:
    resolution: tuple[int, int] = (64, 64)
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_counts: tuple[int, int, int] | None = None
    test_patients: list[str] | None = None
    sector_tau: float = 0.0
    toy_patients: int = 10


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    T: int = 100
    offset: float = 0.008
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return schedule_from_config(asdict(self))


@dataclass
class DiffusionConfig:
    lambda_vlb: float = 0.001
    p_uncond: float = 0.0
    steps: int = 2000
    batch_size: int = 8
    lr_base: float = 1e-4
    lr_anneal: str = "linear-to-zero"
    train_phases: list[str] = field(default_factory=lambda: ["ED"])


@dataclass
class SamplingConfig:
    guidance_scale: float = 0.0
    use_guidance: bool = False
    batch_size: int = 40


@dataclass
class PathsConfig:
    raw: str | None = None


SECTIONS = {
    "paths": PathsConfig,
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "diffusion": DiffusionConfig,
    "sampler": SamplingConfig,
    "denoiser": DenoiserConfig,
    "augment": AugmentationSpec,
    "segmenter": SegTrainConfig,
    "unet": UNetConfig,
}


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplingConfig = field(default_factory=SamplingConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    segmenter: SegTrainConfig = field(default_factory=SegTrainConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def stage_seed(self, stage: str) -> int:
        return derive_seed("stage", stage, self.seed) % 2**31

    def diffusion_train_config(self) -> DiffusionTrainConfig:
        d = self.diffusion
        return DiffusionTrainConfig(schedule=self.schedule.build(), lambda_vlb=d.lambda_vlb,
                                    p_uncond=d.p_uncond, steps=d.steps, batch_size=d.batch_size,
                                    lr_base=d.lr_base, lr_anneal=d.lr_anneal)

    def sampler_config(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(guidance_scale=self.sampler.guidance_scale,
                             use_guidance=self.sampler.use_guidance, seed=seed)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in SECTIONS:
                kwargs[key] = _build_section(key, SECTIONS[key], value or {})
            else:
                kwargs[key] = value
        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if tuple(self.denoiser.resolution) != tuple(self.data.resolution):
            raise ConfigError("denoiser resolution must equal data resolution")
        if tuple(self.segmenter.input_resolution) != tuple(self.data.resolution):
            raise ConfigError("segmenter input resolution must equal data resolution")
        factor = 2 ** (self.unet.depth - 1)
        if any(r % factor for r in self.data.resolution):
            raise ConfigError(f"resolution {self.data.resolution} not divisible by {factor} "
                              f"(U-Net depth {self.unet.depth})")
        if self.data.split_counts is None and abs(sum(self.data.split_ratios) - 1) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        if not set(self.diffusion.train_phases) <= set(PHASES):
            raise ConfigError(f"train_phases must be drawn from {PHASES}")
        try:
            self.schedule.build()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None


def _build_section(name, klass, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(klass) if f.init}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) and k not in ("channel_multipliers",
            "attention_resolutions", "train_phases", "test_patients") else v
            for k, v in values.items()}
    try:
        return klass(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def toy_preset() -> RunConfig:
    return RunConfig(
        preset="toy",
        data=DataConfig(resolution=(64, 64), split_ratios=(0.7, 0.1, 0.2), toy_patients=10),
        schedule=ScheduleConfig(kind="cosine", T=100, offset=0.008),
        diffusion=DiffusionConfig(lambda_vlb=0.001, p_uncond=0.0, steps=2000, batch_size=8,
                                  lr_base=2e-3, lr_anneal="linear-to-zero"),
        sampler=SamplingConfig(batch_size=40),
        denoiser=DenoiserConfig(resolution=(64, 64), base_channels=16, channel_multipliers=[1, 2, 4],
                                attention_resolutions=[], time_embed_dim=64, cond_hidden=16,
                                norm_groups=8),
        # elastic displacement scaled with resolution: 30 px at 256 is 7.5 px at 64
        augment=AugmentationSpec(elastic_max_displacement_px=(0.0, 7.5, 7.5)),
        segmenter=SegTrainConfig(epochs=60, lr=1e-3, beta1=0.9, beta2=0.999,
                                 input_resolution=(64, 64), batch_size=8),
        unet=UNetConfig(depth=5, base_channels=16),
    )


def paper_preset() -> RunConfig:
    return RunConfig(
        preset="paper",
        data=DataConfig(resolution=(256, 256), split_ratios=(0.8, 0.1, 0.1),
                        split_counts=(400, 50, 50)),
        schedule=ScheduleConfig(kind="cosine", T=1000, offset=0.008),
        diffusion=DiffusionConfig(lambda_vlb=0.001, p_uncond=0.0, steps=50_000, batch_size=12,
                                  lr_base=1e-4, lr_anneal="linear-to-zero"),
        sampler=SamplingConfig(batch_size=16),
        denoiser=DenoiserConfig(resolution=(256, 256), base_channels=128,
                                channel_multipliers=[1, 1, 2, 2, 4], attention_resolutions=[32, 16, 8],
                                time_embed_dim=512, cond_hidden=128, norm_groups=32),
        augment=AugmentationSpec(),
        segmenter=SegTrainConfig(epochs=300, lr=1e-3, beta1=0.9, beta2=0.999,
                                 input_resolution=(256, 256), batch_size=8),
        unet=UNetConfig(depth=8, base_channels=2),
    )


PRESETS = {"toy": toy_preset, "paper": paper_preset}


def load_config(path=None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Preset defaults, overlaid with a YAML file, overlaid with an explicit seed."""
    base_name = preset
    file_values = {}
    if path is not None:
        try:
            file_values = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_name = base_name or file_values.get("preset")
    base_name = base_name or "toy"
    if base_name not in PRESETS:
        raise ConfigError(f"unknown preset {base_name!r}")
    merged = _merge(PRESETS[base_name]().to_dict(), file_values)
    merged["preset"] = base_name
    if seed is not None:
        merged["seed"] = seed
    return RunConfig.from_dict(merged)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
