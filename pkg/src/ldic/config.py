"""Configuration dataclasses for the depth-guided codec.

A model is described by :class:`ModelConfig`, a training run by
:class:`TrainConfig`.  Presets cover the three scales used in practice:

* ``tiny``  -- minimal geometry for gradient checks and shape tests.
* ``toy``   -- desk-scale preset used by the acceptance experiments.
* ``paper`` -- full-scale geometry (192-channel latents, window 8).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised when a configuration violates a structural invariant."""


# Lambda bounds are quoted in the 8-bit convention (lambda * 255^2 applied to
# MSE on [0,1] pixels), which is how rate-distortion multipliers of this size
# are conventionally stated.
LAMBDA_MIN_DEFAULT = 0.003 * 255.0**2
LAMBDA_MAX_DEFAULT = 0.2 * 255.0**2


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and entropy-model settings of the codec.

    The analysis transform has four stride-2 stages (total stride 16); the
    hyper transform adds two more (total stride 64), so inputs are padded to
    multiples of 64.  ``embed_dims[-1]`` is the latent width C_y and
    ``hyper_dims[-1]`` the hyper-latent width C_z.
    """

    image_channels: int = 3
    latent_channels: int = 32
    hyper_channels: int = 16

    embed_dims: tuple[int, ...] = (16, 24, 32, 32)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads_per_stage: tuple[int, ...] = (2, 3, 4, 4)
    window_size: int = 4
    mlp_ratio: float = 2.0
    # Prompt token width per prompted stage; must match embed_dims.
    prompt_dim_per_stage: tuple[int, ...] | None = None

    hyper_dims: tuple[int, ...] = (24, 16)
    hyper_depths: tuple[int, ...] = (2, 2)
    hyper_heads: tuple[int, ...] = (3, 2)
    hyper_window_size: int = 4

    lambda_min: float = LAMBDA_MIN_DEFAULT
    lambda_max: float = LAMBDA_MAX_DEFAULT

    depth_guided: bool = True
    # Mean-scale Gaussian conditional by default; scale-only when False.
    gaussian_mean: bool = True
    scale_floor: float = 0.11
    scale_table_min: float = 0.11
    scale_table_max: float = 16.0
    scale_table_levels: int = 32
    mean_offset_levels: int = 16
    tail_mass: float = 2.0**-8

    @property
    def stage_count(self) -> int:
        return len(self.embed_dims)

    @property
    def prompt_dims(self) -> tuple[int, ...]:
        return self.prompt_dim_per_stage or self.embed_dims

    @property
    def pad_multiple(self) -> int:
        # stride 16 from the main stages, times stride 4 from the hyper path
        return 4 * 2 ** self.stage_count

    def validate(self) -> None:
        if self.image_channels != 3:
            raise ConfigError("image_channels must be 3")
        n = self.stage_count
        if n != 4:
            raise ConfigError("expected 4 analysis stages (total stride 16)")
        if len(self.depths) != n or len(self.heads_per_stage) != n:
            raise ConfigError("depths/heads must have one entry per stage")
        if self.embed_dims[-1] != self.latent_channels:
            raise ConfigError("last stage width must equal latent_channels")
        if self.hyper_dims[-1] != self.hyper_channels:
            raise ConfigError("last hyper width must equal hyper_channels")
        if len(self.hyper_depths) != len(self.hyper_dims) or len(
            self.hyper_heads
        ) != len(self.hyper_dims):
            raise ConfigError("hyper depths/heads must match hyper_dims")
        for d, h in zip(self.embed_dims, self.heads_per_stage):
            if d <= 0 or h <= 0 or d % h:
                raise ConfigError(f"stage width {d} not divisible by {h} heads")
        for d, h in zip(self.hyper_dims, self.hyper_heads):
            if d <= 0 or h <= 0 or d % h:
                raise ConfigError(f"hyper width {d} not divisible by {h} heads")
        if min(self.depths) < 1 or min(self.hyper_depths) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.window_size < 1 or self.hyper_window_size < 1:
            raise ConfigError("window sizes must be positive")
        if self.prompt_dims != self.embed_dims:
            raise ConfigError("prompt dims must match the token width per stage")
        if not (0.0 < self.lambda_min < self.lambda_max):
            raise ConfigError("need 0 < lambda_min < lambda_max")
        if self.scale_floor <= 0:
            raise ConfigError("scale_floor must be positive")
        if not (0.0 < self.scale_table_min <= self.scale_table_max):
            raise ConfigError("bad scale table range")
        if self.scale_table_min < self.scale_floor:
            raise ConfigError("scale table must not start below the floor")
        if self.scale_table_levels < 1 or self.mean_offset_levels < 1:
            raise ConfigError("table levels must be positive")
        if not (0.0 < self.tail_mass < 0.5):
            raise ConfigError("tail_mass must be in (0, 0.5)")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for a single-stage training run.

    ``lambda_min``/``lambda_max`` must agree with the model they train; the
    rate-control exponent m_lambda is drawn uniformly per batch element.
    """

    steps: int = 3000
    batch_size: int = 8
    crop_size: int = 64
    lr: float = 1e-4
    lr_decay_step: int = 2400
    lr_decay_gamma: float = 0.3
    grad_clip: float = 1.0
    seed: int = 0
    lambda_min: float = LAMBDA_MIN_DEFAULT
    lambda_max: float = LAMBDA_MAX_DEFAULT
    depth_image_prob: float = 0.15
    checkpoint_every: int = 1000
    log_every: int = 50

    def validate(self, model: ModelConfig | None = None) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.crop_size < 1 or self.crop_size % 64:
            raise ConfigError("crop_size must be a positive multiple of 64")
        if self.lr <= 0 or not (0 < self.lr_decay_gamma <= 1):
            raise ConfigError("bad learning-rate schedule")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if not (0.0 <= self.depth_image_prob < 1.0):
            raise ConfigError("depth_image_prob must lie in [0, 1)")
        if not (0.0 < self.lambda_min < self.lambda_max):
            raise ConfigError("need 0 < lambda_min < lambda_max")
        if model is not None and (
            self.lambda_min != model.lambda_min
            or self.lambda_max != model.lambda_max
        ):
            raise ConfigError("lambda bounds disagree with the model config")


def tiny_model(depth_guided: bool = True, **overrides) -> ModelConfig:
    """Smallest valid geometry; used for gradient checks."""
    base = dict(
        latent_channels=4,
        hyper_channels=4,
        embed_dims=(4, 4, 4, 4),
        depths=(1, 1, 1, 1),
        heads_per_stage=(1, 1, 1, 1),
        window_size=4,
        hyper_dims=(4, 4),
        hyper_depths=(1, 1),
        hyper_heads=(1, 1),
        scale_table_max=8.0,
        scale_table_levels=16,
        mean_offset_levels=8,
        depth_guided=depth_guided,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def toy_model(depth_guided: bool = True, **overrides) -> ModelConfig:
    """Desk-scale preset used by the acceptance experiments."""
    base = dict(depth_guided=depth_guided)
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def paper_model(depth_guided: bool = True, **overrides) -> ModelConfig:
    """Full-scale geometry: 192-channel latents, window 8."""
    base = dict(
        latent_channels=192,
        hyper_channels=192,
        embed_dims=(96, 144, 192, 192),
        depths=(2, 2, 6, 2),
        heads_per_stage=(4, 6, 8, 8),
        window_size=8,
        hyper_dims=(192, 192),
        hyper_depths=(2, 2),
        hyper_heads=(8, 8),
        hyper_window_size=4,
        scale_table_max=64.0,
        scale_table_levels=48,
        depth_guided=depth_guided,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


MODEL_PRESETS = {"tiny": tiny_model, "toy": toy_model, "paper": paper_model}


def _from_dict(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    coerced = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


def model_config_from_dict(data: dict) -> ModelConfig:
    cfg = _from_dict(ModelConfig, data)
    cfg.validate()
    return cfg


def train_config_from_dict(data: dict) -> TrainConfig:
    cfg = _from_dict(TrainConfig, data)
    cfg.validate()
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
