"""The depth-guided variable-rate codec model.

Four stride-2 analysis stages take the image to a latent y at 1/16
resolution; two more take y to the hyper-latent z at 1/64.  The synthesis
side mirrors both.  Main-path stages are prompted: a conditioning ladder
p (fed the image/latent plus the rate-control map) and, when depth guidance
is enabled, a second ladder l (fed the aligned depth map alone) produce one
feature map per stage; the depth features pass through zero-initialized 1x1
gates and are summed onto the conditioning features before prompt-token
extraction, and the resulting maps join each stage's window attention as
extra key/value tokens.  The hyper path is unprompted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, config_to_dict, model_config_from_dict
from .entropy import (
    FactorizedCoder,
    FactorizedPrior,
    GaussianCoder,
    gaussian_likelihood,
    make_scale_table,
    quantize,
)
from .layers import BlockStack

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptSet:
    """One prompt map per prompted stage, finest grid first."""

    blocks: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("PromptSet needs at least one block")


def _conv_down(cin: int, cout: int, first: bool = False) -> nn.Conv2d:
    k = 5 if first else 3
    return nn.Conv2d(cin, cout, kernel_size=k, stride=2, padding=k // 2)


def _conv_up(cin: int, cout: int, last: bool = False) -> nn.ConvTranspose2d:
    k = 5 if last else 3
    return nn.ConvTranspose2d(
        cin, cout, kernel_size=k, stride=2, padding=k // 2, output_padding=1
    )


def _zero_gate(channels: int) -> nn.Conv2d:
    """Zero-initialized 1x1 gate on the depth pathway.

    A freshly built guided model therefore behaves exactly like its unguided
    twin; training opens the gates only where depth actually helps, so the
    guided model can never start out worse than the baseline it extends.
    """
    gate = nn.Conv2d(channels, channels, kernel_size=1)
    nn.init.zeros_(gate.weight)
    nn.init.zeros_(gate.bias)
    return gate


class PromptLadder(nn.Module):
    """Strided conv ladder emitting one feature map per analysis stage."""

    def __init__(self, in_channels: int, dims: tuple[int, ...]):
        super().__init__()
        ins = (in_channels, *dims[:-1])
        self.convs = nn.ModuleList(
            _conv_down(ins[i], dims[i], first=(i == 0)) for i in range(len(dims))
        )
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = self.act(conv(x))
            feats.append(x)
        return feats


class PromptLadderUp(nn.Module):
    """Transposed-conv ladder emitting one feature map per synthesis stage."""

    def __init__(self, in_channels: int, dims: tuple[int, ...]):
        super().__init__()
        self.head = nn.Conv2d(in_channels, dims[0], kernel_size=3, padding=1)
        self.ups = nn.ModuleList(
            _conv_up(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.act(self.head(x))
        feats = [x]
        for up in self.ups:
            x = self.act(up(x))
            feats.append(x)
        return feats


class EncoderPrompter(nn.Module):
    """Builds the analysis-side PromptSet from image, rate map, and depth."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = cfg.embed_dims
        self.ladder = PromptLadder(cfg.image_channels + 1, dims)
        if cfg.depth_guided:
            self.depth_ladder = PromptLadder(1, dims)
            self.depth_gates = nn.ModuleList(_zero_gate(d) for d in dims)
        else:
            self.depth_ladder = None
            self.depth_gates = None
        self.extract = nn.ModuleList(nn.Conv2d(d, d, kernel_size=1) for d in dims)

    def forward(self, x, lambda_map, depth) -> PromptSet:
        feats = self.ladder(torch.cat([x, lambda_map], dim=1))
        if self.depth_ladder is not None:
            for i, (gate, f) in enumerate(
                zip(self.depth_gates, self.depth_ladder(depth))
            ):
                feats[i] = feats[i] + gate(f)
        return PromptSet(tuple(ex(f) for ex, f in zip(self.extract, feats)))


class DecoderPrompter(nn.Module):
    """Builds the synthesis-side PromptSet from y_hat, rate map, and depth.

    The depth ladder first brings the full-resolution depth map down to the
    latent grid with strided convolutions, then mirrors the upward ladder.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        up_dims = tuple(reversed(cfg.embed_dims))
        self.ladder = PromptLadderUp(cfg.latent_channels + 1, up_dims)
        if cfg.depth_guided:
            self.depth_down = PromptLadder(1, cfg.embed_dims)
            self.depth_up = PromptLadderUp(cfg.latent_channels, up_dims)
            self.depth_gates = nn.ModuleList(_zero_gate(d) for d in up_dims)
        else:
            self.depth_down = None
            self.depth_up = None
            self.depth_gates = None
        self.extract = nn.ModuleList(
            nn.Conv2d(d, d, kernel_size=1) for d in up_dims
        )

    def forward(self, y_hat, lambda_map_down, depth) -> PromptSet:
        feats = self.ladder(torch.cat([y_hat, lambda_map_down], dim=1))
        if self.depth_down is not None:
            coarse = self.depth_down(depth)[-1]
            for i, (gate, f) in enumerate(
                zip(self.depth_gates, self.depth_up(coarse))
            ):
                feats[i] = feats[i] + gate(f)
        return PromptSet(tuple(ex(f) for ex, f in zip(self.extract, feats)))


class AnalysisTransform(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = cfg.embed_dims
        ins = (cfg.image_channels, *dims[:-1])
        self.downs = nn.ModuleList(
            _conv_down(ins[i], dims[i], first=(i == 0)) for i in range(len(dims))
        )
        self.stages = nn.ModuleList(
            BlockStack(
                dims[i],
                cfg.depths[i],
                cfg.heads_per_stage[i],
                cfg.window_size,
                cfg.mlp_ratio,
            )
            for i in range(len(dims))
        )

    def forward(self, x, prompts: PromptSet | None = None):
        blocks = prompts.blocks if prompts is not None else (None,) * len(self.stages)
        if len(blocks) != len(self.stages):
            raise ValueError("prompt count must match stage count")
        for down, stage, p in zip(self.downs, self.stages, blocks):
            x = stage(down(x), p)
        return x


class SynthesisTransform(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = tuple(reversed(cfg.embed_dims))
        depths = tuple(reversed(cfg.depths))
        heads = tuple(reversed(cfg.heads_per_stage))
        self.stages = nn.ModuleList(
            BlockStack(dims[i], depths[i], heads[i], cfg.window_size, cfg.mlp_ratio)
            for i in range(len(dims))
        )
        outs = (*dims[1:], cfg.image_channels)
        self.ups = nn.ModuleList(
            _conv_up(dims[i], outs[i], last=(i == len(dims) - 1))
            for i in range(len(dims))
        )

    def forward(self, y_hat, prompts: PromptSet | None = None):
        blocks = prompts.blocks if prompts is not None else (None,) * len(self.stages)
        if len(blocks) != len(self.stages):
            raise ValueError("prompt count must match stage count")
        x = y_hat
        for stage, up, p in zip(self.stages, self.ups, blocks):
            x = up(stage(x, p))
        return x


class HyperAnalysis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = cfg.hyper_dims
        ins = (cfg.latent_channels, *dims[:-1])
        self.downs = nn.ModuleList(
            nn.Conv2d(ins[i], dims[i], 3, stride=2, padding=1)
            for i in range(len(dims))
        )
        self.stages = nn.ModuleList(
            BlockStack(
                dims[i],
                cfg.hyper_depths[i],
                cfg.hyper_heads[i],
                cfg.hyper_window_size,
                cfg.mlp_ratio,
            )
            for i in range(len(dims))
        )

    def forward(self, y):
        for down, stage in zip(self.downs, self.stages):
            y = stage(down(y))
        return y


class HyperSynthesis(nn.Module):
    """Predicts the Gaussian parameters of y from the decoded hyper-latent."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mean_scale = cfg.gaussian_mean
        self.scale_floor = cfg.scale_floor
        dims = tuple(reversed(cfg.hyper_dims))
        depths = tuple(reversed(cfg.hyper_depths))
        heads = tuple(reversed(cfg.hyper_heads))
        self.stages = nn.ModuleList(
            BlockStack(
                dims[i], depths[i], heads[i], cfg.hyper_window_size, cfg.mlp_ratio
            )
            for i in range(len(dims))
        )
        out_ch = cfg.latent_channels * (2 if self.mean_scale else 1)
        outs = (*dims[1:], out_ch)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(
                dims[i], outs[i], 3, stride=2, padding=1, output_padding=1
            )
            for i in range(len(dims))
        )

    def forward(self, z_hat):
        x = z_hat
        for stage, up in zip(self.stages, self.ups):
            x = up(stage(x))
        if self.mean_scale:
            mean, raw = x.chunk(2, dim=1)
        else:
            mean, raw = torch.zeros_like(x), x
        scale = self.scale_floor + F.softplus(raw)
        return mean, scale


class CodecModel(nn.Module):
    """Complete model: transforms, prompt networks, and the learned prior."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.g_a = AnalysisTransform(cfg)
        self.g_s = SynthesisTransform(cfg)
        self.h_a = HyperAnalysis(cfg)
        self.h_s = HyperSynthesis(cfg)
        self.prompt_enc = EncoderPrompter(cfg)
        self.prompt_dec = DecoderPrompter(cfg)
        self.z_prior = FactorizedPrior(cfg.hyper_channels)
        self.apply(self._init_module)

    @staticmethod
    def _init_module(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    # -- prompt construction -------------------------------------------------

    def _depth_or_zeros(self, depth, b, h, w, dtype, device):
        """Absent depth on a guided model substitutes an all-zero map."""
        if not self.cfg.depth_guided:
            return None
        if depth is None:
            return torch.zeros(b, 1, h, w, dtype=dtype, device=device)
        if depth.shape != (b, 1, h, w):
            raise ValueError(
                f"depth shape {tuple(depth.shape)} must be {(b, 1, h, w)}"
            )
        return depth.to(dtype)

    def encoder_prompts(self, x, lambda_map, depth=None) -> PromptSet:
        b, _, h, w = x.shape
        depth = self._depth_or_zeros(depth, b, h, w, x.dtype, x.device)
        return self.prompt_enc(x, lambda_map, depth)

    def decoder_prompts(self, y_hat, lambda_map_down, depth=None) -> PromptSet:
        b, _, hy, wy = y_hat.shape
        depth = self._depth_or_zeros(
            depth, b, hy * 16, wy * 16, y_hat.dtype, y_hat.device
        )
        return self.prompt_dec(y_hat, lambda_map_down, depth)

    # -- transforms -----------------------------------------------------------

    def analysis_transform(self, x, prompts: PromptSet | None = None):
        return self.g_a(x, prompts)

    def synthesis_transform(self, y_hat, prompts: PromptSet | None = None):
        return torch.clamp(self.g_s(y_hat, prompts), 0.0, 1.0)

    def hyper_analysis(self, y):
        return self.h_a(y)

    def hyper_synthesis(self, z_hat):
        # softplus plus the floor keeps scales positive; non-finite values
        # propagate so the training loop can skip the step
        return self.h_s(z_hat)

    def lambda_maps(self, m_lambda, b: int, h: int, w: int, dtype, device=None):
        """Full-resolution and latent-grid rate-control maps."""
        if not torch.is_tensor(m_lambda):
            m_lambda = torch.full((b,), float(m_lambda), dtype=dtype, device=device)
        m = m_lambda.to(dtype).view(b, 1, 1, 1)
        return m.expand(b, 1, h, w), m.expand(b, 1, h // 16, w // 16)

    # -- training forward ------------------------------------------------------

    def forward(
        self,
        x,
        m_lambda,
        depth=None,
        *,
        generator=None,
        noise_y=None,
        noise_z=None,
    ):
        """Noise-proxy forward pass used for optimization.

        ``noise_y``/``noise_z`` override the random quantization offsets
        (the gradient checks pass fixed offsets to keep the path smooth).
        """
        b, _, h, w = x.shape
        mult = self.cfg.pad_multiple
        if h % mult or w % mult:
            raise ValueError(f"training inputs must be multiples of {mult}")
        lam_map, lam_down = self.lambda_maps(m_lambda, b, h, w, x.dtype, x.device)
        depth = self._depth_or_zeros(depth, b, h, w, x.dtype, x.device)

        enc_prompts = self.prompt_enc(x, lam_map, depth)
        y = self.g_a(x, enc_prompts)
        z = self.h_a(y)
        z_tilde = quantize(z, "noise", generator=generator, noise=noise_z)
        z_likelihood = self.z_prior.likelihood(z_tilde)
        mean, scale = self.hyper_synthesis(z_tilde)
        y_tilde = quantize(y, "noise", generator=generator, noise=noise_y)
        y_likelihood = gaussian_likelihood(y_tilde, mean, scale)
        dec_prompts = self.prompt_dec(y_tilde, lam_down, depth)
        x_hat = self.g_s(y_tilde, dec_prompts)
        return {
            "x_hat": x_hat,
            "y_likelihood": y_likelihood,
            "z_likelihood": z_likelihood,
            "y": y,
            "z": z,
        }

    # -- frozen coding tables ---------------------------------------------------

    def freeze_coders(self) -> tuple[FactorizedCoder, GaussianCoder]:
        cfg = self.cfg
        z_coder = self.z_prior.build_coder(cfg.tail_mass)
        y_coder = GaussianCoder(
            make_scale_table(
                cfg.scale_table_min, cfg.scale_table_max, cfg.scale_table_levels
            ),
            cfg.mean_offset_levels,
            cfg.tail_mass,
        )
        return z_coder, y_coder


@dataclass
class LoadedCheckpoint:
    model: CodecModel
    z_coder: FactorizedCoder
    y_coder: GaussianCoder
    step: int | None
    extra: dict


def save_checkpoint(path, model: CodecModel, *, step: int | None = None, extra=None):
    """Write a self-contained checkpoint: config, weights, frozen CDF tables."""
    z_coder, y_coder = model.freeze_coders()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": config_to_dict(model.cfg),
        "state_dict": model.state_dict(),
        "z_tables": z_coder.state(),
        "y_tables": y_coder.state(),
        "step": step,
        "extra": dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> LoadedCheckpoint:
    try:
        payload = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a codec checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload['format_version']}"
        )
    cfg = model_config_from_dict(payload["model_config"])
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError("checkpoint config does not match the expected config")
    model = CodecModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return LoadedCheckpoint(
        model=model,
        z_coder=FactorizedCoder.from_state(payload["z_tables"]),
        y_coder=GaussianCoder.from_state(payload["y_tables"]),
        step=payload.get("step"),
        extra=payload.get("extra", {}),
    )
