"""Rate-distortion training with per-element variable-rate conditioning.

Each optimization step draws a fresh batch of aligned RGB-D crops and an
independent rate-control scalar m per batch element; the loss is the mean of
lambda(m) * MSE + bpp over the batch, so one set of weights learns the whole
rate range.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, config_to_dict
from .data import RgbdPair, random_aligned_crop, upsample_depth
from .entropy import likelihood_bits
from .model import CodecModel, save_checkpoint

log = logging.getLogger(__name__)

# a run is aborted rather than spinning forever on a diverged model
MAX_SKIPPED_STEPS = 50


def lambda_from_control(m, lambda_min: float, lambda_max: float):
    """Geometric interpolation lambda_max**m * lambda_min**(1 - m).

    ``m`` may be a float or a tensor; tensors come back elementwise.
    """
    if torch.is_tensor(m):
        return torch.exp(
            m * math.log(lambda_max) + (1.0 - m) * math.log(lambda_min)
        )
    return float(lambda_max**m * lambda_min ** (1.0 - m))


@dataclass
class LossBreakdown:
    """Scalar objective with detached per-batch diagnostics."""

    loss: torch.Tensor
    mse: float
    bpp: float

    @property
    def psnr(self) -> float:
        if self.mse <= 0:
            return float("inf")
        return -10.0 * math.log10(self.mse)


def rd_loss(x: torch.Tensor, output: dict, lam) -> LossBreakdown:
    """J = mean over the batch of lambda_b * MSE_b + bpp_b."""
    _, _, h, w = x.shape
    mse = (output["x_hat"] - x).pow(2).flatten(1).mean(dim=1)
    bits = likelihood_bits(output["y_likelihood"]) + likelihood_bits(
        output["z_likelihood"]
    )
    bpp = bits / (h * w)
    if not torch.is_tensor(lam):
        lam = torch.full_like(mse, float(lam))
    loss = (lam * mse + bpp).mean()
    return LossBreakdown(
        loss=loss, mse=float(mse.mean().detach()), bpp=float(bpp.mean().detach())
    )


@dataclass(frozen=True)
class StepStats:
    step: int
    loss: float
    mse: float
    bpp: float
    lr: float
    mean_m: float


class Trainer:
    """Seeded training loop over in-memory RGB-D pairs.

    Two runs constructed with equal configs and seeds follow identical
    trajectories; the guided/unguided comparison differs only in the
    ``depth_guided`` flag of the model config.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        pairs: Sequence[RgbdPair],
        out_dir,
    ):
        model_cfg.validate()
        train_cfg.validate(model_cfg)
        if not pairs:
            raise ValueError("training needs at least one RGB-D pair")
        size = train_cfg.crop_size
        for p in pairs:
            if p.image.height < size or p.image.width < size:
                raise ValueError(
                    f"pair {p.pair_id!r} is smaller than the {size}px crop"
                )
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        torch.manual_seed(train_cfg.seed)
        self.model = CodecModel(model_cfg)
        self.gen = torch.Generator().manual_seed(train_cfg.seed + 1)
        self.rng = np.random.default_rng(train_cfg.seed + 2)
        self.images = [p.image for p in pairs]
        self.aligned = [
            upsample_depth(p.depth, (p.image.height, p.image.width)) for p in pairs
        ]
        self.opt = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr)
        self.sched = torch.optim.lr_scheduler.StepLR(
            self.opt, train_cfg.lr_decay_step, train_cfg.lr_decay_gamma
        )
        self.step = 0
        self.skipped = 0
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out_dir / "train_log.jsonl"

    def sample_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        size = self.train_cfg.crop_size
        idx = self.rng.integers(0, len(self.images), self.train_cfg.batch_size)
        xs, ds = [], []
        for i in idx:
            crop_img, crop_depth = random_aligned_crop(
                self.images[i], self.aligned[i], size, self.rng
            )
            d = torch.from_numpy(crop_depth.values).unsqueeze(0)
            if self.rng.random() < self.train_cfg.depth_image_prob:
                # the codec also ships raw depth maps through its own image
                # path (replicated gray, no prompts); without these samples
                # the transform never learns to code the luminance axis
                xs.append(d.expand(3, size, size).clone())
                ds.append(torch.zeros_like(d))
            else:
                xs.append(torch.from_numpy(crop_img.values).permute(2, 0, 1))
                ds.append(d)
        return torch.stack(xs), torch.stack(ds)

    def train_step(self) -> StepStats | None:
        """One optimization step; returns None when the loss was non-finite."""
        cfg = self.train_cfg
        x, depth = self.sample_batch()
        m = torch.rand(x.shape[0], generator=self.gen)
        lam = lambda_from_control(m, cfg.lambda_min, cfg.lambda_max)
        out = self.model(x, m, depth, generator=self.gen)
        parts = rd_loss(x, out, lam)
        if not torch.isfinite(parts.loss):
            self.skipped += 1
            log.warning(
                "step %d: non-finite loss, skipping (%d skipped so far)",
                self.step + 1,
                self.skipped,
            )
            if self.skipped > MAX_SKIPPED_STEPS:
                raise RuntimeError(
                    f"aborting: {self.skipped} non-finite training steps"
                )
            return None
        self.opt.zero_grad()
        parts.loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        self.sched.step()
        self.step += 1
        return StepStats(
            step=self.step,
            loss=float(parts.loss.detach()),
            mse=parts.mse,
            bpp=parts.bpp,
            lr=self.sched.get_last_lr()[0],
            mean_m=float(m.mean()),
        )

    def _append_log(self, stats: StepStats) -> None:
        with open(self.log_path, "a") as f:
            f.write(json.dumps(stats.__dict__) + "\n")

    def run(self) -> Path:
        """Train to completion; returns the path of the final checkpoint."""
        cfg = self.train_cfg
        t0 = time.monotonic()
        while self.step < cfg.steps:
            stats = self.train_step()
            if stats is None:
                continue
            if stats.step % cfg.log_every == 0 or stats.step == cfg.steps:
                self._append_log(stats)
                log.info(
                    "step %d/%d loss=%.4f mse=%.5f bpp=%.3f lr=%.2e",
                    stats.step,
                    cfg.steps,
                    stats.loss,
                    stats.mse,
                    stats.bpp,
                    stats.lr,
                )
            if (
                cfg.checkpoint_every
                and stats.step % cfg.checkpoint_every == 0
                and stats.step < cfg.steps
            ):
                save_checkpoint(
                    self.out_dir / f"ckpt_{stats.step:06d}.pt",
                    self.model,
                    step=stats.step,
                )
        final = self.out_dir / "final.pt"
        save_checkpoint(
            final,
            self.model,
            step=self.step,
            extra={
                "train_config": config_to_dict(cfg),
                "skipped_steps": self.skipped,
                "wall_seconds": time.monotonic() - t0,
            },
        )
        return final


def train_model(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pairs: Sequence[RgbdPair],
    out_dir,
) -> Path:
    return Trainer(model_cfg, train_cfg, pairs, out_dir).run()
