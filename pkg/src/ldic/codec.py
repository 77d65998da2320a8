"""Whole-image coding on top of a trained model and frozen entropy tables.

The encoder runs the decoder's reconstruction path on the symbols it just
coded, so the image it reports and the image a decoder recovers from the
stream are bit-identical.  A depth map can be supplied out of band (the
decoder must then be handed the same map) or self-compressed and embedded in
the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .bitstream import (
    M_LAMBDA_SCALE,
    CompressedImage,
    m_lambda_to_fixed,
    parse,
    serialize,
)
from .bitstream import bpp as stream_bpp
from .data import DEPTH_MAX_METERS, AlignedDepth, DepthMap, RgbImage
from .entropy import RateEstimate, round_half_away
from .model import CodecModel, LoadedCheckpoint
from .rangecoder import RangeCoderError


class CodecError(RuntimeError):
    """Coding failed: mismatched inputs, corrupt payloads, or bad state."""


def _pad_to_multiple(t: torch.Tensor, mult: int) -> torch.Tensor:
    """Pad (..., H, W) on the bottom/right to multiples of ``mult``.

    Reflection padding when the image is large enough, edge replication for
    inputs smaller than the padding itself.
    """
    h, w = t.shape[-2:]
    pad_h = (mult - h % mult) % mult
    pad_w = (mult - w % mult) % mult
    if not pad_h and not pad_w:
        return t
    mode = "reflect" if (pad_h < h and pad_w < w) else "replicate"
    return F.pad(t, (0, pad_w, 0, pad_h), mode=mode)


def _upsample01(values: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize a [0,1] map; encoder and decoder share this exact op."""
    if values.shape == tuple(target):
        return values
    t = torch.from_numpy(values)[None, None]
    t = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)
    return np.clip(t[0, 0].numpy(), 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class EncodeResult:
    container: CompressedImage
    data: bytes
    recon: RgbImage
    rate: RateEstimate
    depth_recon: AlignedDepth | None = None

    @property
    def bpp(self) -> float:
        return stream_bpp(self.container)


@dataclass(frozen=True)
class DecodeResult:
    recon: RgbImage
    m_lambda: float
    container: CompressedImage


class ImageCodec:
    """Stateless encode/decode around one model plus its frozen tables."""

    def __init__(self, model: CodecModel, z_coder, y_coder):
        self.model = model.eval()
        self.z_coder = z_coder
        self.y_coder = y_coder

    @classmethod
    def from_checkpoint(cls, ckpt: LoadedCheckpoint) -> "ImageCodec":
        return cls(ckpt.model, ckpt.z_coder, ckpt.y_coder)

    @property
    def guided(self) -> bool:
        return self.model.cfg.depth_guided

    # -- shared tensor-level paths -------------------------------------------

    def _code_tensor(self, x, m_snap, depth):
        """Code one padded (1, C, Hp, Wp) tensor; returns payloads and the
        decoder-identical reconstruction."""
        model = self.model
        b, _, hp, wp = x.shape
        lam_full, lam_down = model.lambda_maps(m_snap, b, hp, wp, x.dtype, x.device)
        enc_p = model.encoder_prompts(x, lam_full, depth)
        y = model.analysis_transform(x, enc_p)
        z = model.hyper_analysis(y)

        z_idx = self.z_coder.element_tables(tuple(z.shape))
        z_int = round_half_away(z).numpy().astype(np.int64).ravel()
        z_sym = self.z_coder.clamp(z_int, z_idx)
        payload_z = self.z_coder.encode(z_sym, z_idx)
        # continue from the decoded symbols so both ends see the same values
        z_dec = self.z_coder.decode(payload_z, z_idx)
        z_hat = torch.from_numpy(
            z_dec.reshape(z.shape).astype(np.float32)
        )

        mean, scale = model.hyper_synthesis(z_hat)
        if not bool(torch.isfinite(mean).all() and torch.isfinite(scale).all()):
            raise CodecError("model produced non-finite Gaussian parameters")
        y_idx, mean_int = self.y_coder.element_tables(
            mean.numpy(), scale.numpy()
        )
        y_int = round_half_away(y).numpy().astype(np.int64).ravel()
        y_sym = self.y_coder.clamp(y_int - mean_int, y_idx)
        payload_y = self.y_coder.encode(y_sym, y_idx)
        y_hat = torch.from_numpy(
            (y_sym + mean_int).reshape(y.shape).astype(np.float32)
        )

        dec_p = model.decoder_prompts(y_hat, lam_down, depth)
        x_hat = model.synthesis_transform(y_hat, dec_p)
        rate = RateEstimate(
            y_bits=self.y_coder.bits(y_sym, y_idx),
            z_bits=self.z_coder.bits(z_sym, z_idx),
        )
        return payload_z, payload_y, x_hat, rate

    def _decode_tensor(self, c: CompressedImage, depth):
        """Reconstruct the padded (1, C, Hp, Wp) image from a container."""
        model = self.model
        mult = model.cfg.pad_multiple
        hp = math.ceil(c.height / mult) * mult
        wp = math.ceil(c.width / mult) * mult
        z_shape = (1, model.cfg.hyper_channels, hp // 64, wp // 64)
        y_shape = (1, model.cfg.latent_channels, hp // 16, wp // 16)

        z_idx = self.z_coder.element_tables(z_shape)
        try:
            z_dec = self.z_coder.decode(c.payload_z, z_idx)
        except RangeCoderError as e:
            raise CodecError(f"corrupt hyper-latent payload: {e}") from e
        z_hat = torch.from_numpy(z_dec.reshape(z_shape).astype(np.float32))

        mean, scale = model.hyper_synthesis(z_hat)
        if not bool(torch.isfinite(mean).all() and torch.isfinite(scale).all()):
            raise CodecError("model produced non-finite Gaussian parameters")
        y_idx, mean_int = self.y_coder.element_tables(mean.numpy(), scale.numpy())
        try:
            y_sym = self.y_coder.decode(c.payload_y, y_idx)
        except RangeCoderError as e:
            raise CodecError(f"corrupt latent payload: {e}") from e
        y_hat = torch.from_numpy(
            (y_sym + mean_int).reshape(y_shape).astype(np.float32)
        )

        _, lam_down = model.lambda_maps(c.m_lambda, 1, hp, wp, torch.float32)
        dec_p = model.decoder_prompts(y_hat, lam_down, depth)
        return model.synthesis_transform(y_hat, dec_p)

    # -- depth side-channel -----------------------------------------------------

    def compress_depth_map(
        self, raw: DepthMap, target: tuple[int, int]
    ) -> tuple[bytes, AlignedDepth]:
        """Self-compress a sensor-resolution depth map at the highest-rate
        setting.

        The normalized map is replicated to three channels and coded by the
        image model at its native grid, without any depth conditioning; the
        reconstruction is then aligned to ``target``.  Coding at sensor
        resolution keeps the depth payload a small fraction of the image
        stream.  Returns the embeddable payload and the aligned
        reconstruction the decoder will recover from it.
        """
        norm = np.clip(raw.values / DEPTH_MAX_METERS, 0.0, 1.0).astype(
            np.float32
        )
        h, w = norm.shape
        x = torch.from_numpy(norm).expand(3, h, w).unsqueeze(0)
        x = _pad_to_multiple(x, self.model.cfg.pad_multiple)
        with torch.no_grad():
            payload_z, payload_y, x_hat, _ = self._code_tensor(x, 1.0, None)
        inner = CompressedImage(
            width=w,
            height=h,
            m_lambda_fixed=M_LAMBDA_SCALE,
            depth_guided=False,
            payload_z=payload_z,
            payload_y=payload_y,
        )
        recon = x_hat[0, :, :h, :w].mean(dim=0).numpy().astype(np.float32)
        recon = np.clip(recon, 0.0, 1.0)
        return serialize(inner), AlignedDepth(_upsample01(recon, target))

    def decode_depth_payload(
        self, payload: bytes, target: tuple[int, int]
    ) -> AlignedDepth:
        inner = parse(payload)
        if inner.depth_guided or inner.payload_depth is not None:
            raise CodecError("embedded depth streams must be unconditioned")
        with torch.no_grad():
            x_hat = self._decode_tensor(inner, None)
        recon = (
            x_hat[0, :, : inner.height, : inner.width]
            .mean(dim=0)
            .numpy()
            .astype(np.float32)
        )
        recon = np.clip(recon, 0.0, 1.0)
        return AlignedDepth(_upsample01(recon, target))

    # -- public image api ---------------------------------------------------------

    def encode_image(
        self,
        image: RgbImage,
        m_lambda: float,
        depth: AlignedDepth | None = None,
        *,
        embed_depth: DepthMap | None = None,
    ) -> EncodeResult:
        """Encode one image, optionally conditioned on depth.

        ``depth`` is an image-aligned map the decoder must also be handed;
        ``embed_depth`` is a sensor-resolution map that gets self-compressed
        into the stream instead (the two are mutually exclusive).
        """
        if (depth is not None or embed_depth is not None) and not self.guided:
            raise CodecError("this model was trained without depth guidance")
        if depth is not None and embed_depth is not None:
            raise CodecError(
                "pass an aligned map or embed a raw one, not both"
            )
        h, w = image.height, image.width
        m_fixed = m_lambda_to_fixed(m_lambda)
        m_snap = m_fixed / M_LAMBDA_SCALE

        depth_payload = None
        depth_recon = None
        depth_used = depth
        if embed_depth is not None:
            depth_payload, depth_recon = self.compress_depth_map(
                embed_depth, (h, w)
            )
            # condition on the reconstruction: it is all the decoder will have
            depth_used = depth_recon

        x = torch.from_numpy(image.values).permute(2, 0, 1).unsqueeze(0)
        x = _pad_to_multiple(x, self.model.cfg.pad_multiple)
        d_t = None
        if depth_used is not None:
            if depth_used.values.shape != (h, w):
                raise CodecError(
                    f"depth grid {depth_used.values.shape} does not match "
                    f"the {h}x{w} image"
                )
            d_t = _pad_to_multiple(
                torch.from_numpy(depth_used.values)[None, None],
                self.model.cfg.pad_multiple,
            )
        with torch.no_grad():
            payload_z, payload_y, x_hat, rate = self._code_tensor(x, m_snap, d_t)
        container = CompressedImage(
            width=w,
            height=h,
            m_lambda_fixed=m_fixed,
            depth_guided=depth_used is not None,
            payload_z=payload_z,
            payload_y=payload_y,
            payload_depth=depth_payload,
        )
        recon = RgbImage(
            x_hat[0, :, :h, :w].permute(1, 2, 0).numpy().astype(np.float32)
        )
        return EncodeResult(
            container=container,
            data=serialize(container),
            recon=recon,
            rate=rate,
            depth_recon=depth_recon,
        )

    def decode_image(
        self, data, depth: AlignedDepth | None = None
    ) -> DecodeResult:
        c = data if isinstance(data, CompressedImage) else parse(bytes(data))
        depth_used = None
        if c.depth_guided:
            if not self.guided:
                raise CodecError(
                    "stream was coded with depth guidance; this model has none"
                )
            if c.payload_depth is not None:
                depth_used = self.decode_depth_payload(
                    c.payload_depth, (c.height, c.width)
                )
            elif depth is not None:
                depth_used = depth
            else:
                raise CodecError(
                    "stream was coded against a depth map: pass the same map "
                    "or use a stream with an embedded one"
                )
            if depth_used.values.shape != (c.height, c.width):
                raise CodecError(
                    f"depth grid {depth_used.values.shape} does not match "
                    f"the {c.height}x{c.width} stream"
                )
        d_t = None
        if depth_used is not None:
            d_t = _pad_to_multiple(
                torch.from_numpy(depth_used.values)[None, None],
                self.model.cfg.pad_multiple,
            )
        with torch.no_grad():
            x_hat = self._decode_tensor(c, d_t)
        recon = RgbImage(
            x_hat[0, :, : c.height, : c.width]
            .permute(1, 2, 0)
            .numpy()
            .astype(np.float32)
        )
        return DecodeResult(recon=recon, m_lambda=c.m_lambda, container=c)
