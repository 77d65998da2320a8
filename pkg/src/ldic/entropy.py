"""Entropy models for the codec's two latent tensors.

The hyper-latent z is coded with a learned per-channel factorized prior; the
main latent y with a conditional Gaussian whose mean and scale come from the
hyper decoder.  Training uses additive uniform noise as the quantization
proxy and exact (differentiable) likelihoods; coding uses integer rounding
and frozen 16-bit CDF tables so that estimated and spent bits agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.special
import scipy.stats
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rangecoder import PRECISION, TOTAL, CdfTable, range_decode, range_encode

LIKELIHOOD_FLOOR = 1e-9
# Integer support search is capped; latents beyond this are clamped anyway.
_SUPPORT_CAP = 4096


class EntropyModelError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# quantization


def round_half_away(x):
    """Round to the nearest integer, halves away from zero."""
    if isinstance(x, torch.Tensor):
        return torch.trunc(x + torch.copysign(torch.tensor(0.5, dtype=x.dtype), x))
    x = np.asarray(x)
    return np.trunc(x + np.copysign(0.5, x))


def quantize(x: torch.Tensor, mode: str = "round", *, generator=None, noise=None):
    """Quantize a latent tensor.

    ``round`` is the inference path (integers, half away from zero).
    ``noise`` is the training proxy: adds u ~ U[-0.5, 0.5) drawn from
    ``generator``, or the caller-supplied ``noise`` tensor (used by the
    finite-difference gradient checks, which need a smooth forward).
    """
    if mode == "round":
        return round_half_away(x)
    if mode == "noise":
        if noise is None:
            noise = torch.rand(
                x.shape, generator=generator, dtype=x.dtype, device=x.device
            ) - 0.5
        return x + noise
    raise ValueError(f"unknown quantize mode {mode!r}")


# ---------------------------------------------------------------------------
# rate bookkeeping


@dataclass(frozen=True)
class RateEstimate:
    """Estimated code length in bits, split by latent tensor."""

    y_bits: float
    z_bits: float

    @property
    def total_bits(self) -> float:
        return self.y_bits + self.z_bits

    def bpp(self, height: int, width: int) -> float:
        return self.total_bits / (height * width)


def likelihood_bits(likelihood: torch.Tensor) -> torch.Tensor:
    """Total bits per batch element from a likelihood tensor (B, C, H, W)."""
    return -torch.log2(likelihood).flatten(1).sum(dim=1)


# ---------------------------------------------------------------------------
# Gaussian conditional (training-time, differentiable)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return torch.special.ndtr(x)


def gaussian_likelihood(
    value: torch.Tensor, mean: torch.Tensor, scale: torch.Tensor
) -> torch.Tensor:
    """Probability of the unit-width bin around ``value`` under N(mean, scale).

    Evaluated on the folded tail side to avoid catastrophic cancellation for
    values far from the mean.  Result is floored at ``LIKELIHOOD_FLOOR``.
    """
    centered = torch.abs(value - mean)
    upper = _std_normal_cdf((0.5 - centered) / scale)
    lower = _std_normal_cdf((-0.5 - centered) / scale)
    return torch.clamp_min(upper - lower, LIKELIHOOD_FLOOR)


def make_scale_table(lo: float, hi: float, levels: int) -> np.ndarray:
    """Geometric grid of coding scales from ``lo`` to ``hi``."""
    return np.exp(np.linspace(math.log(lo), math.log(hi), levels))


# ---------------------------------------------------------------------------
# quantized CDF tables


def pmf_to_cdf_table(pmf: np.ndarray, offset: int) -> CdfTable:
    """Freeze a float pmf into 16-bit cumulative counts.

    Every bin keeps at least one count so in-support symbols stay codable;
    the total is forced to exactly 2**16 by adjusting the largest bins.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0 or pmf.size > TOTAL // 2:
        raise EntropyModelError("pmf must be a short 1-D array")
    total_mass = pmf.sum()
    if not np.isfinite(total_mass) or total_mass <= 0:
        raise EntropyModelError("degenerate pmf")
    counts = np.maximum(1, np.round(pmf / total_mass * TOTAL)).astype(np.int64)
    diff = TOTAL - int(counts.sum())
    while diff != 0:
        i = int(np.argmax(counts))
        if diff > 0:
            counts[i] += diff
            diff = 0
        else:
            take = min(counts[i] - 1, -diff)
            if take == 0:
                raise EntropyModelError("pmf has too many bins to quantize")
            counts[i] -= take
            diff += take
    cdf = (0, *np.cumsum(counts).tolist())
    return CdfTable(cdf=cdf, offset=offset)


class _TableBank:
    """A set of frozen CDF tables plus vectorized symbol/byte helpers."""

    def __init__(self, tables: list[CdfTable]):
        self.tables = tables
        self._lo = np.array([t.offset for t in tables], dtype=np.int64)
        self._hi = np.array(
            [t.offset + t.num_bins - 1 for t in tables], dtype=np.int64
        )
        self._bits = [
            PRECISION - np.log2(np.diff(np.asarray(t.cdf, dtype=np.float64)))
            for t in tables
        ]

    def clamp(self, values: np.ndarray, indexes: np.ndarray) -> np.ndarray:
        """Clamp integer latents into each element's table support."""
        return np.clip(values, self._lo[indexes], self._hi[indexes])

    def bits(self, symbols: np.ndarray, indexes: np.ndarray) -> float:
        """Table-exact code length estimate, in bits."""
        total = 0.0
        bits = self._bits
        lo = self._lo
        for s, i in zip(symbols.tolist(), indexes.tolist()):
            total += bits[i][s - lo[i]]
        return float(total)

    def encode(self, symbols: np.ndarray, indexes: np.ndarray) -> bytes:
        return range_encode(symbols.tolist(), self.tables, indexes.tolist())

    def decode(self, data: bytes, indexes: np.ndarray) -> np.ndarray:
        out = range_decode(data, self.tables, indexes.tolist())
        return np.asarray(out, dtype=np.int64)

    @staticmethod
    def _tables_state(tables: list[CdfTable]) -> list:
        return [(t.cdf, t.offset) for t in tables]

    @staticmethod
    def _tables_from_state(state: list) -> list[CdfTable]:
        return [CdfTable(cdf=tuple(c), offset=int(o)) for c, o in state]


class GaussianCoder(_TableBank):
    """Frozen bin distributions for the conditional Gaussian.

    One table per (scale level, mean fractional offset) pair.  Coding maps
    each latent to the residual against the rounded mean; the fractional part
    of the mean is absorbed by the offset grid so the frozen pmf tracks
    Phi((v + 0.5 - mu) / sigma) - Phi((v - 0.5 - mu) / sigma) closely, with
    the tails folded into the extreme bins.
    """

    def __init__(
        self,
        scale_table: np.ndarray,
        mean_levels: int,
        tail_mass: float,
        _tables: list[CdfTable] | None = None,
    ):
        self.scale_table = np.asarray(scale_table, dtype=np.float64)
        self.mean_levels = int(mean_levels)
        self.tail_mass = float(tail_mass)
        if _tables is not None:
            super().__init__(_tables)
            return
        tail_q = scipy.stats.norm.ppf(1.0 - tail_mass / 2.0)
        tables = []
        for sigma in self.scale_table:
            half_width = max(1, int(math.ceil(sigma * tail_q + 0.5)))
            v = np.arange(-half_width, half_width + 1, dtype=np.float64)
            for j in range(self.mean_levels):
                frac = (j + 0.5) / self.mean_levels - 0.5
                upper = scipy.special.ndtr((v + 0.5 - frac) / sigma)
                lower = scipy.special.ndtr((v - 0.5 - frac) / sigma)
                pmf = upper - lower
                pmf[0] += lower[0]
                pmf[-1] += 1.0 - upper[-1]
                tables.append(pmf_to_cdf_table(pmf, offset=-half_width))
        super().__init__(tables)

    def state(self) -> dict:
        return {
            "scale_table": self.scale_table.tolist(),
            "mean_levels": self.mean_levels,
            "tail_mass": self.tail_mass,
            "tables": self._tables_state(self.tables),
        }

    @classmethod
    def from_state(cls, state: dict) -> "GaussianCoder":
        return cls(
            np.asarray(state["scale_table"], dtype=np.float64),
            state["mean_levels"],
            state["tail_mass"],
            _tables=cls._tables_from_state(state["tables"]),
        )

    def element_tables(
        self, mean: np.ndarray, scale: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Map per-element (mean, scale) to (table indexes, rounded means)."""
        mean = np.asarray(mean, dtype=np.float64).ravel()
        scale = np.asarray(scale, dtype=np.float64).ravel()
        k = np.searchsorted(self.scale_table, scale, side="left")
        k = np.minimum(k, len(self.scale_table) - 1)
        mean_int = np.floor(mean + 0.5)
        frac = mean - mean_int
        j = np.floor((frac + 0.5) * self.mean_levels).astype(np.int64)
        j = np.clip(j, 0, self.mean_levels - 1)
        return k * self.mean_levels + j, mean_int.astype(np.int64)


class FactorizedCoder(_TableBank):
    """Frozen per-channel tables for the factorized prior."""

    def __init__(self, tables: list[CdfTable]):
        super().__init__(tables)

    def state(self) -> list:
        return self._tables_state(self.tables)

    @classmethod
    def from_state(cls, state: list) -> "FactorizedCoder":
        return cls(cls._tables_from_state(state))

    def element_tables(self, shape: tuple[int, ...]) -> np.ndarray:
        """Channel index per element for a (B, C, H, W) tensor, C-order."""
        b, c, h, w = shape
        if c != len(self.tables):
            raise EntropyModelError("channel count disagrees with tables")
        return np.tile(np.repeat(np.arange(c, dtype=np.int64), h * w), b)


# ---------------------------------------------------------------------------
# learned factorized prior


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF over the hyper-latent, monotone by construction.

    Each channel owns a small stack of 1-D monotone maps; the composition's
    sigmoid is the channel CDF.  Softplus-reparameterized matrices keep every
    layer nondecreasing, and the tanh gating factors keep derivatives
    strictly positive, so bin probabilities are well defined after every
    training step.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1, *self.filters, 1)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            m = nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init))
            self._matrices.append(m)
            b = nn.Parameter(torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5))
            self._biases.append(b)
            if k < len(dims) - 2:
                self._factors.append(
                    nn.Parameter(torch.zeros(channels, dims[k + 1], 1))
                )

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: (C, 1, N) -> (C, 1, N)
        for k in range(len(self._matrices)):
            x = torch.matmul(F.softplus(self._matrices[k]), x) + self._biases[k]
            if k < len(self._factors):
                x = x + torch.tanh(self._factors[k]) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """Channel CDF at ``x`` of shape (C, N)."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, x: torch.Tensor) -> torch.Tensor:
        """Bin probability around each element of ``x`` (B, C, H, W)."""
        b, c, h, w = x.shape
        if c != self.channels:
            raise EntropyModelError("channel count mismatch")
        flat = x.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(
            torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)
        )
        lik = torch.clamp_min(lik, LIKELIHOOD_FLOOR)
        return lik.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def build_coder(self, tail_mass: float) -> FactorizedCoder:
        """Freeze the current prior into per-channel 16-bit tables.

        Per channel the integer support is the tightest [lo, hi] whose bin
        edges cross tail_mass/2 and 1 - tail_mass/2, found by scanning the
        monotone CDF on a doubling grid; leftover tail mass folds into the
        extreme bins.
        """
        dtype = next(self.parameters()).dtype
        bound = 8
        while bound < _SUPPORT_CAP:
            probe = torch.tensor([-bound - 0.5, bound + 0.5], dtype=dtype)
            cdf = self.cdf(probe.expand(self.channels, 2))
            if bool((cdf[:, 0] <= tail_mass / 2).all()) and bool(
                (cdf[:, 1] >= 1.0 - tail_mass / 2).all()
            ):
                break
            bound *= 2
        bound = min(bound, _SUPPORT_CAP)

        values = np.arange(-bound, bound + 1, dtype=np.int64)
        grid = torch.arange(-bound, bound + 1, dtype=dtype)
        lower = self.cdf((grid - 0.5).expand(self.channels, -1)).cpu().numpy()
        upper = self.cdf((grid + 0.5).expand(self.channels, -1)).cpu().numpy()
        tables = []
        for c in range(self.channels):
            in_lo = values[lower[c] <= tail_mass / 2]
            in_hi = values[upper[c] >= 1.0 - tail_mass / 2]
            lo = int(in_lo[-1]) if in_lo.size else -bound
            hi = int(in_hi[0]) if in_hi.size else bound
            if lo > hi:
                lo = hi = 0
            sel = slice(lo + bound, hi + bound + 1)
            pmf = (upper[c, sel] - lower[c, sel]).astype(np.float64)
            pmf[0] += float(lower[c, lo + bound])
            pmf[-1] += 1.0 - float(upper[c, hi + bound])
            tables.append(pmf_to_cdf_table(pmf, offset=lo))
        return FactorizedCoder(tables)
