"""Quality metrics, Bjontegaard deltas, and the four-scenario rate sweep.

Scenarios:
    no_lidar            plain coding, meant for the unguided baseline model
    uncompressed_lidar  condition on the true aligned depth map; the map is
                        assumed free (already present at both ends)
    compressed_lidar    self-compress the map into the stream; its bytes
                        count toward the rate
    random_map          condition on per-image fixed uniform noise, a
                        control for "any side channel helps"
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .bitstream import rgb_only_bytes
from .codec import ImageCodec
from .data import AlignedDepth, RgbdPair, RgbImage, upsample_depth

SCENARIOS = ("no_lidar", "uncompressed_lidar", "compressed_lidar", "random_map")
DEFAULT_M_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image metrics


def psnr(a: RgbImage, b: RgbImage) -> float:
    """Peak signal-to-noise ratio between 8-bit renderings, in dB."""
    x = a.to_uint8().astype(np.float64)
    y = b.to_uint8().astype(np.float64)
    if x.shape != y.shape:
        raise EvaluationError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(255.0**2 / mse)


def _luma(img: RgbImage) -> torch.Tensor:
    v = torch.from_numpy(img.to_uint8().astype(np.float64))
    r, g, b = v[..., 0], v[..., 1], v[..., 2]
    return (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(0).unsqueeze(0)


def _ssim_kernel() -> torch.Tensor:
    half = _SSIM_WINDOW // 2
    g = np.exp(-0.5 * ((np.arange(_SSIM_WINDOW) - half) / _SSIM_SIGMA) ** 2)
    g /= g.sum()
    k = np.outer(g, g)
    return torch.from_numpy(k).unsqueeze(0).unsqueeze(0)


def ssim(a: RgbImage, b: RgbImage) -> float:
    """Mean structural similarity of the luma channels on the 0..255 scale.

    Gaussian 11x11 window, no padding: images must be at least 11px a side.
    """
    x = _luma(a)
    y = _luma(b)
    if x.shape != y.shape:
        raise EvaluationError("shape mismatch")
    if min(x.shape[-2:]) < _SSIM_WINDOW:
        raise EvaluationError(f"images must be at least {_SSIM_WINDOW}px a side")
    kernel = _ssim_kernel()
    c1 = (_SSIM_K1 * 255.0) ** 2
    c2 = (_SSIM_K2 * 255.0) ** 2
    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    var_x = F.conv2d(x * x, kernel) - mu_x**2
    var_y = F.conv2d(y * y, kernel) - mu_y**2
    cov = F.conv2d(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# rate-distortion curves and Bjontegaard deltas


@dataclass(frozen=True)
class RdCurve:
    """A labeled curve of (bpp, psnr[, ssim]) points, sorted by rate."""

    label: str
    bpp: tuple[float, ...]
    psnr: tuple[float, ...]
    ssim: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.bpp) != len(self.psnr):
            raise EvaluationError("bpp and psnr lengths disagree")
        if self.ssim and len(self.ssim) != len(self.bpp):
            raise EvaluationError("ssim length disagrees")
        if len(self.bpp) < 2:
            raise EvaluationError("a curve needs at least two points")
        if any(r <= 0 for r in self.bpp):
            raise EvaluationError("rates must be positive")
        if any(b <= a for a, b in zip(self.bpp, self.bpp[1:])):
            raise EvaluationError("rates must be strictly increasing")
        if not all(map(math.isfinite, self.psnr)):
            raise EvaluationError("psnr values must be finite")

    @classmethod
    def from_points(cls, label: str, points: Sequence[tuple]) -> "RdCurve":
        """Build from unordered (bpp, psnr[, ssim]) tuples."""
        pts = sorted(points)
        bpp = tuple(p[0] for p in pts)
        qual = tuple(p[1] for p in pts)
        extra = tuple(p[2] for p in pts) if pts and len(pts[0]) > 2 else ()
        return cls(label=label, bpp=bpp, psnr=qual, ssim=extra)


def _fit_integral(x: np.ndarray, y: np.ndarray, lo: float, hi: float, method: str):
    """Mean of the fitted y(x) over [lo, hi]."""
    if method == "cubic":
        coeffs = np.polyfit(x, y, deg=min(3, len(x) - 1))
        anti = np.polyint(coeffs)
        area = np.polyval(anti, hi) - np.polyval(anti, lo)
    elif method == "pchip":
        from scipy.interpolate import PchipInterpolator

        order = np.argsort(x)
        xs, ys = x[order], y[order]
        if np.any(np.diff(xs) <= 0):
            raise EvaluationError("pchip needs strictly increasing support")
        anti = PchipInterpolator(xs, ys).antiderivative()
        area = float(anti(hi) - anti(lo))
    else:
        raise EvaluationError(f"unknown interpolation method {method!r}")
    return area / (hi - lo)


def bd_rate(reference: RdCurve, test: RdCurve, method: str = "cubic") -> float:
    """Average rate change of ``test`` against ``reference``, in percent.

    Negative means the test curve spends fewer bits for the same quality.
    """
    lo = max(min(reference.psnr), min(test.psnr))
    hi = min(max(reference.psnr), max(test.psnr))
    if hi <= lo:
        raise EvaluationError("curves share no quality range")
    mean_ref = _fit_integral(
        np.asarray(reference.psnr), np.log(reference.bpp), lo, hi, method
    )
    mean_test = _fit_integral(
        np.asarray(test.psnr), np.log(test.bpp), lo, hi, method
    )
    return (math.exp(mean_test - mean_ref) - 1.0) * 100.0


def bd_psnr(reference: RdCurve, test: RdCurve, method: str = "cubic") -> float:
    """Average quality change of ``test`` against ``reference``, in dB."""
    log_ref = np.log(reference.bpp)
    log_test = np.log(test.bpp)
    lo = max(log_ref.min(), log_test.min())
    hi = min(log_ref.max(), log_test.max())
    if hi <= lo:
        raise EvaluationError("curves share no rate range")
    mean_ref = _fit_integral(log_ref, np.asarray(reference.psnr), lo, hi, method)
    mean_test = _fit_integral(log_test, np.asarray(test.psnr), lo, hi, method)
    return mean_test - mean_ref


# ---------------------------------------------------------------------------
# scenario sweeps


@dataclass(frozen=True)
class MPoint:
    """Aggregate measurements at one rate-control setting."""

    m: float
    bpp: float
    rgb_bpp: float
    depth_bpp: float
    psnr: float
    ssim: float


@dataclass(frozen=True)
class ScenarioResult:
    scenario: str
    points: tuple[MPoint, ...]
    records: tuple[dict, ...] = field(repr=False)

    @property
    def curve(self) -> RdCurve:
        return RdCurve.from_points(
            self.scenario, [(p.bpp, p.psnr, p.ssim) for p in self.points]
        )

    @property
    def depth_share(self) -> float:
        """Mean fraction of the stream spent on the depth payload."""
        return float(
            np.mean([r["depth_bpp"] / r["bpp"] for r in self.records])
        )


def _random_map(h: int, w: int, seed: int, index: int) -> AlignedDepth:
    rng = np.random.default_rng((seed, index))
    return AlignedDepth(rng.uniform(0, 1, (h, w)).astype(np.float32))


def _encode_one(codec, pair, scenario, m, aligned, noise):
    img = pair.image
    if scenario == "no_lidar":
        res = codec.encode_image(img, m)
    elif scenario == "uncompressed_lidar":
        res = codec.encode_image(img, m, aligned)
    elif scenario == "compressed_lidar":
        res = codec.encode_image(img, m, embed_depth=pair.depth)
    else:
        res = codec.encode_image(img, m, noise)
    n_px = img.width * img.height
    rgb_bpp = 8.0 * rgb_only_bytes(res.container) / n_px
    total = res.bpp
    return {
        "scenario": scenario,
        "pair_id": pair.pair_id,
        "m": m,
        "bpp": total,
        "rgb_bpp": rgb_bpp,
        "depth_bpp": total - rgb_bpp,
        "psnr": psnr(img, res.recon),
        "ssim": ssim(img, res.recon),
        "bytes": len(res.data),
    }


def run_scenario(
    codec: ImageCodec,
    pairs: Sequence[RgbdPair],
    scenario: str,
    m_grid: Sequence[float] = DEFAULT_M_GRID,
    *,
    jobs: int = 1,
    seed: int = 0,
    records_path=None,
) -> ScenarioResult:
    """Sweep the rate-control grid over a test set under one scenario."""
    if scenario not in SCENARIOS:
        raise EvaluationError(f"unknown scenario {scenario!r}; pick from {SCENARIOS}")
    if not pairs:
        raise EvaluationError("need at least one test pair")
    if len(m_grid) < 2:
        raise EvaluationError("need at least two rate settings")

    aligned = [
        upsample_depth(p.depth, (p.image.height, p.image.width)) for p in pairs
    ]
    noise = [
        _random_map(p.image.height, p.image.width, seed, i)
        for i, p in enumerate(pairs)
    ]

    tasks = [
        (mi, pi, m, pair)
        for mi, m in enumerate(m_grid)
        for pi, pair in enumerate(pairs)
    ]

    def work(task):
        mi, pi, m, pair = task
        return (mi, pi), _encode_one(
            codec, pair, scenario, m, aligned[pi], noise[pi]
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            keyed = dict(pool.map(work, tasks))
    else:
        keyed = dict(map(work, tasks))

    records = [keyed[(mi, pi)] for mi in range(len(m_grid)) for pi in range(len(pairs))]
    points = []
    for mi, m in enumerate(m_grid):
        batch = records[mi * len(pairs) : (mi + 1) * len(pairs)]
        points.append(
            MPoint(
                m=float(m),
                bpp=float(np.mean([r["bpp"] for r in batch])),
                rgb_bpp=float(np.mean([r["rgb_bpp"] for r in batch])),
                depth_bpp=float(np.mean([r["depth_bpp"] for r in batch])),
                psnr=float(np.mean([r["psnr"] for r in batch])),
                ssim=float(np.mean([r["ssim"] for r in batch])),
            )
        )
    if records_path is not None:
        path = Path(records_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")
    return ScenarioResult(
        scenario=scenario, points=tuple(points), records=tuple(records)
    )


# ---------------------------------------------------------------------------
# reporting


def curve_table(curves: Sequence[RdCurve]) -> str:
    """Byte-deterministic text rendering of a set of curves."""
    lines = ["# rd-curves v1", "# label\tpoint\tbpp\tpsnr_db\tssim"]
    for c in curves:
        for i in range(len(c.bpp)):
            s = f"{c.ssim[i]:.6f}" if c.ssim else "-"
            lines.append(
                f"{c.label}\t{i}\t{c.bpp[i]:.6f}\t{c.psnr[i]:.6f}\t{s}"
            )
    return "\n".join(lines) + "\n"


def save_rd_plot(curves: Sequence[RdCurve], png_path, txt_path=None) -> None:
    """Write an RD plot image plus a deterministic text sidecar."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5), dpi=120)
    for c in curves:
        ax.plot(c.bpp, c.psnr, marker="o", label=c.label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path)
    plt.close(fig)
    if txt_path is not None:
        Path(txt_path).write_text(curve_table(curves))
