"""Acceptance gates for the depth-guided variable-rate codec.

Ten numbered end-to-end checks: coder fidelity (1-3), gradient correctness
(4), shape rules (5), the trained desk-scale experiment (6-9), and
Bjontegaard exactness (10).  Each test emits one PASS/FAIL line through the
terminal summary, so a plain ``pytest -v`` run shows every verdict.

Tests 6-9 share the session-scoped trained models from conftest; the first
run of a fresh tree trains two toy models (a few minutes of CPU), later
runs reuse tests/_cache.
"""

import time

import numpy as np
import torch

import conftest
from gradcheck import rd_grad_errors
from ldic.bitstream import BitstreamError, CompressedImage, parse, serialize
from ldic.codec import ImageCodec, _pad_to_multiple
from ldic.config import tiny_model, toy_model
from ldic.data import RgbImage, synth_rgbd
from ldic.entropy import gaussian_likelihood, likelihood_bits
from ldic.evaluation import RdCurve, bd_psnr, bd_rate
from ldic.model import CodecModel
from ldic.rangecoder import TOTAL, CdfTable, range_decode, range_encode


def _record(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _strictly_increasing(xs) -> bool:
    return all(b > a for a, b in zip(xs, xs[1:]))


def _toy_codec(seed: int = 0) -> ImageCodec:
    torch.manual_seed(seed)
    model = CodecModel(toy_model())
    z_coder, y_coder = model.freeze_coders()
    return ImageCodec(model, z_coder, y_coder)


def _random_table(rng) -> CdfTable:
    bins = int(rng.integers(2, 65))
    # every bin keeps at least one count so the cdf stays strictly increasing
    counts = 1 + rng.multinomial(TOTAL - bins, rng.dirichlet(np.ones(bins)))
    cdf = np.concatenate(([0], np.cumsum(counts)))
    return CdfTable(tuple(int(c) for c in cdf), int(rng.integers(-64, 64)))


def test_01_entropy_round_trip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(1000):
        tables = [_random_table(rng) for _ in range(int(rng.integers(1, 9)))]
        n = int(rng.integers(1, 513))
        indexes = rng.integers(0, len(tables), size=n)
        spans = np.array([t.num_bins for t in tables])
        offs = np.array([t.offset for t in tables])
        symbols = offs[indexes] + (rng.random(n) * spans[indexes]).astype(int)
        decoded = range_decode(
            range_encode(symbols, tables, indexes), tables, indexes
        )
        if list(symbols) != list(decoded):
            failures += 1
    elapsed = time.perf_counter() - t0
    _record(
        1,
        failures == 0 and elapsed < 60.0,
        f"1000 randomized table/symbol round trips, {failures} failures, "
        f"{elapsed:.1f} s",
    )


def test_02_rate_estimate_matches_stream():
    codec = _toy_codec(seed=2)
    rng = np.random.default_rng(2)
    worst = 0.0
    ok = True
    for i in range(100):
        pair = synth_rgbd(1000 + i, size=64)
        res = codec.encode_image(pair.image, float(rng.random()))
        actual = 8 * (len(res.data) - 20)  # container header excluded
        est = res.rate.total_bits
        budget = 0.01 * est + 256.0
        worst = max(worst, abs(actual - est) - 0.01 * est)
        ok = ok and abs(actual - est) <= budget
    _record(
        2,
        ok,
        f"100 toy encodes, stream bits within 1% + 256 of the estimate "
        f"(worst excess beyond 1%: {worst:.0f} bits)",
    )


def _random_container(rng, with_depth: bool) -> CompressedImage:
    def blob(limit=64):
        return bytes(rng.integers(0, 256, size=int(rng.integers(0, limit))))

    depth = None
    if with_depth:
        depth = serialize(
            CompressedImage(
                width=int(rng.integers(1, 512)),
                height=int(rng.integers(1, 512)),
                m_lambda_fixed=int(rng.integers(0, 65536)),
                depth_guided=False,
                payload_z=blob(),
                payload_y=blob(),
            )
        )
    return CompressedImage(
        width=int(rng.integers(1, 512)),
        height=int(rng.integers(1, 512)),
        m_lambda_fixed=int(rng.integers(0, 65536)),
        depth_guided=bool(rng.integers(0, 2)),
        payload_z=blob(),
        payload_y=blob(),
        payload_depth=depth,
    )


def test_03_bitstream_fuzz():
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(10_000):
        c = _random_container(rng, with_depth=(i % 4 == 0))
        data = serialize(c)
        back = parse(data)
        if back != c or serialize(back) != data:
            mismatches += 1

    # corruption and truncation must fail with the bitstream error class
    ref = serialize(_random_container(rng, with_depth=True))
    rejected = 0
    cases = 0

    def expect_reject(buf: bytes):
        nonlocal rejected, cases
        cases += 1
        try:
            parse(buf)
        except BitstreamError:
            rejected += 1

    for cut in range(len(ref)):
        expect_reject(ref[:cut])
    expect_reject(ref + b"\0")
    expect_reject(b"JUNK" + ref[4:])
    expect_reject(ref[:4] + b"\x63" + ref[5:])  # unknown version
    expect_reject(ref[:5] + b"\x80" + ref[6:])  # reserved flag bit
    for pos in (12, 16, 20):  # declared payload lengths beyond the buffer
        expect_reject(ref[:pos] + b"\xff" * 4 + ref[pos + 4 :])
    _record(
        3,
        mismatches == 0 and rejected == cases,
        f"10000 serialize/parse round trips bit-exact ({mismatches} "
        f"mismatches); {rejected}/{cases} corrupt streams rejected",
    )


def test_04_gradient_checks():
    torch.manual_seed(4)
    gen = torch.Generator().manual_seed(4)
    shape = (1, 64)
    y = torch.randn(
        shape, generator=gen, dtype=torch.float64, requires_grad=True
    )
    mean = torch.randn(
        shape, generator=gen, dtype=torch.float64, requires_grad=True
    )
    scale = (
        0.2 + torch.rand(shape, generator=gen, dtype=torch.float64)
    ).requires_grad_(True)

    def bits(y_, mean_, scale_):
        return likelihood_bits(gaussian_likelihood(y_, mean_, scale_)).sum()

    bits(y, mean, scale).backward()
    eps = 1e-5
    worst_g = 0.0
    for k, t in enumerate((y, mean, scale)):
        for i in range(0, 64, 7):
            shifted = t.detach().clone()
            shifted[0, i] += eps
            args = [x.detach() for x in (y, mean, scale)]
            args[k] = shifted
            hi = bits(*args).item()
            shifted[0, i] -= 2 * eps
            lo = bits(*args).item()
            fd = (hi - lo) / (2 * eps)
            g = t.grad[0, i].item()
            worst_g = max(worst_g, abs(g - fd) / max(abs(g), abs(fd), 1e-9))

    torch.manual_seed(4)
    model = CodecModel(tiny_model())
    x = torch.rand(1, 3, 64, 64, generator=gen)
    depth = torch.rand(1, 1, 64, 64, generator=gen)
    errors = rd_grad_errors(model, x, 0.5, depth, n_params=8, seed=4)
    worst_rd = max(e for _, e, _, _ in errors)
    _record(
        4,
        worst_g < 1e-3 and worst_rd < 1e-2,
        f"finite differences: gaussian likelihood rel err {worst_g:.2e} "
        f"(< 1e-3), rd loss rel err {worst_rd:.2e} (< 1e-2)",
    )


def test_05_shape_rules():
    codec = _toy_codec(seed=5)
    model = codec.model
    cfg = model.cfg
    sizes = [(64, 64), (128, 64), (64, 192), (100, 36), (160, 96)]
    checked = []
    ok = True
    for h, w in sizes:
        x = torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(5))
        xp = _pad_to_multiple(x, cfg.pad_multiple)
        hp, wp = xp.shape[-2:]
        with torch.no_grad():
            out = model(xp, 0.5, None, noise_y=0.0, noise_z=0.0)
        ok = (
            ok
            and out["y"].shape == (1, cfg.latent_channels, hp // 16, wp // 16)
            and out["z"].shape == (1, cfg.hyper_channels, hp // 64, wp // 64)
            and out["x_hat"].shape == xp.shape
            and hp % 64 == 0
            and wp % 64 == 0
        )
        # the coded stream must reproduce the original (unpadded) geometry
        recon = codec.decode_image(
            codec.encode_image(_rand_image(h, w), 0.5).data
        ).recon
        ok = ok and recon.values.shape == (h, w, 3)
        checked.append(f"{h}x{w}")
    _record(
        5,
        ok,
        "latent H/16, hyper H/64, channel widths and output geometry hold "
        "for " + ", ".join(checked),
    )


def _rand_image(h: int, w: int) -> RgbImage:
    rng = np.random.default_rng((h, w))
    return RgbImage(rng.random((h, w, 3), dtype=np.float32))


def test_06_variable_rate_monotone(experiment_report):
    rows = []
    ok = True
    for name in ("no_lidar", "uncompressed_lidar"):
        pts = experiment_report.results[name].points
        bpps = [p.bpp for p in pts]
        psnrs = [p.psnr for p in pts]
        ok = ok and _strictly_increasing(bpps) and _strictly_increasing(psnrs)
        rows.append(
            f"{name} bpp {bpps[0]:.3f}->{bpps[-1]:.3f} "
            f"psnr {psnrs[0]:.2f}->{psnrs[-1]:.2f}"
        )
    _record(
        6,
        ok,
        "mean bpp and psnr strictly increasing over the m grid: "
        + "; ".join(rows),
    )


def test_07_depth_guidance_gain(experiment_report):
    bd = experiment_report.bd_rate_vs_baseline["uncompressed_lidar"]
    dpsnr = experiment_report.bd_psnr_vs_baseline["uncompressed_lidar"]
    _record(
        7,
        bd is not None and bd <= -3.0,
        "guided vs baseline on the held-out set: bd_rate "
        f"{'incomputable' if bd is None else f'{bd:+.2f}%'} (<= -3%), "
        f"bd_psnr {'n/a' if dpsnr is None else f'{dpsnr:+.3f} dB'}",
    )


def test_08_random_map_ablation(experiment_report):
    true_pts = experiment_report.results["uncompressed_lidar"].points
    rand_pts = experiment_report.results["random_map"].points
    assert [p.m for p in true_pts] == [p.m for p in rand_pts]
    gaps = [t.psnr - r.psnr for t, r in zip(true_pts, rand_pts)]
    _record(
        8,
        all(g > 0 for g in gaps),
        "true depth beats a random map at every matched m "
        f"(psnr gap {min(gaps):.3f}..{max(gaps):.3f} dB)",
    )


def test_09_compressed_lidar_between(experiment_report):
    bd_unc = experiment_report.bd_rate_vs_baseline["uncompressed_lidar"]
    bd_comp = experiment_report.bd_rate_vs_baseline["compressed_lidar"]
    share = experiment_report.depth_share
    _record(
        9,
        bd_unc < bd_comp < 0.0,
        f"compressed-depth bd_rate {bd_comp:+.2f}% lies between "
        f"{bd_unc:+.2f}% and 0; depth-rate share {share:.1%}",
    )


def test_10_bd_metric_exactness():
    a = RdCurve("a", (0.1, 0.2, 0.4, 0.8), (30.0, 33.0, 36.0, 39.0))
    b = RdCurve("b", tuple(r * 1.1 for r in a.bpp), a.psnr)
    shift = bd_rate(a, b)
    ok = (
        bd_rate(a, a) == 0.0
        and bd_psnr(a, a) == 0.0
        and abs(shift - 10.0) <= 0.01
        and abs(bd_rate(a, b, method="pchip") - 10.0) <= 0.01
    )
    _record(
        10,
        ok,
        f"identical curves give 0/0; x1.10 rate shift gives {shift:+.2f}% "
        "(within 0.01 of +10)",
    )
