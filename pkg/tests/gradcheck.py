"""Finite-difference gradient checking for the end-to-end RD objective.

Kept outside the package: it is a verification harness, not product code.
Runs the model in float64 with fixed quantization offsets so the forward is
smooth and the central difference is trustworthy.
"""

from __future__ import annotations

import numpy as np
import torch

from ldic.training import lambda_from_control, rd_loss


def rd_grad_errors(model, x, m, depth, *, n_params=8, eps=1e-4, seed=0):
    """Compare autograd gradients against central differences.

    Returns a list of (param_name, rel_error, autograd, fd) tuples, one per
    probed coordinate, probing ``n_params`` randomly chosen parameters.
    """
    model = model.double()
    x = x.double()
    if depth is not None:
        depth = depth.double()
    if torch.is_tensor(m):
        m = m.double()

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        dry = model(x, m, depth, noise_y=0.0, noise_z=0.0)
    noise_y = torch.rand(dry["y"].shape, generator=gen, dtype=torch.float64) - 0.5
    noise_z = torch.rand(dry["z"].shape, generator=gen, dtype=torch.float64) - 0.5
    lam = lambda_from_control(
        m if torch.is_tensor(m) else float(m),
        model.cfg.lambda_min,
        model.cfg.lambda_max,
    )

    def loss_value():
        out = model(x, m, depth, noise_y=noise_y, noise_z=noise_z)
        return rd_loss(x, out, lam).loss

    model.zero_grad()
    loss_value().backward()

    rng = np.random.default_rng(seed)
    named = [
        (name, p)
        for name, p in model.named_parameters()
        if p.requires_grad and p.grad is not None
    ]
    chosen = rng.choice(len(named), size=min(n_params, len(named)), replace=False)
    results = []
    for pi in chosen:
        name, p = named[pi]
        flat = p.data.view(-1)
        i = int(rng.integers(0, flat.numel()))
        g = float(p.grad.view(-1)[i])
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + eps
            loss_hi = float(loss_value())
            flat[i] = orig - eps
            loss_lo = float(loss_value())
            flat[i] = orig
        fd = (loss_hi - loss_lo) / (2.0 * eps)
        denom = max(abs(g), abs(fd), 1e-6)
        results.append((f"{name}[{i}]", abs(fd - g) / denom, g, fd))
    return results
