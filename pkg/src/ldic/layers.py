"""Windowed-attention building blocks.

Feature maps flow through these modules in (B, C, H, W) layout.  Each block
is a standard shifted-window transformer block with one extension: an
optional prompt map, spatially aligned with the tokens, whose windowed
tokens join the attention as extra key/value entries.  Queries are never
prompts and prompts are never emitted, so with no prompt the block reduces
exactly to the plain form.
"""

from __future__ import annotations

from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, win*win, C); H and W divisible by win."""
    b, h, w, c = x.shape
    x = x.view(b, h // win, win, w // win, win, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)


def window_reverse(windows: torch.Tensor, win: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition` back to (B, H, W, C)."""
    b = windows.shape[0] // (h * w // win // win)
    x = windows.view(b, h // win, w // win, win, win, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


@lru_cache(maxsize=64)
def _relative_index(win: int, max_win: int) -> torch.Tensor:
    # index into a bias table laid out for max_win, usable by any win <= max_win
    coords = torch.stack(
        torch.meshgrid(torch.arange(win), torch.arange(win), indexing="ij")
    ).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + max_win - 1) * (2 * max_win - 1) + (rel[1] + max_win - 1)


@lru_cache(maxsize=64)
def _shift_mask(hp: int, wp: int, win: int, shift: int) -> torch.Tensor:
    """Additive attention mask (nW, N, N) hiding wrapped regions."""
    img = torch.zeros(1, hp, wp, 1)
    region = 0
    for hs in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
        for ws in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = region
            region += 1
    mw = window_partition(img, win).squeeze(-1)
    mask = mw.unsqueeze(1) - mw.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class WindowAttention(nn.Module):
    """Multi-head attention inside square windows with relative position bias.

    Prompt tokens, when given, are projected by the same key/value weights
    and appended to every window's key/value set; they receive zero position
    bias and are exempt from the shift mask.
    """

    def __init__(self, dim: int, heads: int, max_window: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.max_window = max_window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(
            torch.zeros((2 * max_window - 1) ** 2, heads)
        )
        nn.init.trunc_normal_(self.bias_table, std=0.02)

    def forward(self, xw, pw=None, mask=None, win: int | None = None):
        b, n, c = xw.shape
        win = win or self.max_window
        qkv = (
            self.qkv(xw)
            .reshape(b, n, 3, self.heads, c // self.heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        p = 0
        if pw is not None and pw.shape[1] > 0:
            p = pw.shape[1]
            pkv = (
                self.qkv(pw)
                .reshape(b, p, 3, self.heads, c // self.heads)
                .permute(2, 0, 3, 1, 4)
            )
            k = torch.cat([k, pkv[1]], dim=2)
            v = torch.cat([v, pkv[2]], dim=2)

        attn = (q * self.scale) @ k.transpose(-2, -1)  # (b, heads, n, n + p)
        idx = _relative_index(win, self.max_window).reshape(-1)
        bias = self.bias_table[idx].reshape(n, n, self.heads).permute(2, 0, 1)
        attn = attn + F.pad(bias, (0, p)).to(attn.dtype)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.heads, n, n + p)
            attn = attn + F.pad(mask, (0, p)).to(attn.dtype).unsqueeze(0).unsqueeze(2)
            attn = attn.view(b, self.heads, n, n + p)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Shifted-window transformer block over a (B, C, H, W) map.

    ``prompt`` must match the map's spatial grid; its windowed tokens enter
    attention as additional keys/values.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        window: int,
        shifted: bool,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, prompt: torch.Tensor | None = None):
        b, c, h, w = x.shape
        if prompt is not None and prompt.shape[-2:] != x.shape[-2:]:
            raise ValueError(
                f"prompt grid {tuple(prompt.shape[-2:])} does not match "
                f"token grid {(h, w)}"
            )
        win = min(self.window, h, w)
        shift = win // 2 if self.shifted and min(h, w) > win else 0

        t = x.permute(0, 2, 3, 1)
        tokens = self.norm1(t)
        p = self.norm1(prompt.permute(0, 2, 3, 1)) if prompt is not None else None

        pad_b = (win - h % win) % win
        pad_r = (win - w % win) % win
        if pad_b or pad_r:
            tokens = F.pad(tokens, (0, 0, 0, pad_r, 0, pad_b))
            if p is not None:
                p = F.pad(p, (0, 0, 0, pad_r, 0, pad_b))
        hp, wp = h + pad_b, w + pad_r

        mask = None
        if shift:
            tokens = torch.roll(tokens, (-shift, -shift), dims=(1, 2))
            if p is not None:
                p = torch.roll(p, (-shift, -shift), dims=(1, 2))
            mask = _shift_mask(hp, wp, win, shift)

        xw = window_partition(tokens, win)
        pw = window_partition(p, win) if p is not None else None
        out = self.attn(xw, pw, mask, win)
        out = window_reverse(out, win, hp, wp)

        if shift:
            out = torch.roll(out, (shift, shift), dims=(1, 2))
        if pad_b or pad_r:
            out = out[:, :h, :w, :]

        t = t + out
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


class BlockStack(nn.Module):
    """A stage's blocks, alternating plain and shifted windows.

    All blocks in the stack share the stage's prompt map.
    """

    def __init__(
        self, dim: int, depth: int, heads: int, window: int, mlp_ratio: float
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio)
            for i in range(depth)
        )

    def forward(self, x, prompt=None):
        for block in self.blocks:
            x = block(x, prompt)
        return x
