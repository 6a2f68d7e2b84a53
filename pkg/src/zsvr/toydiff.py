"""Deterministic toy latent-diffusion denoiser and DDIM sampler.

The denoiser is an untrained, seeded stand-in for a UNet: two down blocks and
two up blocks, each a linear token projection followed by self-attention and a
residual add, with 2x2 mean pooling between the down blocks and nearest
upsampling between the up blocks. It exposes the two hook surfaces the
temporal-consistency mechanisms attach to:

  * attention_hook(kind, chunk, attention) -> TokenChunk, called instead of
    the block's own attention; `attention` maps any (K, C) token array through
    the block's joint self-attention. Without a hook, attention is applied to
    each frame's tokens independently, so batched sampling is bit-identical
    to per-frame sampling.
  * latent_hook(step_pos, t, x0_batch) -> x0_batch, called on the predicted
    clean latents of the whole batch after every denoising step's prediction.

Sampling is DDIM with eta=0: fully deterministic given seeds and inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .latentwarp import predict_x0
from .tokenmerge import TokenChunk


class BlockKind(enum.Enum):
    DOWN = "down"
    UP = "up"


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with cumulative alpha products."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    abars: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    abars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, abars=abars)


def forward_diffuse(
    x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.T:
        raise IndexError(f"t={t} out of range [0, {sched.T})")
    abar = sched.abars[t]
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


@dataclass
class HookSet:
    """Hook surfaces; None means the mechanism is absent."""

    latent_hook: Optional[Callable] = None
    attention_hook: Optional[Callable] = None


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class ToyDenoiser:
    """Seeded pseudo-random denoiser; same seed gives bit-identical weights.

    Latent channels are embedded to a wider token width before the blocks
    (cosine matching needs a non-trivial feature dimension) and projected
    back afterwards. The predicted noise is RMS-normalized per frame so the
    untrained network stands in for a unit-variance noise estimate and the
    sampling dynamics stay bounded.
    """

    N_BLOCKS = 4  # down, down, up, up

    def __init__(self, channels: int = 3, seed: int = 0, width: int = 16):
        self.channels = channels
        self.width = width
        self.seed = seed
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(width)
        self.w_in = rng.standard_normal((channels, width)) / math.sqrt(channels)
        self.w_out = rng.standard_normal((width, channels)) * scale
        self.weights = []
        for _ in range(self.N_BLOCKS):
            self.weights.append(
                {
                    name: rng.standard_normal((width, width)) * scale
                    for name in ("p", "q", "k", "v")
                }
            )

    def _attend(self, tokens: np.ndarray, block: int) -> np.ndarray:
        """Joint self-attention over an arbitrary (K, C) token set."""
        w = self.weights[block]
        q = tokens @ w["q"]
        k = tokens @ w["k"]
        v = tokens @ w["v"]
        attn = _softmax(q @ k.T / math.sqrt(self.width))
        return attn @ v

    def _block(
        self,
        x: np.ndarray,
        block: int,
        kind: BlockKind,
        content: tuple[int, int],
        hooks: HookSet,
        target_index: int,
    ) -> np.ndarray:
        b, h, w, c = x.shape
        tokens = x.reshape(b, h * w, c)
        proj = tokens @ self.weights[block]["p"]
        if hooks.attention_hook is not None:
            chunk = TokenChunk(
                tokens=proj,
                layout=(h, w),
                content=content,
                target_index=target_index,
            )
            out_chunk = hooks.attention_hook(
                kind, chunk, lambda t: self._attend(t, block)
            )
            attended = out_chunk.tokens
            if attended.shape != proj.shape:
                raise ValueError(
                    f"attention hook changed shape {proj.shape} -> {attended.shape}"
                )
        else:
            attended = np.stack([self._attend(proj[i], block) for i in range(b)])
        return (tokens + attended).reshape(b, h, w, c)

    def __call__(
        self, x: np.ndarray, hooks: HookSet | None = None, target_index: int = 0
    ) -> np.ndarray:
        """Predict noise for a batch of latents (B, h, w, c)."""
        hooks = hooks or HookSet()
        b, h, w, c = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        hp, wp = h + h % 2, w + w % 2
        padded = np.zeros((b, hp, wp, self.width))
        padded[:, :h, :w, :] = x @ self.w_in

        half = ((h + 1) // 2, (w + 1) // 2)
        y = self._block(padded, 0, BlockKind.DOWN, (h, w), hooks, target_index)
        y = y.reshape(b, hp // 2, 2, wp // 2, 2, self.width).mean(axis=(2, 4))
        y = self._block(y, 1, BlockKind.DOWN, half, hooks, target_index)
        y = self._block(y, 2, BlockKind.UP, half, hooks, target_index)
        y = y.repeat(2, axis=1).repeat(2, axis=2)
        y = self._block(y, 3, BlockKind.UP, (h, w), hooks, target_index)
        eps = y[:, :h, :w, :] @ self.w_out
        rms = np.sqrt((eps**2).mean(axis=(1, 2, 3), keepdims=True)) + 1e-12
        return eps / rms


def denoise_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int | None,
    step_pos: int,
    denoiser: ToyDenoiser,
    hooks: HookSet,
    sched: NoiseSchedule,
    target_index: int = 0,
) -> np.ndarray:
    """One deterministic DDIM step over a batch of latents.

    Returns x_{t_prev}, or the predicted x0 batch when t_prev is None.
    """
    eps_hat = denoiser(x_t, hooks, target_index)
    x0_hat = predict_x0(x_t, eps_hat, sched.abars[t])
    if hooks.latent_hook is not None:
        replaced = hooks.latent_hook(step_pos, t, x0_hat)
        replaced = np.asarray(replaced)
        if replaced.shape != x0_hat.shape:
            raise ValueError(
                f"latent hook changed shape {x0_hat.shape} -> {replaced.shape}"
            )
        x0_hat = replaced
    if t_prev is None:
        return x0_hat
    abar_prev = sched.abars[t_prev]
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat


def step_indices(T: int, steps: int) -> list[int]:
    """Strided descending subset of [0, T) with `steps` distinct entries."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    idx = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))
    return list(idx[::-1])


def sample(
    x_T: np.ndarray,
    denoiser: ToyDenoiser,
    hooks: HookSet,
    sched: NoiseSchedule,
    steps: int,
    target_index: int = 0,
) -> np.ndarray:
    """Iterate denoise_step over a strided step subset; returns the x0 batch."""
    ts = step_indices(sched.T, steps)
    x = x_T
    for pos, t in enumerate(ts):
        t_prev = ts[pos + 1] if pos + 1 < len(ts) else None
        x = denoise_step(x, t, t_prev, pos, denoiser, hooks, sched, target_index)
    return x
