"""End-to-end restoration: batching, flow precomputation, stage scheduling.

restore() processes the video batch by batch through the toy DDIM sampler.
Hierarchical latent warping runs in the configured early fraction of steps:
the batch keyframe is first chained from the previous batch's keyframe (using
its recorded clean-latent prediction at the same step), then propagated
star-shaped to the batch members. Token merging wraps every self-attention:
flow-guided in down blocks, spatially weighted cosine in up blocks, with the
merge ratio annealed by a cosine ramp.

The "encoder/decoder" is area downsampling / bilinear upsampling, not a VAE:
latents are downsampled frames. This is a deliberate desk-scale substitution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow as flowmod
from . import latentwarp, metrics, toydiff
from .mediaio import FrameSequence
from .tokenmerge import AnnealParams, MergeMode, TokenChunk, anneal_ratio, hybrid_merge_pass
from .toydiff import BlockKind, HookSet, ToyDenoiser

# Fixed toy noise schedule; the step count is configurable, the schedule not.
SCHED_T = 100
BETA_START = 1e-4
BETA_END = 0.02

_CONFIG_KEYS = {
    "batch_size": ("batch_size", int),
    "steps": ("steps", int),
    "seed": ("seed", int),
    "hlw_until": ("hlw_until", float),
    "tome.i_beg": ("tome_i_beg", int),
    "tome.i_end": ("tome_i_end", int),
    "tome.delta": ("tome_delta", float),
    "tome.r": ("tome_r", float),
    "tome.R": ("tome_R", float),
    "flow.block": ("flow_block", int),
    "flow.search": ("flow_search", int),
    "flow.tau_occ": ("flow_tau_occ", float),
    "latent_scale": ("latent_scale", int),
}


@dataclass
class RestoreConfig:
    batch_size: int = 8
    steps: int = 50
    seed: int = 0
    hlw_until: float = 0.2
    tome_i_beg: int | None = None  # anneal start; default 60% of steps
    tome_i_end: int | None = None  # anneal end; default step count
    tome_delta: float = 1.0
    tome_r: float = 0.8
    tome_R: float = 4.0
    flow_block: int = 7
    flow_search: int = 4
    flow_tau_occ: float = 0.368
    latent_scale: int = 4
    # Mechanism toggles and ablation knobs (not config-file keys).
    hlw_enabled: bool = True
    tome_enabled: bool = True
    down_mode: MergeMode = MergeMode.FLOW_DOWN
    up_mode: MergeMode = MergeMode.COSINE_UP
    spatial: bool = True
    # Active step-fraction windows; None derives HLW from hlw_until and
    # gives token merging the full range.
    hlw_windows: list[tuple[float, float]] | None = None
    tome_windows: list[tuple[float, float]] | None = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.steps <= SCHED_T:
            raise ValueError(f"steps must be in [1, {SCHED_T}]")
        if not 0.0 <= self.hlw_until <= 1.0:
            raise ValueError("hlw_until must be in [0, 1]")
        if not 0.0 <= self.tome_r <= 1.0:
            raise ValueError("tome.r must be in [0, 1]")
        if self.tome_delta <= 0:
            raise ValueError("tome.delta must be > 0")
        if self.tome_R <= 0:
            raise ValueError("tome.R must be > 0")
        if self.latent_scale < 1:
            raise ValueError("latent_scale must be >= 1")
        if self.flow_block < 1 or self.flow_search < 0:
            raise ValueError("bad flow.block / flow.search")
        if not 0.0 < self.flow_tau_occ <= 1.0:
            raise ValueError("flow.tau_occ must be in (0, 1]")
        beg, end = self.anneal_range()
        if beg >= end:
            raise ValueError("tome.i_beg must be < tome.i_end")

    def anneal_range(self) -> tuple[int, int]:
        beg = self.tome_i_beg if self.tome_i_beg is not None else round(0.6 * self.steps)
        end = self.tome_i_end if self.tome_i_end is not None else self.steps
        return beg, end

    def active_hlw_windows(self) -> list[tuple[float, float]]:
        if self.hlw_windows is not None:
            return self.hlw_windows
        return [(0.0, self.hlw_until)]

    def active_tome_windows(self) -> list[tuple[float, float]]:
        if self.tome_windows is not None:
            return self.tome_windows
        return [(0.0, 1.0)]


def parse_config(text: str) -> RestoreConfig:
    """Parse line-based `key = value` text; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        attr, conv = _CONFIG_KEYS[key]
        try:
            values[attr] = conv(val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    cfg = RestoreConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str) -> RestoreConfig:
    with open(path) as fh:
        return parse_config(fh.read())


@dataclass
class BatchPlan:
    """Contiguous frame batches, each with one randomly chosen keyframe."""

    batch_size: int
    batches: list[tuple[int, int]]  # [start, end) frame ranges
    keyframe_of: list[int]  # global frame index, inside its batch
    seed: int


def plan_batches(n: int, batch_size: int, seed: int) -> BatchPlan:
    if n < 1 or batch_size < 1:
        raise ValueError("n and batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    batches = []
    keyframes = []
    for start in range(0, n, batch_size):
        end = min(start + batch_size, n)
        batches.append((start, end))
        keyframes.append(start + int(rng.integers(end - start)))
    return BatchPlan(batch_size=batch_size, batches=batches, keyframe_of=keyframes, seed=seed)


@dataclass
class FlowBank:
    """Precomputed flows between frame pairs, at LQ resolution.

    flow[(i, j)] = estimate_flow(frame_i, frame_j): sampled at frame i's
    positions, pointing at the corresponding position in frame j, so
    warp(x_j, flow[(i, j)]) aligns frame j's content onto frame i.
    conf/mask[(i, j)] qualify that warp.
    """

    flow: dict = field(default_factory=dict)
    conf: dict = field(default_factory=dict)
    mask: dict = field(default_factory=dict)


def _needed_pairs(n: int, plan: BatchPlan) -> set[tuple[int, int]]:
    pairs = set()
    # adjacent keyframes (chain), both directions
    for b in range(1, len(plan.batches)):
        i, j = plan.keyframe_of[b], plan.keyframe_of[b - 1]
        pairs.add((i, j))
        pairs.add((j, i))
    # keyframe <-> members
    for b, (start, end) in enumerate(plan.batches):
        kf = plan.keyframe_of[b]
        for m in range(start, end):
            if m != kf:
                pairs.add((m, kf))
                pairs.add((kf, m))
    # adjacent frames and skip-one pairs (metrics)
    for t in range(n - 1):
        pairs.add((t + 1, t))
        pairs.add((t, t + 1))
    for t in range(n - 2):
        pairs.add((t + 2, t))
        pairs.add((t, t + 2))
    return pairs


def precompute_flows(seq: FrameSequence, plan: BatchPlan, config: RestoreConfig) -> FlowBank:
    """Block-matching flows, confidences, and occlusion masks on the LQ frames."""
    bank = FlowBank()
    pairs = _needed_pairs(len(seq), plan)
    for i, j in sorted(pairs):
        bank.flow[(i, j)] = flowmod.estimate_flow(
            seq.frames[i], seq.frames[j], config.flow_block, config.flow_search
        )
    for i, j in sorted(pairs):
        fwd, bwd = bank.flow[(i, j)], bank.flow[(j, i)]
        bank.conf[(i, j)] = flowmod.fb_confidence(fwd, bwd)
        bank.mask[(i, j)] = (bank.conf[(i, j)] < config.flow_tau_occ).astype(np.float64)
    return bank


def encode_latent(frame: np.ndarray, scale: int) -> np.ndarray:
    """Area-downsample a frame by an integer factor."""
    h, w, c = frame.shape
    if h % scale or w % scale:
        raise ValueError(
            f"frame size {h}x{w} not divisible by latent_scale {scale}"
        )
    return frame.reshape(h // scale, scale, w // scale, scale, c).mean(axis=(1, 3))


def decode_latent(latent: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear-upsample a latent back to frame resolution, clipped to [0, 1]."""
    return np.clip(flowmod.bilinear_resample(latent, h, w), 0.0, 1.0)


def frame_noise(seed: int, frame_index: int, shape: tuple[int, ...]) -> np.ndarray:
    """Independent per-frame initial noise, deterministic in (seed, frame)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, frame_index]))
    return rng.standard_normal(shape)


def _in_windows(frac: float, windows: list[tuple[float, float]]) -> bool:
    return any(lo <= frac < hi for lo, hi in windows)


def restore(
    seq: FrameSequence, config: RestoreConfig, stats: dict | None = None
) -> FrameSequence:
    """Run the full zero-shot restoration over a frame sequence."""
    config.validate()
    n = len(seq)
    h, w, _ = seq.shape
    scale = config.latent_scale
    if h % scale or w % scale:
        raise ValueError(f"frame size {h}x{w} not divisible by latent_scale {scale}")
    hl, wl = h // scale, w // scale

    plan = plan_batches(n, config.batch_size, config.seed)
    sched = toydiff.make_schedule(SCHED_T, BETA_START, BETA_END)
    ts = toydiff.step_indices(sched.T, config.steps)
    num_steps = len(ts)
    beg, end = config.anneal_range()
    anneal = AnnealParams(r=config.tome_r, delta=config.tome_delta, i_beg=beg, i_end=end)
    hlw_windows = config.active_hlw_windows()
    tome_windows = config.active_tome_windows()

    need_flows = (config.hlw_enabled and n > 1) or (config.tome_enabled and config.tome_r > 0)
    bank = precompute_flows(seq, plan, config) if need_flows else FlowBank()
    denoiser = ToyDenoiser(channels=3, seed=config.seed)

    if stats is not None:
        stats.setdefault("latent_hook_calls", 0)
        stats.setdefault("attention_merge_calls", 0)

    resample_cache: dict = {}

    def latent_flow(i: int, j: int) -> np.ndarray:
        key = ("f", i, j)
        if key not in resample_cache:
            resample_cache[key] = flowmod.resample_flow(bank.flow[(i, j)], hl, wl)
        return resample_cache[key]

    def latent_mask(i: int, j: int) -> np.ndarray:
        key = ("m", i, j)
        if key not in resample_cache:
            resample_cache[key] = flowmod.resample_mask(bank.mask[(i, j)], hl, wl)
        return resample_cache[key]

    outputs: list[np.ndarray | None] = [None] * n
    prev_kf_store: dict[int, np.ndarray] = {}

    for b, (start, stop) in enumerate(plan.batches):
        frame_ids = list(range(start, stop))
        kf = plan.keyframe_of[b]
        kf_off = kf - start
        prev_kf = plan.keyframe_of[b - 1] if b > 0 else None

        x0s = np.stack([encode_latent(seq.frames[f], scale) for f in frame_ids])
        eps0 = np.stack([frame_noise(config.seed, f, (hl, wl, 3)) for f in frame_ids])
        x = toydiff.forward_diffuse(x0s, ts[0], eps0, sched)

        cur_kf_store: dict[int, np.ndarray] = {}
        state = {"pos": 0}

        def latent_hook(step_pos, t, x0_batch):
            frac = step_pos / num_steps
            if not (config.hlw_enabled and _in_windows(frac, hlw_windows)):
                return x0_batch
            if stats is not None:
                stats["latent_hook_calls"] += 1
            out = x0_batch.copy()
            if prev_kf is not None and step_pos in prev_kf_store:
                out[kf_off] = latentwarp.blend_warped(
                    out[kf_off],
                    prev_kf_store[step_pos],
                    latent_flow(kf, prev_kf),
                    latent_mask(kf, prev_kf),
                )
            cur_kf_store[step_pos] = out[kf_off].copy()
            for off, f in enumerate(frame_ids):
                if f == kf:
                    continue
                out[off] = latentwarp.blend_warped(
                    out[off], out[kf_off], latent_flow(f, kf), latent_mask(f, kf)
                )
            return out

        src_frames = [f for f in frame_ids if f != kf]
        merge_flows = [bank.flow[(m, kf)] for m in src_frames] if bank.flow else []
        merge_confs = [bank.conf[(m, kf)] for m in src_frames] if bank.conf else []

        def attention_hook(kind, chunk: TokenChunk, attn_fn):
            pos = state["pos"]
            frac = pos / num_steps
            nb = chunk.tokens.shape[0]
            r_i = anneal_ratio(pos, anneal)
            active = (
                config.tome_enabled
                and _in_windows(frac, tome_windows)
                and r_i > 0.0
                and nb >= 2
            )
            if not active:
                # Exactly the denoiser's hookless per-frame attention path.
                tokens = np.stack([attn_fn(chunk.tokens[i]) for i in range(nb)])
                return replace(chunk, tokens=tokens)
            if stats is not None:
                stats["attention_merge_calls"] += 1
            mode = config.down_mode if kind is BlockKind.DOWN else config.up_mode
            kwargs = {}
            if mode is MergeMode.FLOW_DOWN:
                kwargs["flows"] = merge_flows
                kwargs["confidences"] = merge_confs
            else:
                kwargs["R"] = config.tome_R if config.spatial else math.inf
            return hybrid_merge_pass(chunk, mode, attn_fn, r_i, **kwargs)

        hooks = HookSet(latent_hook=latent_hook, attention_hook=attention_hook)
        for pos, t in enumerate(ts):
            state["pos"] = pos
            t_prev = ts[pos + 1] if pos + 1 < num_steps else None
            x = toydiff.denoise_step(
                x, t, t_prev, pos, denoiser, hooks, sched, target_index=kf_off
            )
        prev_kf_store = cur_kf_store

        for off, f in enumerate(frame_ids):
            outputs[f] = decode_latent(x[off], h, w)

    return FrameSequence(outputs)


def per_frame_baseline(seq: FrameSequence, config: RestoreConfig) -> FrameSequence:
    """Independent per-frame sampling with no hooks; the mechanism-off reference."""
    config.validate()
    h, w, _ = seq.shape
    scale = config.latent_scale
    hl, wl = h // scale, w // scale
    sched = toydiff.make_schedule(SCHED_T, BETA_START, BETA_END)
    denoiser = ToyDenoiser(channels=3, seed=config.seed)
    out = []
    for f, frame in enumerate(seq.frames):
        x0 = encode_latent(frame, scale)[None]
        eps = frame_noise(config.seed, f, (hl, wl, 3))[None]
        ts = toydiff.step_indices(sched.T, config.steps)
        x = toydiff.forward_diffuse(x0, ts[0], eps, sched)
        x = toydiff.sample(x, denoiser, HookSet(), sched, config.steps)
        out.append(decode_latent(x[0], h, w))
    return FrameSequence(out)


def temporal_consistency(
    seq: FrameSequence,
    config: RestoreConfig,
    flow_source: FrameSequence | None = None,
) -> tuple[list[float], list[float]]:
    """E_warp and E_inter per-item arrays for a sequence.

    Flows (and occlusion masks for E_warp) are estimated from flow_source,
    which defaults to the measured sequence itself; pass the LQ input to
    compare restored variants under identical flows.
    """
    src = flow_source if flow_source is not None else seq
    if len(src) != len(seq):
        raise ValueError("flow_source length differs from sequence length")
    n = len(seq)
    est = lambda i, j: flowmod.estimate_flow(
        src.frames[i], src.frames[j], config.flow_block, config.flow_search
    )
    warp_flows, warp_masks = [], []
    for t in range(1, n):
        fwd = est(t, t - 1)
        bwd = est(t - 1, t)
        warp_flows.append(fwd)
        warp_masks.append(flowmod.occlusion_mask(fwd, bwd, config.flow_tau_occ))
    e_warp, _ = metrics.warping_error(seq.frames, warp_flows, warp_masks)
    if n >= 3:
        fwd2 = [est(t + 1, t - 1) for t in range(1, n - 1)]
        bwd2 = [est(t - 1, t + 1) for t in range(1, n - 1)]
        e_inter, _ = metrics.interpolation_error(seq.frames, fwd2, bwd2)
    else:
        e_inter = []
    return e_warp, e_inter


CORRESPONDENCE_VARIANTS = {
    "flow_flow": dict(down_mode=MergeMode.FLOW_DOWN, up_mode=MergeMode.FLOW_DOWN, spatial=False),
    "cos_cos": dict(down_mode=MergeMode.COSINE_UP, up_mode=MergeMode.COSINE_UP, spatial=False),
    "cos_flow": dict(down_mode=MergeMode.COSINE_UP, up_mode=MergeMode.FLOW_DOWN, spatial=False),
    "flow_cos": dict(down_mode=MergeMode.FLOW_DOWN, up_mode=MergeMode.COSINE_UP, spatial=False),
    "flow_cos_spatial": dict(
        down_mode=MergeMode.FLOW_DOWN, up_mode=MergeMode.COSINE_UP, spatial=True
    ),
}

# Step-fraction thirds standing in for early/mid/late denoising stages.
_EARLY = (0.0, 1.0 / 3.0)
_MID = (1.0 / 3.0, 2.0 / 3.0)
_LATE = (2.0 / 3.0, 1.0)

STAGE_VARIANTS = {
    "off_off": dict(hlw_enabled=False, tome_enabled=False),
    "early_early": dict(hlw_windows=[_EARLY], tome_windows=[_EARLY]),
    "earlymid_all": dict(hlw_windows=[_EARLY, _MID], tome_windows=[_EARLY, _MID, _LATE]),
    "all_all": dict(hlw_windows=[_EARLY, _MID, _LATE], tome_windows=[_EARLY, _MID, _LATE]),
    "early_all": dict(hlw_windows=[_EARLY], tome_windows=[_EARLY, _MID, _LATE]),
}


def ablate(seq: FrameSequence, config: RestoreConfig, variants: dict | None = None) -> dict:
    """Run restore under correspondence and stage variants; emit a metrics table."""
    table: dict = {"correspondence": {}, "stages": {}}
    groups = variants or {
        "correspondence": CORRESPONDENCE_VARIANTS,
        "stages": STAGE_VARIANTS,
    }
    for group, entries in groups.items():
        for name, overrides in entries.items():
            cfg = replace(config, **overrides)
            restored = restore(seq, cfg)
            e_warp, e_inter = temporal_consistency(restored, config, flow_source=seq)
            table.setdefault(group, {})[name] = {
                "e_warp_mean": float(np.mean(e_warp)) if e_warp else None,
                "e_warp_mean_x1000": float(1e3 * np.mean(e_warp)) if e_warp else None,
                "e_inter_mean": float(np.mean(e_inter)) if e_inter else None,
            }
    return table
