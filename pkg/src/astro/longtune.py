"""Streaming long tuning: optimize a window of the stream, not the whole thing.

Each epoch picks a clip-aligned window start uniformly at random (seeded per
epoch, so parallel workers agree), rolls the behavior policy out to the
window once, then runs the usual group optimization on just the window's
clips. Everything before the window is detached history: it conditions the
candidates through bounded context summaries but carries no gradients, so
the live graph never grows with the prefix length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flowgen, nftcore, rewardlab, streamctx
from . import rng as rngmod
from . import tensorgrad as tg
from .config import RunConfig


@dataclass(frozen=True)
class WindowSpec:
    """Clip-aligned window placement inside a stream of total_clips clips."""

    total_clips: int
    window_clips: int
    start_clip: int

    def __post_init__(self):
        if self.window_clips < 1 or self.window_clips > self.total_clips:
            raise ValueError("window_clips must lie in [1, total_clips]")
        if not 0 <= self.start_clip <= self.total_clips - self.window_clips:
            raise ValueError(
                f"start_clip {self.start_clip} outside [0, {self.total_clips - self.window_clips}]")

    def required_clips(self) -> int:
        """Clips that must exist before optimization can run: prefix plus window."""
        return self.start_clip + self.window_clips


def select_window(total_clips: int, window_clips: int, rng: np.random.Generator) -> int:
    """Uniform clip-aligned start in [0, total_clips - window_clips]."""
    if not 1 <= window_clips <= total_clips:
        raise ValueError("window_clips must lie in [1, total_clips]")
    return int(rng.integers(0, total_clips - window_clips + 1))


def epoch_window(cfg: RunConfig, epoch: int) -> WindowSpec:
    """The epoch's shared window; derived from (seed, epoch) so workers agree."""
    stream = rngmod.substream(cfg.seed, rngmod.WINDOW_STREAM, epoch)
    start = select_window(cfg.total_clips, cfg.window_clips, stream)
    return WindowSpec(total_clips=cfg.total_clips, window_clips=cfg.window_clips,
                      start_clip=start)


def rollout_prefix(theta_old: dict[str, np.ndarray], prompt: flowgen.Prompt,
                   start_clip: int, cfg: RunConfig, schedule: flowgen.TimestepSchedule,
                   epoch: int) -> streamctx.ContextWindow:
    """Generate the stream up to the window start once, under the behavior policy.

    Returns the detached context; frames beyond the sink+rolling bound are
    already gone, so the cost of carrying history is constant in start_clip.
    """
    ctx = streamctx.empty_context(cfg.sink_size, cfg.window_size, cfg.frame_dim)
    stream = rngmod.substream(cfg.seed, rngmod.PREFIX_STREAM, epoch, prompt.pid)
    for _ in range(start_clip):
        clip = flowgen.sample_clip(theta_old, ctx.summary(), prompt.vec, schedule, stream)
        ctx = streamctx.push_clip(ctx, clip)
    return streamctx.detach_history(ctx)


def window_rollout(theta_old: dict[str, np.ndarray], prompt: flowgen.Prompt,
                   spec: WindowSpec, cfg: RunConfig, schedule: flowgen.TimestepSchedule,
                   epoch: int) -> nftcore.GroupData:
    """Branch the group at the window: each candidate extends its own context.

    Rows come out candidate-major, one row per (candidate, window clip), each
    with the context summary that conditioned it. Rewards see each
    candidate's window as one frame stack.
    """
    prefix = rollout_prefix(theta_old, prompt, spec.start_clip, cfg, schedule, epoch)
    base_key = streamctx.group_base_key(cfg.seed, epoch, prompt.pid)
    x0_rows, ctx_rows, clips = [], [], []
    for i in range(cfg.group_size):
        stream = rngmod.substream(*base_key, i)
        ctx = prefix
        window_clips = []
        for _ in range(spec.window_clips):
            summary = ctx.summary()
            clip = flowgen.sample_clip(theta_old, summary, prompt.vec, schedule, stream)
            x0_rows.append(clip.ravel())
            ctx_rows.append(summary)
            window_clips.append(clip)
            ctx = streamctx.push_clip(ctx, clip)
        clips.append(np.concatenate(window_clips, axis=0))
    return nftcore.GroupData(
        prompt=prompt,
        x0_rows=np.stack(x0_rows),
        ctx_rows=np.stack(ctx_rows),
        row_candidate=np.repeat(np.arange(cfg.group_size), spec.window_clips),
        clips=clips,
    )


def train_window_epoch(policies: nftcore.PolicyTriple, prompts: list[flowgen.Prompt],
                       state: nftcore.TrainState, cfg: RunConfig,
                       schedule: flowgen.TimestepSchedule,
                       normalizer: rewardlab.RewardNormalizer, risk: rewardlab.RiskState,
                       optimizer: tg.AdamW) -> dict:
    """One streaming epoch: shared window choice, prefix rollout, window optimization."""
    spec = epoch_window(cfg, state.epoch)

    def rollout_fn(theta_old, prompt, epoch):
        return window_rollout(theta_old, prompt, spec, cfg, schedule, epoch)

    metrics = nftcore.train_epoch(policies, prompts, state, cfg, schedule,
                                  normalizer, risk, optimizer, rollout_fn=rollout_fn)
    metrics["window_start"] = spec.start_clip
    return metrics
