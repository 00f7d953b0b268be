"""Bounded streaming context: permanent sink frames plus a rolling recent window.

The first `sink` frames ever generated are kept for good; after that only the
most recent `window` frames survive. Pushing returns a new ContextWindow, so
group rollouts can share one frozen context without copy discipline bugs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flowgen
from . import rng as rngmod


@dataclass(frozen=True)
class ContextWindow:
    sink: tuple[np.ndarray, ...]
    rolling: tuple[np.ndarray, ...]
    total_generated: int
    sink_size: int
    window_size: int
    frame_dim: int

    def frame_count(self) -> int:
        return len(self.sink) + len(self.rolling)

    def frames(self) -> np.ndarray:
        """All retained frames, oldest first, as a (count, frame_dim) stack."""
        parts = list(self.sink) + list(self.rolling)
        if not parts:
            return np.zeros((0, self.frame_dim))
        return np.stack(parts)

    def summary(self) -> np.ndarray:
        """Fixed-size conditioning vector: mean sink frame, then the newest frame."""
        if self.sink:
            sink_mean = np.mean(self.sink, axis=0)
        else:
            sink_mean = np.zeros(self.frame_dim)
        if self.rolling:
            last = self.rolling[-1]
        elif self.sink:
            last = self.sink[-1]
        else:
            last = np.zeros(self.frame_dim)
        return np.concatenate([sink_mean, last])


def empty_context(sink_size: int = 3, window_size: int = 21, frame_dim: int = 8) -> ContextWindow:
    if sink_size < 0 or window_size < 1:
        raise ValueError("need sink_size >= 0 and window_size >= 1")
    return ContextWindow(sink=(), rolling=(), total_generated=0,
                         sink_size=sink_size, window_size=window_size, frame_dim=frame_dim)


def push_clip(ctx: ContextWindow, clip: np.ndarray) -> ContextWindow:
    """New context with the clip's frames appended under the eviction policy.

    Frames absorbed by the sink during warmup never enter the rolling window,
    so a frame is retained exactly once.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 2 or clip.shape[1] != ctx.frame_dim:
        raise ValueError(f"clip shape {clip.shape} does not match frame_dim {ctx.frame_dim}")
    frames = [np.array(row) for row in clip]
    take = max(0, ctx.sink_size - len(ctx.sink))
    sink = ctx.sink + tuple(frames[:take])
    rolling = (ctx.rolling + tuple(frames[take:]))[-ctx.window_size:]
    return ContextWindow(sink=sink, rolling=rolling,
                         total_generated=ctx.total_generated + len(frames),
                         sink_size=ctx.sink_size, window_size=ctx.window_size,
                         frame_dim=ctx.frame_dim)


def detach_history(ctx: ContextWindow) -> ContextWindow:
    """Deep-copied plain-array context; anything graph-tracked is reduced to values."""
    def plain(frame):
        return np.array(getattr(frame, "value", frame), dtype=np.float64)
    return ContextWindow(sink=tuple(plain(f) for f in ctx.sink),
                         rolling=tuple(plain(f) for f in ctx.rolling),
                         total_generated=ctx.total_generated,
                         sink_size=ctx.sink_size, window_size=ctx.window_size,
                         frame_dim=ctx.frame_dim)


def group_base_key(seed: int, epoch: int, pid: int) -> tuple[int, ...]:
    """Base of the candidate substream keys; candidate index is appended per clip."""
    return (seed, rngmod.CANDIDATE_STREAM, epoch, pid)


def group_rollout(params_old: dict[str, np.ndarray], ctx: ContextWindow,
                  prompt: flowgen.Prompt, group_size: int,
                  schedule: flowgen.TimestepSchedule,
                  base_key: tuple[int, ...]) -> list[np.ndarray]:
    """Decode group_size candidate clips from one shared frozen context.

    The context summary is computed once; candidate i draws from its own
    substream keyed by base_key + (i,), so candidates are independent of each
    other and of group_size.
    """
    if group_size < 2:
        raise ValueError("group_size must be at least 2")
    summary = ctx.summary()
    clips = []
    for i in range(group_size):
        stream = rngmod.substream(*base_key, i)
        clips.append(flowgen.sample_clip(params_old, summary, prompt.vec, schedule, stream))
    return clips
