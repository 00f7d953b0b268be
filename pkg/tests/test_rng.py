"""Keyed substreams: deterministic, distinct, and countable."""

from __future__ import annotations

import numpy as np
import pytest

from astro import rng as arng


def test_substream_deterministic():
    a = arng.substream(0, arng.CANDIDATE_STREAM, 3, 1, 0).standard_normal(8)
    b = arng.substream(0, arng.CANDIDATE_STREAM, 3, 1, 0).standard_normal(8)
    assert np.array_equal(a, b)


def test_substream_keys_separate():
    base = (0, arng.CANDIDATE_STREAM, 3, 1, 0)
    ref = arng.substream(*base).standard_normal(8)
    for pos in range(len(base)):
        key = list(base)
        key[pos] += 1
        other = arng.substream(*key).standard_normal(8)
        assert not np.array_equal(ref, other), f"key position {pos}"


def test_stream_tags_distinct():
    tags = [arng.PROMPT_STREAM, arng.CANDIDATE_STREAM, arng.PREFIX_STREAM,
            arng.NOISE_T_STREAM, arng.EPS_STREAM, arng.WINDOW_STREAM,
            arng.PRETRAIN_STREAM, arng.EVAL_STREAM]
    assert len(set(tags)) == len(tags)


def test_substream_rejects_empty_key():
    with pytest.raises(ValueError):
        arng.substream()


def test_counting_stream():
    counter = arng.CountingStream(arng.substream(0, 1))
    assert counter.draws == 0
    counter.standard_normal(5)
    counter.standard_normal((2, 3))
    assert counter.draws == 2
    # draws pass through unchanged
    plain = arng.substream(0, 1).standard_normal(5)
    again = arng.CountingStream(arng.substream(0, 1)).standard_normal(5)
    assert np.array_equal(plain, again)
