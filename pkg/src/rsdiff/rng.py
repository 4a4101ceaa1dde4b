"""Reproducible per-path random streams.

Every path gets its own pair of counter-based (Philox) generators derived
from ``(seed, path_index)`` through ``SeedSequence`` spawn keys: one stream
for Brownian increments, one for the Poisson marks.  Streams never depend on
the order in which paths are simulated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIFFUSION, JUMPS = 0, 1


@dataclass
class PathStreams:
    diffusion: np.random.Generator
    jumps: np.random.Generator


def _stream(seed, index, which):
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(index), which))
    return np.random.Generator(np.random.Philox(seq))


def path_streams(seed: int, index: int = 0) -> PathStreams:
    return PathStreams(diffusion=_stream(seed, index, DIFFUSION), jumps=_stream(seed, index, JUMPS))
