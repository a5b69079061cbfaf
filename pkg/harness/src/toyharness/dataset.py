"""Deterministic synthetic token stream and slice-guarded data access.

The stream is a first-order Markov chain over a small vocabulary: with
probability ``p_follow`` the next token is an affine map of the previous one,
otherwise a pre-drawn uniform token. All randomness is drawn up front from a
seeded generator, so the same spec always yields a bit-identical stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)


class SliceBoundsError(IndexError):
    """A read touched tokens outside the slice this accessor guards."""


@dataclass(frozen=True)
class StreamSpec:
    length: int
    vocab_size: int
    doc_len: int
    p_follow: float
    follow_mult: int
    follow_inc: int
    seed: int

    def validate(self) -> None:
        if self.length <= 0 or self.vocab_size <= 1 or self.doc_len <= 1:
            raise ValueError("stream dimensions must be positive")
        if not (0.0 <= self.p_follow <= 1.0):
            raise ValueError("p_follow must lie in [0, 1]")


def build_stream(spec: StreamSpec) -> np.ndarray:
    """Generate the token stream; equal ``spec`` values yield identical bits."""
    spec.validate()
    rng = np.random.RandomState(spec.seed)
    uniforms = rng.random_sample(spec.length)
    alternatives = rng.randint(0, spec.vocab_size, spec.length).astype(np.int64)
    return kernels.gen_stream(
        uniforms, alternatives, spec.p_follow, spec.follow_mult, spec.follow_inc, spec.vocab_size
    )


class SliceAccessor:
    """Read-only view of a half-open token range [start, end) of the stream.

    Every read is bounds-checked against the slice, so a candidate handed the
    training accessor cannot reach validation tokens (or vice versa).
    """

    def __init__(self, stream: np.ndarray, start: int, end: int, name: str):
        if not (0 <= start < end <= stream.shape[0]):
            raise ValueError(f"slice [{start}, {end}) outside stream of length {stream.shape[0]}")
        self._stream = stream
        self.start = start
        self.end = end
        self.name = name

    def __len__(self) -> int:
        return self.end - self.start

    def window(self, start: int, length: int) -> np.ndarray:
        """Tokens at absolute positions [start, start+length)."""
        if length <= 0:
            raise SliceBoundsError(f"{self.name}: window length must be positive, got {length}")
        if start < self.start or start + length > self.end:
            raise SliceBoundsError(
                f"{self.name}: window [{start}, {start + length}) escapes slice "
                f"[{self.start}, {self.end})"
            )
        out = self._stream[start : start + length]
        out.flags.writeable = False
        return out
