"""SplitMix64: the 64-bit generator shared by trainer and shards.

Negative sampling must produce identical draws on every shard of a
distributed run (and in the reference trainer) from a broadcast seed, so
the generator is part of the wire contract rather than an implementation
detail. Reference: Steele, Lea & Flood's SplitMix mixing constants.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(value: int) -> int:
    """One SplitMix64 output step on a 64-bit state value."""
    z = value & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return mix64(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(base: int, *parts: int) -> int:
    """Deterministic 64-bit sub-seed from a base seed and integer tags."""
    state = mix64(base)
    for part in parts:
        state = mix64(state ^ (((part & _MASK64) + 1) * _GOLDEN & _MASK64))
    return state
