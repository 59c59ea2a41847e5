"""Deterministic seed derivation shared by trees, forests, the sweep, and the generator.

Every random decision in the package flows from a 64-bit master seed through
splitmix64 mixing, so results are stable across platforms and independent of
scheduling order.
"""

import numpy as np

_MASK = (1 << 64) - 1

# Stream tags keep independent consumers of one master seed decorrelated.
STREAM_FOLD_SEARCH = 0x5F01
STREAM_CV_ASSIGN = 0x5F02
STREAM_FOREST = 0x5F03
STREAM_SYNTH = 0x5F04


def splitmix64(state: int) -> int:
    """One splitmix64 step: a well-mixed 64-bit value from a 64-bit state."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def mix(*values: int) -> int:
    """Fold integers into one 64-bit seed; order-sensitive, collision-resistant."""
    state = 0x243F6A8885A308D3
    for v in values:
        state = splitmix64((state ^ (int(v) & _MASK)) & _MASK)
    return state


def generator(*values: int) -> np.random.Generator:
    """PCG64 generator seeded from mix(*values)."""
    return np.random.Generator(np.random.PCG64(mix(*values)))
