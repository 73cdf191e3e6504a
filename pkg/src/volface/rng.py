"""Counter-based seed derivation.

All stochastic streams (dataset generation, pair sampling, render jitter)
derive their seeds from (base seed, structural indices) with a splitmix64
hash, so any step of any run is reproducible in isolation and resuming a run
mid-stream is bitwise identical to never stopping.
"""

from __future__ import annotations

import zlib

_MASK = 0xFFFFFFFFFFFFFFFF


def _mix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix_seed(*parts: int | str) -> int:
    """Hash structural parts (ints or short strings) into a torch-safe seed."""
    state = 0
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode("utf-8"))
        state = _mix(state ^ (int(part) & _MASK))
    return state & 0x7FFFFFFFFFFFFFFF
