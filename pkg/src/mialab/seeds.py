"""Per-purpose seed derivation from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, role: str, *extra: int) -> int:
    """Stable 63-bit seed for ``role`` (e.g. ``"split"``, ``"shadow"``) under ``master``."""
    words = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF, zlib.crc32(role.encode())]
    words += [int(e) & 0xFFFFFFFF for e in extra]
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
