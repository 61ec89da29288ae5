"""Deterministic derivation of child seeds from a master seed.

Every randomness consumer gets its own child seed derived from the master
seed plus a role label, so adding a new consumer never shifts the streams
of existing ones. The mixer is the splitmix64 finalizer applied to the
label bytes folded into the master seed.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output step (64-bit)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def child_seed(master: int, label: str) -> int:
    """Derive a 64-bit child seed from ``master`` and a role label.

    The label bytes are folded into the running state one at a time, so
    distinct labels give independent streams even when they share a prefix.
    """
    state = master & _MASK64
    for byte in label.encode("utf-8"):
        state = splitmix64(state ^ byte)
    return splitmix64(state)
