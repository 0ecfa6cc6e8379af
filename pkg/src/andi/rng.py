"""Deterministic keyed random streams.

Every random draw in the package flows through a counter-based Philox
generator derived from ``(base_seed, *path)``. The path is an arbitrary
mix of small integers and strings (e.g. ``("noise", step, sample)``), so a
stream's identity depends only on what it is for, never on the order in
which streams are created or consumed. That is what makes parallel
execution bit-reproducible: workers ask for their stream by key.
"""

import hashlib

import numpy as np

__all__ = ["keyed_rng", "spawn_key", "derive_seed"]

_U32 = 0xFFFFFFFF


def _component_to_u32(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path components must be >= 0, got {part}")
        return int(part) & _U32
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    raise TypeError(f"unsupported stream path component: {part!r}")


def spawn_key(*path) -> tuple:
    """Map a mixed int/str path to the uint32 tuple used as a spawn key."""
    return tuple(_component_to_u32(p) for p in path)


def keyed_rng(seed: int, *path) -> np.random.Generator:
    """Return the Philox generator for stream ``(seed, *path)``.

    Identical arguments always yield an identical stream, independent of
    process, thread, or call order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key(*path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    """Collapse (seed, *path) into a new base seed for a sub-component."""
    material = repr((int(seed),) + spawn_key(*path)).encode("ascii")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "little") >> 1  # non-negative 63-bit
