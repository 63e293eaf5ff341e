"""Counter-based random streams.

Every source of randomness in the library is a numpy Philox generator keyed
by ``(seed, purpose, index)``. Philox is counter-based, so distinct keys give
independent, bit-reproducible streams regardless of how work is split across
workers.
"""

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; also used as the container checksum."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, purpose, index) triple."""
    tag = purpose.encode("utf-8") + index.to_bytes(8, "little", signed=False)
    key = np.array(
        [np.uint64(seed & _MASK64), np.uint64(fnv1a64(tag))], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))
