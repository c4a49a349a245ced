"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose 128-bit
key is derived from ``(seed, tag, *index)``. Two streams with different tags or
indices never share state, so any component (a mask, a noise vector, the i-th
measurement tensor) can be regenerated on its own without replaying others.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

_MASK64 = (1 << 64) - 1


def resolve_seed(seed: int) -> int:
    """Return ``seed``, overridden by the ``TUCKER_SEED`` environment variable if set."""
    env = os.environ.get("TUCKER_SEED")
    if env is not None and env.strip():
        return int(env) & _MASK64
    return int(seed) & _MASK64


def _key(seed: int, tag: str, index: tuple[int, ...]) -> np.ndarray:
    h = hashlib.blake2b(digest_size=8)
    h.update(tag.encode())
    for i in index:
        h.update(int(i).to_bytes(8, "little", signed=False))
    return np.array([int(seed) & _MASK64, int.from_bytes(h.digest(), "little")], dtype=np.uint64)


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """A fresh generator keyed by ``(seed, tag, *index)``."""
    return np.random.Generator(np.random.Philox(key=_key(seed, tag, index)))


def random_orthonormal(n: int, r: int, gen: np.random.Generator) -> np.ndarray:
    """QR of an i.i.d. Gaussian ``n x r`` matrix, signs fixed so that diag(R) > 0."""
    q, rr = np.linalg.qr(gen.standard_normal((n, r)))
    s = np.sign(np.diag(rr))
    s[s == 0] = 1.0
    return q * s
