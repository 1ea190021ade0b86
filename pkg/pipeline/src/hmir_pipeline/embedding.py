"""Pluggable text-image embedders.

The export path only assumes the small protocol below, so a real pretrained
model can be dropped in.  The shipped implementation is a deterministic stand
in: every input is digested with SHA-256 and the digest seeds the vector, so
identical inputs embed identically across runs and platforms while distinct
inputs land far apart.  It carries no semantics, which is enough for format
level work and tests.
"""

from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np


class Embedder(Protocol):
    dim: int

    def embed_images(self, rasters: Sequence[np.ndarray]) -> np.ndarray:
        """(n, dim) float32, unit rows, one per raster."""

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """(n, dim) float32, unit rows, one per string."""


class HashEmbedder:
    """Deterministic content-addressed vectors (see module docstring)."""

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be at least 1")
        self.dim = dim
        self.seed = seed

    def _vector(self, payload: bytes, domain: bytes) -> np.ndarray:
        digest = hashlib.sha256(
            domain + self.seed.to_bytes(8, "little", signed=True) + payload
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed_images(self, rasters: Sequence[np.ndarray]) -> np.ndarray:
        rows = []
        for raster in rasters:
            arr = np.ascontiguousarray(raster, dtype=np.uint8)
            shape = ",".join(str(s) for s in arr.shape).encode()
            rows.append(self._vector(shape + b";" + arr.tobytes(), b"image:"))
        return np.stack(rows) if rows else np.empty((0, self.dim), dtype=np.float32)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows = [self._vector(t.encode("utf-8"), b"text:") for t in texts]
        return np.stack(rows) if rows else np.empty((0, self.dim), dtype=np.float32)
