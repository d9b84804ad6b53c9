"""Prompt embeddings and the angular prompt pseudometric.

Distances are always computed on unit-normalized embeddings, so two prompts
whose embeddings are positive multiples of each other are at distance zero.
"""

from __future__ import annotations

import hashlib
import logging
import math
from typing import Protocol, Sequence, runtime_checkable

import httpx
import numpy as np
from numpy.typing import ArrayLike, NDArray

from ._http import EndpointConfig, JsonClient
from .errors import InvalidEmbeddingError, ProtocolError

logger = logging.getLogger(__name__)

EmbeddingVector = NDArray[np.float64]

# cosine overshoot beyond this is a bug upstream, not rounding
CLAMP_SLACK = 1e-9
# above this |cos| arccos loses ~sqrt(eps) accuracy; use the half-angle form
_NEAR_POLE = 0.9999


def as_embedding(v: ArrayLike) -> EmbeddingVector:
    """Validate and convert to a 1-D float64 array with positive finite norm."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidEmbeddingError(f"embedding must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidEmbeddingError("embedding contains non-finite values")
    if not np.linalg.norm(arr) > 0.0:
        raise InvalidEmbeddingError("zero-norm embedding")
    return arr


def normalize(v: ArrayLike) -> EmbeddingVector:
    arr = as_embedding(v)
    return arr / np.linalg.norm(arr)


def _clamped_cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    cos = float(np.dot(a, b))
    if abs(cos) > 1.0 + CLAMP_SLACK:
        raise InvalidEmbeddingError(f"cosine {cos!r} out of range; inputs were not unit vectors")
    return min(1.0, max(-1.0, cos))


def angular_distance(a: ArrayLike, b: ArrayLike) -> float:
    """Geodesic angle between ``a`` and ``b`` on the unit sphere, in [0, pi]."""
    na, nb = normalize(a), normalize(b)
    if na.shape != nb.shape:
        raise InvalidEmbeddingError(f"dimension mismatch: {na.shape[0]} vs {nb.shape[0]}")
    cos = _clamped_cosine(na, nb)
    if abs(cos) > _NEAR_POLE:
        return 2.0 * math.atan2(float(np.linalg.norm(na - nb)), float(np.linalg.norm(na + nb)))
    return math.acos(cos)


def pairwise_angular(rows: ArrayLike, cols: ArrayLike | None = None) -> NDArray[np.float64]:
    """Matrix of angular distances between rows of ``rows`` and rows of ``cols``."""
    x = np.asarray(rows, dtype=np.float64)
    y = x if cols is None else np.asarray(cols, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise InvalidEmbeddingError("pairwise_angular expects two 2-D arrays of equal width")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx <= 0) or np.any(ny <= 0):
        raise InvalidEmbeddingError("zero-norm embedding in pairwise input")
    ux, uy = x / nx[:, None], y / ny[:, None]
    cos = ux @ uy.T
    if np.any(np.abs(cos) > 1.0 + CLAMP_SLACK):
        raise InvalidEmbeddingError("cosine out of range in pairwise input")
    out = np.arccos(np.clip(cos, -1.0, 1.0))
    for i, j in zip(*np.nonzero(np.abs(cos) > _NEAR_POLE)):
        out[i, j] = 2.0 * math.atan2(
            float(np.linalg.norm(ux[i] - uy[j])), float(np.linalg.norm(ux[i] + uy[j]))
        )
    return out


@runtime_checkable
class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


class HashingEmbedder:
    """Dependency-free deterministic embedder for tests and mock deployments.

    Character n-grams (default trigrams) of the boundary-padded text are hashed
    into ``dim`` buckets with a keyed BLAKE2b; the bucket counts are
    unit-normalized. Counts are nonnegative and every text yields at least one
    n-gram, so the vector is never zero.
    """

    kind = "deterministic-test"

    def __init__(self, dim: int = 64, n: int = 3, seed: int = 0) -> None:
        if dim <= 0 or n <= 0:
            raise ValueError("dim and n must be positive")
        self.dim = dim
        self.n = n
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> EmbeddingVector:
        pad = "\x02" * (self.n - 1)
        padded = pad + text + "\x03" * (self.n - 1)
        counts = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(padded) - self.n + 1):
            counts[self._bucket(padded[i : i + self.n])] += 1.0
        return normalize(counts)


class RemoteEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    kind = "remote-endpoint"

    def __init__(
        self,
        endpoint: EndpointConfig,
        dim: int,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.dim = dim
        self.endpoint = endpoint
        self._client = JsonClient(endpoint, "embedder", transport=transport)

    def embed(self, text: str) -> EmbeddingVector:
        body = self._client.post({"model": self.endpoint.model, "input": [text]})
        try:
            vec = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("embeddings response lacks data[0].embedding") from exc
        arr = as_embedding(vec)
        if arr.shape[0] != self.dim:
            raise InvalidEmbeddingError(f"embedder returned dim {arr.shape[0]}, configured {self.dim}")
        return arr


class CachedEmbedder:
    """Per-call memo keyed on exact text; construct a fresh one per projection."""

    def __init__(self, inner: Embedder) -> None:
        self.inner = inner
        self.dim = inner.dim
        self._cache: dict[str, EmbeddingVector] = {}

    def embed(self, text: str) -> EmbeddingVector:
        hit = self._cache.get(text)
        if hit is None:
            vec = as_embedding(self.inner.embed(text))
            if vec.shape[0] != self.dim:
                raise InvalidEmbeddingError(f"embedder returned dim {vec.shape[0]}, expected {self.dim}")
            hit = self._cache[text] = vec
        return hit


def text_distance(embedder: Embedder, a: str, b: str) -> float:
    return angular_distance(embedder.embed(a), embedder.embed(b))


def centroid(vectors: Sequence[ArrayLike]) -> EmbeddingVector:
    """Mean of the unit-normalized vectors (not itself renormalized)."""
    if len(vectors) == 0:
        raise InvalidEmbeddingError("centroid of an empty set")
    return np.mean(np.stack([normalize(v) for v in vectors]), axis=0)
