"""Key/value caches for incremental decoding.

``KvCache`` allocates every layer's K and V buffers once, token-major
(capacity x heads x head_dim), and each append writes a single slot.
``NaiveKvCache`` regrows its arrays on every append; it exists only as the
reference the pre-allocated cache is checked against.
"""
from __future__ import annotations

import numpy as np

from .errors import CapacityExceeded, InvalidConfig, ShapeError


class KvCache:
    def __init__(self, layers: int, heads: int, head_dim: int, capacity: int):
        if min(layers, heads, head_dim, capacity) < 1:
            raise InvalidConfig(
                f"cache dims must be positive, got layers={layers} heads={heads} "
                f"head_dim={head_dim} capacity={capacity}"
            )
        self.layers = layers
        self.heads = heads
        self.head_dim = head_dim
        self.capacity = capacity
        shape = (capacity, heads, head_dim)
        self._k = [np.zeros(shape, dtype=np.float32) for _ in range(layers)]
        self._v = [np.zeros(shape, dtype=np.float32) for _ in range(layers)]
        self._filled = [0] * layers
        self.allocations = 2 * layers

    @property
    def len(self) -> int:
        """Number of tokens appended to every layer."""
        return min(self._filled)

    def __len__(self) -> int:
        return self.len

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._k) + sum(a.nbytes for a in self._v)

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.layers:
            raise IndexError(f"layer {layer} out of range [0, {self.layers})")

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> int:
        """Write one token's K/V for ``layer``; returns the slot index."""
        self._check_layer(layer)
        pos = self._filled[layer]
        if pos >= self.capacity:
            raise CapacityExceeded(f"KV cache full ({self.capacity} tokens) at layer {layer}")
        expect = (self.heads, self.head_dim)
        if np.shape(k) != expect or np.shape(v) != expect:
            raise ShapeError(f"K/V must have shape {expect}, got {np.shape(k)} / {np.shape(v)}")
        self._k[layer][pos] = k
        self._v[layer][pos] = v
        self._filled[layer] = pos + 1
        return pos

    def view(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Read-only views over the written prefix of ``layer`` (no copy)."""
        self._check_layer(layer)
        n = self._filled[layer]
        k = self._k[layer][:n]
        v = self._v[layer][:n]
        k.flags.writeable = False
        v.flags.writeable = False
        return k, v

    def reset(self) -> None:
        self._filled = [0] * self.layers


class NaiveKvCache:
    """Reference cache that reallocates the whole sequence on every append."""

    def __init__(self, layers: int, heads: int, head_dim: int, capacity: int | None = None):
        if min(layers, heads, head_dim) < 1:
            raise InvalidConfig("cache dims must be positive")
        self.layers = layers
        self.heads = heads
        self.head_dim = head_dim
        self.capacity = capacity
        empty = np.zeros((0, heads, head_dim), dtype=np.float32)
        self._k = [empty] * layers
        self._v = [empty] * layers
        self.allocations = 0

    @property
    def len(self) -> int:
        return min(len(k) for k in self._k)

    def __len__(self) -> int:
        return self.len

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> int:
        if not 0 <= layer < self.layers:
            raise IndexError(f"layer {layer} out of range [0, {self.layers})")
        pos = len(self._k[layer])
        if self.capacity is not None and pos >= self.capacity:
            raise CapacityExceeded(f"KV cache full ({self.capacity} tokens)")
        k = np.asarray(k, dtype=np.float32)[None]
        v = np.asarray(v, dtype=np.float32)[None]
        self._k[layer] = np.concatenate([self._k[layer], k])
        self._v[layer] = np.concatenate([self._v[layer], v])
        self.allocations += 2
        return pos

    def view(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= layer < self.layers:
            raise IndexError(f"layer {layer} out of range [0, {self.layers})")
        return self._k[layer], self._v[layer]


def kv_new(layers: int, heads: int, head_dim: int, capacity: int) -> KvCache:
    return KvCache(layers, heads, head_dim, capacity)


def kv_append(cache, layer: int, k, v) -> int:
    return cache.append(layer, k, v)


def kv_view(cache, layer: int):
    return cache.view(layer)
