"""Grid data types and the pooling / normalization primitives the rest of the
engine is built on. Everything here is pure and operates in double precision."""

from __future__ import annotations

import numpy as np

# Below this range a map is treated as constant (no usable signal).
EPS_NORM = 1e-12

NORM_MINMAX = "minmax"
NORM_SOFTMAX = "softmax"
NORM_KINDS = (NORM_MINMAX, NORM_SOFTMAX)


def _finite_f64(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


class FeatureMap:
    """An H x W x d activation grid for one image. Immutable after construction."""

    __slots__ = ("_values",)

    def __init__(self, values) -> None:
        arr = _finite_f64(values, "FeatureMap")
        if arr.ndim != 3:
            raise ValueError(f"FeatureMap needs an H x W x d array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"FeatureMap dimensions must all be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def channels(self) -> int:
        return self._values.shape[2]

    def __repr__(self) -> str:
        return f"FeatureMap(height={self.height}, width={self.width}, channels={self.channels})"


class ActivationMap:
    """An H x W scalar map (raw activation, normalized mask, or aggregate)."""

    __slots__ = ("_values",)

    def __init__(self, values) -> None:
        arr = _finite_f64(values, "ActivationMap")
        if arr.ndim != 2:
            raise ValueError(f"ActivationMap needs an H x W array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"ActivationMap dimensions must all be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    def __repr__(self) -> str:
        return f"ActivationMap(height={self.height}, width={self.width})"


class EmbeddingVector:
    """A length-d embedding, the pooled representation of one image."""

    __slots__ = ("_values",)

    def __init__(self, values) -> None:
        arr = _finite_f64(values, "EmbeddingVector")
        if arr.ndim != 1 or arr.shape[0] < 1:
            raise ValueError(f"EmbeddingVector needs a 1-d array, got shape {arr.shape}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return self._values.shape[0]

    def __repr__(self) -> str:
        return f"EmbeddingVector(dim={self.dim})"


def spatial_avg_pool(f: FeatureMap) -> EmbeddingVector:
    """Mean over all spatial locations, one value per channel."""
    return EmbeddingVector(f.values.mean(axis=(0, 1)))


def minmax_norm(m: ActivationMap) -> ActivationMap:
    """Affine rescale of a map into [0, 1].

    A map whose range is below EPS_NORM carries no localization signal and maps
    to all zeros, which makes a subsequent mask application a no-op.
    """
    lo = float(m.values.min())
    hi = float(m.values.max())
    if hi - lo < EPS_NORM:
        return ActivationMap(np.zeros_like(m.values))
    return ActivationMap((m.values - lo) / (hi - lo))


def spatial_softmax(m: ActivationMap, peak_rescale: bool = False) -> ActivationMap:
    """Softmax over all spatial cells, stabilized by max subtraction.

    The plain output sums to 1 over the grid, so on large grids every value is
    tiny. With peak_rescale the map is divided by its maximum so the strongest
    cell is exactly 1, which keeps (1 - mask) suppression meaningful.
    """
    shifted = m.values - m.values.max()
    e = np.exp(shifted)
    out = e / e.sum()
    if peak_rescale:
        out = out / out.max()
    return ActivationMap(out)


def mask_apply(f: FeatureMap, m: ActivationMap) -> FeatureMap:
    """Suppress every channel of f by (1 - mask) at each location."""
    if (f.height, f.width) != (m.height, m.width):
        raise ValueError(
            f"mask shape ({m.height}, {m.width}) does not match "
            f"feature map ({f.height}, {f.width})"
        )
    vals = m.values
    if float(vals.min()) < 0.0 or float(vals.max()) > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return FeatureMap(f.values * (1.0 - vals)[:, :, None])
