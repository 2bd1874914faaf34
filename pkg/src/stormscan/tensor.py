"""Dense float64 substrate: token tensors, affine maps, layer norm, seeded RNG."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import LAYER_NORM_EPS


class ShapeError(ValueError):
    """Raised when array shapes disagree with a declared contract."""


class ConfigError(ValueError):
    """Raised for invalid configuration (divisibility, modes, grids)."""


def _as_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class TokenTensor:
    """Token array laid out row-major as [frames, tokens_per_frame, channels]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_finite(self.data, "TokenTensor")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"TokenTensor needs shape (T>=1, N>=1, D>=1), got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        """Frame-major (T*N, D) view; no copy."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class AffineMap:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        w = _as_finite(self.weight, "weight")
        b = _as_finite(self.bias, "bias")
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"inconsistent affine shapes {w.shape} / {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> AffineMap:
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))

    @classmethod
    def identity(cls, dim: int) -> AffineMap:
        return cls(np.eye(dim), np.zeros(dim))


def affine_apply(amap: AffineMap, x) -> np.ndarray:
    """Evaluate ``weight @ x + bias``.

    ``x`` may be a single vector of length ``in_dim`` or a stack of row
    vectors with trailing dimension ``in_dim``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (amap.in_dim,):
        raise ShapeError(f"expected trailing dim {amap.in_dim}, got shape {x.shape}")
    return x @ amap.weight.T + amap.bias


@dataclass(frozen=True)
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = LAYER_NORM_EPS

    def __post_init__(self):
        g = _as_finite(self.gamma, "gamma")
        b = _as_finite(self.beta, "beta")
        if g.ndim != 1 or g.shape != b.shape:
            raise ShapeError(f"gamma/beta shapes differ: {g.shape} vs {b.shape}")
        if not self.eps > 0:
            raise ConfigError("layer norm eps must be positive")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def default(cls, dim: int, eps: float = LAYER_NORM_EPS) -> NormParams:
        return cls(np.ones(dim), np.zeros(dim), eps)


def layer_norm(x, params: NormParams) -> np.ndarray:
    """Normalize over the last axis using the population variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.dim,):
        raise ShapeError(f"expected trailing dim {params.dim}, got shape {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return params.gamma * (centered / np.sqrt(var + params.eps)) + params.beta


@dataclass
class Rng:
    """Counter-based generator (Philox 4x64) with an explicit draw counter.

    Uniforms are built from the raw 64-bit words as ``(word >> 11) * 2**-53``,
    so the stream depends only on the Philox algorithm, not on numpy's
    distribution code.
    """

    seed: int
    counter: int = 0
    _bitgen: np.random.Philox = field(init=False, repr=False)

    def __post_init__(self):
        self._bitgen = np.random.Philox(key=self.seed & _MASK64)
        if self.counter:
            self._bitgen.random_raw(self.counter)

    def raw(self, n: int) -> np.ndarray:
        words = self._bitgen.random_raw(n)
        self.counter += n
        return np.atleast_1d(np.asarray(words, dtype=np.uint64))

    def unit(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def spawn(self, stream: int) -> Rng:
        """Independent child generator keyed off this seed and ``stream``."""
        return Rng(_splitmix64((self.seed * 0x9E3779B97F4A7C15 + stream + 1) & _MASK64))


_MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def rng_fill(rng: Rng, shape, scale: float) -> np.ndarray:
    """Uniform draws in ``[-scale, scale]`` with the given shape."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    u = rng.unit(n) if n else np.zeros(0)
    return (scale * (2.0 * u - 1.0)).reshape(shape)


def rng_uniform(rng: Rng, shape, low: float, high: float) -> np.ndarray:
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    return (low + (high - low) * rng.unit(n)).reshape(shape)
