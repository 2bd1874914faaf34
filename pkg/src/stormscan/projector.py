"""Temporal projector: per-frame downsampling, sweep-order flattening and a
stack of residual Mamba-style mixer layers, plus a causal streaming mode.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .constants import INIT_SCALE
from .scan import FORWARD, REVERSE, SelectiveScanWeights, scan_parallel
from .tensor import (
    AffineMap,
    ConfigError,
    NormParams,
    Rng,
    ShapeError,
    TokenTensor,
    affine_apply,
    layer_norm,
    rng_fill,
)

BIDIRECTIONAL = "bidirectional"
UNIDIRECTIONAL = "unidirectional"


@dataclass(frozen=True)
class ProjectorConfig:
    """Shapes of the projector.

    The raw frame is a ``(grid_rows * block_rows) x (grid_cols * block_cols)``
    patch grid whose ``block_rows x block_cols = downsample_ratio`` blocks are
    merged into one token. A square ratio gives square blocks (pixel shuffle);
    otherwise blocks are ``1 x r`` runs along a row.
    """

    raw_tokens: int
    downsample_ratio: int
    channels: int
    layers: int
    state_dim: int
    grid_rows: int = 0
    grid_cols: int = 0
    direction_mode: str = BIDIRECTIONAL
    in_channels: int = 0

    def __post_init__(self):
        r = self.downsample_ratio
        if min(self.raw_tokens, r, self.channels, self.state_dim) < 1 or self.layers < 0:
            raise ConfigError(f"invalid projector sizes: {self}")
        if self.raw_tokens % r:
            raise ConfigError(f"downsample ratio {r} does not divide {self.raw_tokens} raw tokens")
        if self.direction_mode not in (BIDIRECTIONAL, UNIDIRECTIONAL):
            raise ConfigError(f"unknown direction_mode {self.direction_mode!r}")
        n = self.raw_tokens // r
        if not self.grid_rows and not self.grid_cols:
            side = math.isqrt(n)
            if side * side != n:
                raise ConfigError(f"{n} tokens per frame is not square; set grid_rows/grid_cols")
            object.__setattr__(self, "grid_rows", side)
            object.__setattr__(self, "grid_cols", side)
        if self.grid_rows * self.grid_cols != n:
            raise ConfigError(f"grid {self.grid_rows}x{self.grid_cols} != {n} tokens per frame")
        if not self.in_channels:
            object.__setattr__(self, "in_channels", self.channels)

    @property
    def tokens_per_frame(self) -> int:
        return self.raw_tokens // self.downsample_ratio

    @property
    def grid(self) -> tuple[int, int]:
        return self.grid_rows, self.grid_cols

    @property
    def block(self) -> tuple[int, int]:
        r = self.downsample_ratio
        side = math.isqrt(r)
        return (side, side) if side * side == r else (1, r)

    @property
    def raw_grid(self) -> tuple[int, int]:
        br, bc = self.block
        return self.grid_rows * br, self.grid_cols * bc

    @property
    def bidirectional(self) -> bool:
        return self.direction_mode == BIDIRECTIONAL


@dataclass(frozen=True)
class MixerWeights:
    norm: NormParams
    forward: SelectiveScanWeights
    backward: SelectiveScanWeights | None
    gate: AffineMap
    out: AffineMap


@dataclass(frozen=True)
class ProjectorWeights:
    downsample: AffineMap  # (r * in_channels) -> channels
    layers: tuple[MixerWeights, ...]

    def check(self, config: ProjectorConfig) -> None:
        d = config.channels
        if (self.downsample.in_dim, self.downsample.out_dim) != (config.downsample_ratio * config.in_channels, d):
            raise ShapeError("downsample map does not match config")
        if len(self.layers) != config.layers:
            raise ShapeError(f"expected {config.layers} layers, got {len(self.layers)}")
        for layer in self.layers:
            if layer.norm.dim != d or layer.forward.channels != d or layer.forward.state_dim != config.state_dim:
                raise ShapeError("layer shapes do not match config")
            if (layer.backward is None) == config.bidirectional:
                raise ShapeError("backward scan weights must exist exactly in bidirectional mode")


def init_projector_weights(config: ProjectorConfig, rng: Rng, scale: float = INIT_SCALE) -> ProjectorWeights:
    d, h = config.channels, config.state_dim

    def amap(in_dim, out_dim):
        return AffineMap(rng_fill(rng, (out_dim, in_dim), scale), rng_fill(rng, out_dim, scale))

    downsample = amap(config.downsample_ratio * config.in_channels, d)
    layers = []
    for _ in range(config.layers):
        fwd = SelectiveScanWeights.init(rng, d, h, scale)
        bwd = SelectiveScanWeights.init(rng, d, h, scale) if config.bidirectional else None
        layers.append(MixerWeights(NormParams.default(d), fwd, bwd, amap(d, d), amap(d, d)))
    return ProjectorWeights(downsample, tuple(layers))


def zero_mixers(weights: ProjectorWeights) -> ProjectorWeights:
    """Same weights with every scan, gate and output map zeroed."""
    layers = []
    for layer in weights.layers:
        d, h = layer.forward.channels, layer.forward.state_dim
        layers.append(
            replace(
                layer,
                forward=SelectiveScanWeights.zeros(d, h),
                backward=None if layer.backward is None else SelectiveScanWeights.zeros(d, h),
                gate=AffineMap.zeros(d, d),
                out=AffineMap.zeros(d, d),
            )
        )
    return replace(weights, layers=tuple(layers))


def downsample_frame(frame, downsample: AffineMap, config: ProjectorConfig) -> np.ndarray:
    """Merge each block of ``r`` adjacent raw tokens into one token.

    ``frame`` is ``(raw_tokens, in_channels)`` in row-major raw-grid order, or
    a stack ``(T, raw_tokens, in_channels)``. Block members are concatenated
    channel-wise (row-major inside the block) and sent through ``downsample``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    lead = frame.shape[:-2]
    if frame.shape[-2:] != (config.raw_tokens, config.in_channels):
        raise ShapeError(f"raw frame must be ({config.raw_tokens}, {config.in_channels}), got {frame.shape[-2:]}")
    br, bc = config.block
    rows, cols = config.grid
    c = config.in_channels
    blocks = frame.reshape(*lead, rows, br, cols, bc, c)
    blocks = np.moveaxis(blocks, -3, -4)  # (..., rows, cols, br, bc, c)
    merged = blocks.reshape(*lead, rows * cols, br * bc * c)
    return affine_apply(downsample, merged)


def downsample_video(raw: TokenTensor, weights: ProjectorWeights, config: ProjectorConfig) -> TokenTensor:
    """Downsample every frame and stack into a ``[T, N, D]`` tensor."""
    return TokenTensor(downsample_frame(raw.data, weights.downsample, config))


def flatten_sweep(x: TokenTensor, grid=None) -> np.ndarray:
    """Sweep order: left-to-right, top-to-bottom, frame-to-frame.

    Position ``t * N + row * cols + col``; a view of the row-major data.
    """
    if grid is not None and grid[0] * grid[1] != x.tokens_per_frame:
        raise ShapeError(f"grid {grid} does not hold {x.tokens_per_frame} tokens")
    return x.flat()


def unflatten_sweep(seq, frames: int, tokens_per_frame: int) -> TokenTensor:
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] != frames * tokens_per_frame:
        raise ShapeError(f"sequence of shape {seq.shape} cannot hold {frames}x{tokens_per_frame} tokens")
    return TokenTensor(seq.reshape(frames, tokens_per_frame, seq.shape[1]))


def silu(z):
    return z * (0.5 * (1.0 + np.tanh(0.5 * z)))


def _mixer(seq, layer: MixerWeights, bidirectional: bool, h0=None):
    u = layer_norm(seq, layer.norm)
    y, h_last = scan_parallel(u, layer.forward, h0, FORWARD)
    if bidirectional:
        y_back, _ = scan_parallel(u, layer.backward, None, REVERSE)
        y = y + y_back
    gate = silu(affine_apply(layer.gate, u))
    return affine_apply(layer.out, y * gate), h_last


def mamba_mixer(seq, layer: MixerWeights, direction_mode: str = BIDIRECTIONAL) -> np.ndarray:
    """Pre-normed gated mixer over a flat ``(L, D)`` token sequence.

    Bidirectional mode sums a forward and a reverse scan with separate
    weights before the ``silu`` gate and output map.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"mixer needs a nonempty (L, D) sequence, got {seq.shape}")
    if direction_mode not in (BIDIRECTIONAL, UNIDIRECTIONAL):
        raise ConfigError(f"unknown direction_mode {direction_mode!r}")
    bidirectional = direction_mode == BIDIRECTIONAL
    if bidirectional and layer.backward is None:
        raise ConfigError("bidirectional mixing needs backward scan weights")
    out, _ = _mixer(seq, layer, bidirectional)
    return out


def projector_forward(x: TokenTensor, weights: ProjectorWeights, config: ProjectorConfig) -> TokenTensor:
    """Residual mixer stack ``X_l = X_{l-1} + mixer(norm(X_{l-1}))`` over the sweep sequence."""
    if x.tokens_per_frame != config.tokens_per_frame or x.channels != config.channels:
        raise ShapeError(f"input shape {x.shape} does not match config (*, {config.tokens_per_frame}, {config.channels})")
    weights.check(config)
    seq = flatten_sweep(x, config.grid)
    for layer in weights.layers:
        seq = seq + mamba_mixer(seq, layer, config.direction_mode)
    return unflatten_sweep(seq, x.frames, x.tokens_per_frame) if weights.layers else x


@dataclass
class ProjectorStream:
    """Carried forward-scan state of every layer; one stream per video."""

    states: list[np.ndarray] = field(default_factory=list)
    frames_seen: int = 0

    @classmethod
    def start(cls, config: ProjectorConfig) -> ProjectorStream:
        if config.bidirectional:
            raise ConfigError("streaming requires unidirectional mode")
        return cls([np.zeros((config.channels, config.state_dim)) for _ in range(config.layers)])


def projector_stream_step(frame, weights: ProjectorWeights, config: ProjectorConfig, stream: ProjectorStream) -> np.ndarray:
    """Project the next frame ``(N, D)`` given all earlier frames' carried state."""
    if config.bidirectional:
        raise ConfigError("streaming requires unidirectional mode")
    seq = np.asarray(frame, dtype=np.float64)
    if seq.shape != (config.tokens_per_frame, config.channels):
        raise ShapeError(f"frame must be ({config.tokens_per_frame}, {config.channels}), got {seq.shape}")
    for i, layer in enumerate(weights.layers):
        out, stream.states[i] = _mixer(seq, layer, False, stream.states[i])
        seq = seq + out
    stream.frames_seen += 1
    return seq


def sensitivity_matrix(
    weights: ProjectorWeights,
    config: ProjectorConfig,
    frames: int,
    probe_scale: float = 1e-3,
    seed: int = 0,
    base: TokenTensor | None = None,
) -> np.ndarray:
    """How strongly each input frame moves each output frame.

    ``S[t_out, t_in] = ||F(X + probe_scale * P_{t_in})[t_out] - F(X)[t_out]|| / probe_scale``
    where ``P_{t_in}`` is a fixed random direction supported on frame ``t_in``.
    """
    if frames < 2:
        raise ConfigError("sensitivity needs at least two frames")
    rng = Rng(seed)
    shape = (frames, config.tokens_per_frame, config.channels)
    if base is None:
        base = TokenTensor(rng_fill(rng, shape, 1.0))
    elif base.shape != shape:
        raise ShapeError(f"base tensor must be {shape}, got {base.shape}")
    direction = rng_fill(rng, shape[1:], 1.0)
    ref = projector_forward(base, weights, config).data
    s = np.zeros((frames, frames))
    for t_in in range(frames):
        probe = base.data.copy()
        probe[t_in] += probe_scale * direction
        out = projector_forward(TokenTensor(probe), weights, config).data
        s[:, t_in] = np.linalg.norm((out - ref).reshape(frames, -1), axis=1) / probe_scale
    return s


# -- weight container ---------------------------------------------------------

MAGIC = b"STRM"
FORMAT_VERSION = 1
_CONFIG_FIELDS = (
    "raw_tokens",
    "downsample_ratio",
    "in_channels",
    "channels",
    "layers",
    "state_dim",
    "grid_rows",
    "grid_cols",
)


def _weight_arrays(weights: ProjectorWeights) -> list[np.ndarray]:
    arrays = [weights.downsample.weight, weights.downsample.bias]
    for layer in weights.layers:
        arrays += [layer.norm.gamma, layer.norm.beta, np.array([layer.norm.eps])]
        arrays += layer.forward.flat_params()
        if layer.backward is not None:
            arrays += layer.backward.flat_params()
        arrays += [layer.gate.weight, layer.gate.bias, layer.out.weight, layer.out.bias]
    return arrays


def save_weights(path, weights: ProjectorWeights, config: ProjectorConfig) -> None:
    """Write the ``STRM`` container (layout documented in the README)."""
    weights.check(config)
    header = MAGIC + struct.pack("<I", FORMAT_VERSION)
    header += struct.pack("<9I", *(getattr(config, f) for f in _CONFIG_FIELDS), int(config.bidirectional))
    body = np.concatenate([np.ravel(a) for a in _weight_arrays(weights)]).astype("<f8")
    Path(path).write_bytes(header + body.tobytes())


def load_weights(path) -> tuple[ProjectorWeights, ProjectorConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError("not a STRM weight file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported STRM version {version}")
    fields = struct.unpack_from("<9I", blob, 8)
    config = ProjectorConfig(
        **dict(zip(_CONFIG_FIELDS, fields[:8])),
        direction_mode=BIDIRECTIONAL if fields[8] else UNIDIRECTIONAL,
    )
    values = np.frombuffer(blob, dtype="<f8", offset=8 + 9 * 4).astype(np.float64)
    # reuse a template for the shapes, then fill it in declaration order
    template = _weight_arrays(init_projector_weights(config, Rng(0)))
    if values.size != sum(a.size for a in template):
        raise ValueError("STRM payload size does not match its header")
    arrays, pos = [], 0
    for a in template:
        arrays.append(values[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    it = iter(arrays)
    downsample = AffineMap(next(it), next(it))
    layers = []
    for _ in range(config.layers):
        norm = NormParams(next(it), next(it), float(next(it)[0]))
        fwd = SelectiveScanWeights.from_flat([next(it) for _ in range(7)])
        bwd = SelectiveScanWeights.from_flat([next(it) for _ in range(7)]) if config.bidirectional else None
        layers.append(MixerWeights(norm, fwd, bwd, AffineMap(next(it), next(it)), AffineMap(next(it), next(it))))
    return ProjectorWeights(downsample, tuple(layers)), config
