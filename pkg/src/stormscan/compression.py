"""Temporal/spatial average pooling, temporal sampling and token-budget arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .tensor import ConfigError, TokenTensor


@dataclass(frozen=True)
class CompressionSpec:
    """Pooling/sampling factors; 1 means the stage is off.

    ``spatial_pool_p`` is an areal factor: a sqrt(p) x sqrt(p) window with
    the same stride, so p=4 turns a 16x16 grid into 8x8.
    Stages always run spatial pool, temporal pool, temporal sample.
    """

    temporal_pool_k: int = 1
    spatial_pool_p: int = 1
    temporal_sample_s: int = 1

    def __post_init__(self):
        for name in ("temporal_pool_k", "spatial_pool_p", "temporal_sample_s"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v}")
        if math.isqrt(self.spatial_pool_p) ** 2 != self.spatial_pool_p:
            raise ConfigError(f"spatial_pool_p must be a perfect square, got {self.spatial_pool_p}")

    @property
    def spatial_window(self) -> int:
        return math.isqrt(self.spatial_pool_p)

    @property
    def factor(self) -> int:
        return self.temporal_pool_k * self.spatial_pool_p * self.temporal_sample_s

    @property
    def is_off(self) -> bool:
        return self.factor == 1

    def label(self) -> str:
        parts = [
            f"{tag}={v}"
            for tag, v in (("k", self.temporal_pool_k), ("p", self.spatial_pool_p), ("s", self.temporal_sample_s))
            if v > 1
        ]
        return ",".join(parts) or "none"


@dataclass(frozen=True)
class BudgetReport:
    frames_in: int
    tokens_per_frame_in: int
    frames_out: int
    tokens_out: int  # per frame
    total_tokens: int
    ratio_percent: float
    budget: int
    within_budget: bool


def round_percent(value: float) -> float:
    """Two-decimal half-up rounding (3.125 -> 3.13)."""
    return float(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def compression_ratio(spec: CompressionSpec) -> float:
    """Surviving token percentage 100/(k*p*s), rounded to two decimals."""
    return round_percent(100.0 / spec.factor)


def _square_grid(n: int) -> tuple[int, int]:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigError(f"cannot infer a square grid for {n} tokens; pass grid=(rows, cols)")
    return side, side


def _resolve_grid(n: int, grid) -> tuple[int, int]:
    rows, cols = grid if grid is not None else _square_grid(n)
    if rows * cols != n:
        raise ConfigError(f"grid {rows}x{cols} does not hold {n} tokens")
    return rows, cols


def output_shape(frames: int, tokens: int, spec: CompressionSpec, grid=None) -> tuple[int, int]:
    """``(T', N')`` after :func:`apply_compression`; raises on invalid specs."""
    if frames % spec.temporal_pool_k:
        raise ConfigError(f"temporal_pool_k={spec.temporal_pool_k} does not divide T={frames}")
    if spec.spatial_pool_p > 1:
        rows, cols = _resolve_grid(tokens, grid)
        q = spec.spatial_window
        if rows % q or cols % q:
            raise ConfigError(f"window {q} does not tile the {rows}x{cols} grid")
    frames_out = -(-(frames // spec.temporal_pool_k) // spec.temporal_sample_s)
    return frames_out, tokens // spec.spatial_pool_p


def temporal_pool(x: TokenTensor, k: int) -> TokenTensor:
    """Average every ``k`` consecutive frames; ``k`` must divide T."""
    if k < 1 or x.frames % k:
        raise ConfigError(f"temporal pool factor {k} does not divide T={x.frames}")
    if k == 1:
        return x
    t, n, d = x.shape
    return TokenTensor(x.data.reshape(t // k, k, n, d).mean(axis=1))


def spatial_pool(x: TokenTensor, p: int, grid=None) -> TokenTensor:
    """Per-frame 2D average pooling with window and stride sqrt(p)."""
    q = math.isqrt(p)
    if p < 1 or q * q != p:
        raise ConfigError(f"spatial pool factor must be a perfect square, got {p}")
    if p == 1:
        return x
    rows, cols = _resolve_grid(x.tokens_per_frame, grid)
    if rows % q or cols % q:
        raise ConfigError(f"window {q} does not tile the {rows}x{cols} grid")
    t, _, d = x.shape
    blocks = x.data.reshape(t, rows // q, q, cols // q, q, d)
    return TokenTensor(blocks.mean(axis=(2, 4)).reshape(t, -1, d))


def temporal_sample(x: TokenTensor, s: int) -> TokenTensor:
    """Keep frames 0, s, 2s, ... unchanged."""
    if s < 1:
        raise ConfigError(f"sampling stride must be >= 1, got {s}")
    if s == 1:
        return x
    return TokenTensor(x.data[::s])


def apply_compression(x: TokenTensor, spec: CompressionSpec, grid=None) -> TokenTensor:
    output_shape(x.frames, x.tokens_per_frame, spec, grid)
    x = spatial_pool(x, spec.spatial_pool_p, grid)
    x = temporal_pool(x, spec.temporal_pool_k)
    return temporal_sample(x, spec.temporal_sample_s)


def token_budget_check(frames: int, tokens: int, spec: CompressionSpec, budget: int, grid=None) -> BudgetReport:
    frames_out, tokens_out = output_shape(frames, tokens, spec, grid)
    total = frames_out * tokens_out
    return BudgetReport(
        frames_in=frames,
        tokens_per_frame_in=tokens,
        frames_out=frames_out,
        tokens_out=tokens_out,
        total_tokens=total,
        ratio_percent=100.0 * total / (frames * tokens),
        budget=budget,
        within_budget=total <= budget,
    )


# Rows of the compression ablation: (label, spec)
ABLATION_TABLE = (
    ("no compression", CompressionSpec()),
    ("T. sampling", CompressionSpec(temporal_sample_s=2)),
    ("T. pooling", CompressionSpec(temporal_pool_k=4)),
    ("S. pooling", CompressionSpec(spatial_pool_p=4)),
    ("T. sampling + T. pooling", CompressionSpec(temporal_pool_k=4, temporal_sample_s=2)),
    ("T. sampling + S. pooling", CompressionSpec(spatial_pool_p=4, temporal_sample_s=2)),
    ("T. pooling + S. pooling", CompressionSpec(temporal_pool_k=4, spatial_pool_p=4)),
    ("T. sampling + T. pooling + S. pooling", CompressionSpec(temporal_pool_k=4, spatial_pool_p=4, temporal_sample_s=2)),
)


def ratio_table() -> list[tuple[str, CompressionSpec, float]]:
    return [(label, spec, compression_ratio(spec)) for label, spec in ABLATION_TABLE]

