"""Desk-scale end-to-end pipeline with per-stage timing.

vision stub -> downsample + projector -> compression -> toy attention stage.
The attention stage is a prefill-only stand-in whose cost grows as M^2 in
the number of visual tokens it receives.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import constants as C
from .compression import CompressionSpec, apply_compression, output_shape
from .projector import (
    ProjectorConfig,
    ProjectorWeights,
    downsample_video,
    init_projector_weights,
    projector_forward,
)
from .tensor import AffineMap, Rng, ShapeError, TokenTensor, affine_apply, rng_fill

log = logging.getLogger(__name__)

STAGES = ("vision", "projector", "compression", "llm")
_QUERY_BLOCK = 1024


@dataclass(frozen=True)
class PipelineConfig:
    projector: ProjectorConfig
    compression: CompressionSpec = CompressionSpec()
    llm_dim: int = C.DEFAULT_LLM_DIM
    llm_layers: int = C.DEFAULT_LLM_LAYERS
    frames: int = 32
    budget: int = 8192
    repetitions: int = 3
    warmup: int = 1
    patch_size: int = 4
    color_channels: int = 3

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if min(self.llm_dim, self.frames, self.patch_size, self.color_channels) < 1 or self.llm_layers < 0:
            raise ValueError("pipeline sizes must be positive")

    @classmethod
    def desk(cls, frames: int = 32, compression: CompressionSpec = CompressionSpec(), **kw) -> PipelineConfig:
        """Desk-scale defaults: D=64, H=16, L=2, 8x8 raw grid, r=4, 2 attention layers of width 64."""
        projector = ProjectorConfig(
            raw_tokens=C.DEFAULT_RAW_TOKENS,
            downsample_ratio=C.DEFAULT_RATIO,
            channels=C.DEFAULT_CHANNELS,
            layers=C.DEFAULT_LAYERS,
            state_dim=C.DEFAULT_STATE_DIM,
        )
        return cls(projector=projector, compression=compression, frames=frames, **kw)

    @property
    def pixel_shape(self) -> tuple[int, int, int]:
        rows, cols = self.projector.raw_grid
        return rows * self.patch_size, cols * self.patch_size, self.color_channels


@dataclass(frozen=True)
class LlmWeights:
    embed: AffineMap  # projector channels -> llm_dim
    layers: tuple[tuple[AffineMap, AffineMap, AffineMap, AffineMap, AffineMap], ...]  # q, k, v, o, ff


@dataclass(frozen=True)
class PipelineWeights:
    stub: AffineMap  # color channels -> projector in_channels
    projector: ProjectorWeights
    llm: LlmWeights


def init_pipeline_weights(config: PipelineConfig, seed: int = C.DEFAULT_SEED) -> PipelineWeights:
    rng = Rng(seed)
    pc = config.projector

    def amap(in_dim, out_dim):
        return AffineMap(rng_fill(rng, (out_dim, in_dim), C.INIT_SCALE), rng_fill(rng, out_dim, C.INIT_SCALE))

    stub = AffineMap(rng_fill(rng, (pc.in_channels, config.color_channels), 1.0), rng_fill(rng, pc.in_channels, 0.1))
    projector = init_projector_weights(pc, rng.spawn(1))
    d = config.llm_dim
    llm = LlmWeights(
        embed=amap(pc.channels, d),
        layers=tuple(tuple(amap(d, d) for _ in range(5)) for _ in range(config.llm_layers)),
    )
    return PipelineWeights(stub, projector, llm)


def vision_stub_encode(video, stub: AffineMap, config: PipelineConfig) -> TokenTensor:
    """Patch-mean featurization: ``(T, H, W, c)`` pixels -> ``(T, raw_tokens, in_channels)``.

    Each patch's per-color mean goes through the fixed projection ``stub``;
    frames are encoded independently.
    """
    video = np.asarray(video, dtype=np.float64)
    rows, cols = config.projector.raw_grid
    ps = config.patch_size
    if video.ndim != 4 or video.shape[1:] != config.pixel_shape:
        raise ShapeError(f"video must be (T, {rows * ps}, {cols * ps}, {config.color_channels}), got {video.shape}")
    t = video.shape[0]
    means = video.reshape(t, rows, ps, cols, ps, config.color_channels).mean(axis=(2, 4))
    return TokenTensor(affine_apply(stub, means.reshape(t, rows * cols, config.color_channels)))


def _softmax_rows(scores):
    scores = scores - scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores


def attention_stage(tokens, llm: LlmWeights) -> np.ndarray:
    """Single-head softmax self-attention stack, mean-pooled to one vector.

    Per layer: ``h += o(softmax(q k^T / sqrt(d)) v)`` then ``h += ff(h)``.
    There are no position terms, so the result is invariant to token order.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ShapeError(f"attention stage needs (M>=1, D) tokens, got {tokens.shape}")
    h = affine_apply(llm.embed, tokens)
    scale = 1.0 / np.sqrt(h.shape[1])
    for q_map, k_map, v_map, o_map, ff_map in llm.layers:
        q = affine_apply(q_map, h) * scale
        k = affine_apply(k_map, h)
        v = affine_apply(v_map, h)
        mixed = np.empty_like(h)
        for start in range(0, h.shape[0], _QUERY_BLOCK):
            stop = start + _QUERY_BLOCK
            mixed[start:stop] = _softmax_rows(q[start:stop] @ k.T) @ v
        h = h + affine_apply(o_map, mixed)
        h = h + affine_apply(ff_map, h)
    return h.mean(axis=0)


@dataclass
class PipelineReport:
    frames: int
    compression: str
    ratio_percent: float
    vision_ns: int
    projector_ns: int
    compression_ns: int
    llm_ns: int
    overall_ns: int
    tokens_raw: int
    tokens_in: int  # entering compression
    tokens_out: int  # handed to the attention stage
    frames_out: int
    tokens_per_frame_out: int
    within_budget: bool
    llm_share: float
    cv: dict[str, float] = field(default_factory=dict)
    noisy: bool = False
    checksum: float = 0.0  # sum of the pooled attention output; a non-timing fingerprint


def _median_ns(samples) -> int:
    return int(statistics.median(samples))


def _cv(samples) -> float:
    mean = statistics.fmean(samples)
    return statistics.pstdev(samples) / mean if mean > 0 else 0.0


def run_pipeline(config: PipelineConfig, video, weights: PipelineWeights | None = None) -> PipelineReport:
    """Run every stage ``warmup + repetitions`` times; report medians.

    Compression validity is checked before any timing starts.
    """
    pc = config.projector
    video = np.asarray(video, dtype=np.float64)
    frames = video.shape[0]
    frames_out, n_out = output_shape(frames, pc.tokens_per_frame, config.compression, pc.grid)
    if weights is None:
        weights = init_pipeline_weights(config)

    samples: dict[str, list[int]] = {s: [] for s in STAGES}
    clock = time.perf_counter_ns
    with threadpool_limits(limits=1):
        for rep in range(config.warmup + config.repetitions):
            t0 = clock()
            raw = vision_stub_encode(video, weights.stub, config)
            t1 = clock()
            mixed = projector_forward(downsample_video(raw, weights.projector, pc), weights.projector, pc)
            t2 = clock()
            compressed = apply_compression(mixed, config.compression, pc.grid)
            t3 = clock()
            pooled = attention_stage(compressed.flat(), weights.llm)
            t4 = clock()
            if rep >= config.warmup:
                for stage, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
                    samples[stage].append(dt)

    med = {s: _median_ns(v) for s, v in samples.items()}
    overall = sum(med.values())
    totals = [sum(parts) for parts in zip(*samples.values())]
    cv = {s: _cv(v) for s, v in samples.items()}
    cv["overall"] = _cv(totals)
    tokens_out = frames_out * n_out
    report = PipelineReport(
        frames=frames,
        compression=config.compression.label(),
        ratio_percent=100.0 * tokens_out / (frames * pc.tokens_per_frame),
        vision_ns=med["vision"],
        projector_ns=med["projector"],
        compression_ns=med["compression"],
        llm_ns=med["llm"],
        overall_ns=overall,
        tokens_raw=frames * pc.raw_tokens,
        tokens_in=mixed.frames * mixed.tokens_per_frame,
        tokens_out=compressed.frames * compressed.tokens_per_frame,
        frames_out=compressed.frames,
        tokens_per_frame_out=compressed.tokens_per_frame,
        within_budget=tokens_out <= config.budget,
        llm_share=med["llm"] / overall if overall else 0.0,
        cv=cv,
        noisy=cv["overall"] > C.NOISY_CV,
        checksum=float(pooled.sum()),
    )
    if report.noisy:
        log.warning("timing noisy at T=%d (%s): cv=%.2f", frames, report.compression, cv["overall"])
    return report


@dataclass(frozen=True)
class ScalingFit:
    points: tuple[tuple[int, float], ...]
    loglog_slope: float
    r_squared: float


def fit_scaling(points) -> ScalingFit:
    """Least-squares slope of log(time) against log(size)."""
    points = tuple((int(n), float(t)) for n, t in points)
    if len(points) < 4:
        raise ValueError("a scaling fit needs at least 4 points")
    lx = np.log([p[0] for p in points])
    ly = np.log([p[1] for p in points])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(points, float(slope), r2)


@dataclass
class LatencyProfile:
    reports: list[PipelineReport]
    fits: dict[str, ScalingFit]
    failures: list[str]


def latency_profile(
    base: PipelineConfig,
    frames_grid,
    specs=(CompressionSpec(), CompressionSpec(temporal_pool_k=4)),
    seed: int = C.DEFAULT_SEED,
    video_fn=None,
) -> LatencyProfile:
    """Profile every (T, spec) point sequentially, then fit slopes across T.

    Fits: ``llm`` and ``overall`` use the uncompressed points; ``projector``
    uses all uncompressed points as well. A failing point is logged and
    skipped.
    """
    if video_fn is None:
        from .synth import SynthVideoSpec, synth_video

        rows, cols = base.projector.raw_grid

        def video_fn(t):
            return synth_video(SynthVideoSpec(t, rows, cols, patch_size=base.patch_size), seed)

    weights = init_pipeline_weights(base, seed)
    reports, failures = [], []
    for t in frames_grid:
        video = video_fn(t)
        for spec in specs:
            try:
                reports.append(run_pipeline(replace(base, frames=t, compression=spec), video, weights))
            except (ValueError, FloatingPointError) as err:
                failures.append(f"T={t} {spec.label()}: {err}")
                log.warning("profile point failed: %s", failures[-1])

    fits = {}
    plain = [r for r in reports if r.compression == "none"]
    if len(plain) >= 4:
        fits["llm"] = fit_scaling((r.frames, r.llm_ns) for r in plain)
        fits["projector"] = fit_scaling((r.frames, r.projector_ns) for r in plain)
        fits["overall"] = fit_scaling((r.frames, r.overall_ns) for r in plain)
    return LatencyProfile(reports, fits, failures)
