"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from stormscan import constants as C
from stormscan.compression import ABLATION_TABLE, CompressionSpec, compression_ratio, spatial_pool, temporal_pool, token_budget_check
from stormscan.projector import (
    ProjectorConfig,
    ProjectorStream,
    init_projector_weights,
    projector_forward,
    projector_stream_step,
    sensitivity_matrix,
    zero_mixers,
)
from stormscan.tensor import Rng, TokenTensor, rng_fill
from stormscan.verify import run_gradcheck, run_scan_check


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        return ok

    return emit


def desk_projector(**kw):
    base = dict(
        raw_tokens=C.DEFAULT_RAW_TOKENS,
        downsample_ratio=C.DEFAULT_RATIO,
        channels=C.DEFAULT_CHANNELS,
        layers=C.DEFAULT_LAYERS,
        state_dim=C.DEFAULT_STATE_DIM,
    )
    base.update(kw)
    return ProjectorConfig(**base)


def test_1_scan_equivalence(verdict):
    start = time.perf_counter()
    result = run_scan_check(seed=C.DEFAULT_SEED, instances=50)
    elapsed = time.perf_counter() - start
    ok = result.passed and result.cases == 50 and elapsed < 10
    detail = f"{result.cases} instances, worst {result.worst:.2e} (tol {C.SCAN_REL_TOL:g}), {elapsed:.2f}s"
    assert verdict(1, "parallel scan == sequential scan", ok, detail), result.failures


def test_2_gradients(verdict):
    start = time.perf_counter()
    result = run_gradcheck(seed=C.DEFAULT_SEED, instances=20)
    elapsed = time.perf_counter() - start
    ok = result.passed and result.cases >= 20 and elapsed < 30
    detail = f"{result.cases} instances, worst rel err {result.worst:.2e} (tol {C.GRAD_REL_TOL:g}), {elapsed:.2f}s"
    assert verdict(2, "scan_backward vs central differences", ok, detail), result.failures


def test_3_ratio_table(verdict):
    ratios = [compression_ratio(spec) for _, spec in ABLATION_TABLE]
    expected = {100.0, 50.0, 25.0, 12.5, 6.25, 3.13}
    ok = set(ratios) == expected and compression_ratio(CompressionSpec(4, 4, 2)) == 3.13
    assert verdict(3, "compression ratio table", ok, f"{ratios}")


def test_4_token_budget(verdict):
    plain = token_budget_check(32, 256, CompressionSpec(), 8192)
    pooled = token_budget_check(128, 256, CompressionSpec(temporal_pool_k=4), 8192)
    ok = (plain.total_tokens, pooled.total_tokens) == (8192, 8192) and plain.within_budget and pooled.within_budget
    detail = f"T=32 -> {plain.total_tokens}, T=128 k=4 -> {pooled.total_tokens} (budget 8192)"
    assert verdict(4, "token budget arithmetic", ok, detail)


def test_5_causality_propagation(verdict):
    frames, seeds = 8, range(10)
    start = time.perf_counter()
    uni = desk_projector(direction_mode="unidirectional")
    upper = max(np.abs(np.triu(sensitivity_matrix(init_projector_weights(uni, Rng(s)), uni, frames, 1e-3, s), 1)).max() for s in seeds)
    # 4 tokens per frame keeps the far off-diagonal signal well above double-precision rounding
    bi = ProjectorConfig(raw_tokens=16, downsample_ratio=4, channels=16, layers=2, state_dim=8)
    off = ~np.eye(frames, dtype=bool)
    lowest = min(sensitivity_matrix(init_projector_weights(bi, Rng(s)), bi, frames, 1e-3, s)[off].min() for s in seeds)
    elapsed = time.perf_counter() - start
    ok = upper == 0.0 and lowest > 0.0 and elapsed < 20
    detail = f"unidirectional max above diagonal {upper:g}; bidirectional min off-diagonal {lowest:.2e}; {elapsed:.2f}s"
    assert verdict(5, "causality and propagation", ok, detail)


def test_6_residual_identity(verdict):
    ok = True
    for mode in ("bidirectional", "unidirectional"):
        cfg = desk_projector(direction_mode=mode)
        weights = zero_mixers(init_projector_weights(cfg, Rng(3)))
        for seed, scale in ((0, 1.0), (1, 1e3), (2, 1e-6)):
            x = TokenTensor(rng_fill(Rng(seed), (5, cfg.tokens_per_frame, cfg.channels), scale))
            ok &= np.array_equal(projector_forward(x, weights, cfg).data, x.data)
    assert verdict(6, "zero mixers give bitwise identity", ok, "both direction modes, three input scales")


def _stream_step_times(cfg, weights, x, rounds=3):
    best = np.full(x.frames, np.inf)
    outputs = None
    with threadpool_limits(limits=1):
        for _ in range(rounds):
            stream = ProjectorStream.start(cfg)
            outs = []
            for t in range(x.frames):
                t0 = time.perf_counter_ns()
                outs.append(projector_stream_step(x.data[t], weights, cfg, stream))
                best[t] = min(best[t], time.perf_counter_ns() - t0)
            outputs = np.stack(outs)
    return outputs, best


def test_7_streaming(verdict):
    frames = 256
    cfg = desk_projector(direction_mode="unidirectional")
    weights = init_projector_weights(cfg, Rng(7))
    x = TokenTensor(rng_fill(Rng(8), (frames, cfg.tokens_per_frame, cfg.channels), 1.0))
    batch = projector_forward(x, weights, cfg).data
    streamed, step_ns = _stream_step_times(cfg, weights, x)
    err = float(np.abs(streamed - batch).max())
    # median step time over octaves of the step index [2^j, 2^(j+1))
    centers, medians = [], []
    for j in range(1, 8):
        lo, hi = 2**j, min(2 ** (j + 1), frames)
        centers.append(np.sqrt(lo * hi))
        medians.append(np.median(step_ns[lo:hi]))
    slope = float(np.polyfit(np.log(centers), np.log(medians), 1)[0])
    ok = err <= C.STREAM_TOL and abs(slope) <= C.STREAM_SLOPE_MAX
    detail = f"T={frames}, max |stream - batch| {err:.1e}, per-step log-log slope {slope:+.3f}"
    assert verdict(7, "streaming equals batch at flat per-step cost", ok, detail)


def test_8_latency_scaling(verdict, desk_profile_timed):
    profile, elapsed = desk_profile_timed
    plain = sorted((r for r in profile.reports if r.compression == "none"), key=lambda r: r.frames)
    pooled = {r.frames: r for r in profile.reports if r.compression == "k=4"}
    llm = profile.fits["llm"].loglog_slope
    proj = profile.fits["projector"].loglog_slope
    shares = [r.llm_share for r in plain]
    largest = plain[-1].frames
    reduction = plain[-1].overall_ns / pooled[largest].overall_ns
    ok = (
        not profile.failures
        and [r.frames for r in plain] == [32, 64, 128, 256, 512]
        and C.QUADRATIC_SLOPE[0] <= llm <= C.QUADRATIC_SLOPE[1]
        and C.LINEAR_SLOPE[0] <= proj <= C.LINEAR_SLOPE[1]
        and all(b > a for a, b in zip(shares, shares[1:]))
        and reduction >= 2.0
        and elapsed < 180
    )
    detail = (
        f"llm slope {llm:.2f}, projector slope {proj:.2f}, llm_share {[round(s, 3) for s in shares]}, "
        f"k=4 speedup at T={largest} {reduction:.2f}x, {elapsed:.0f}s"
    )
    noisy = [f"T={r.frames} {r.compression}" for r in profile.reports if r.noisy]
    if noisy:
        detail += f", noisy points: {noisy}"
    assert verdict(8, "latency scaling trend", ok, detail)


def test_9_pooling_conservation(verdict):
    rng = np.random.default_rng(9)
    worst_mean = worst_sum = 0.0
    for i in range(100):
        k = int(rng.integers(1, 9))
        groups, n, d = (int(v) for v in rng.integers(1, 6, size=3))
        x = TokenTensor(rng_fill(Rng(i), (groups * k, n, d), 10.0))
        out = temporal_pool(x, k).data
        group_means = x.data.reshape(groups, k, n, d).mean(axis=1)
        worst_mean = max(worst_mean, float(np.abs(out - group_means).max()))
        worst_sum = max(worst_sum, float(np.abs(out.sum(axis=0) * k - x.data.sum(axis=0)).max()))
    spatial = spatial_pool(TokenTensor(np.zeros((1, 256, 2))), 4, grid=(16, 16)).tokens_per_frame
    ok = worst_mean <= C.POOL_TOL and worst_sum <= C.POOL_TOL and spatial == 64
    detail = f"100 tensors, group-mean err {worst_mean:.1e}, sum err {worst_sum:.1e}, 16x16 p=4 -> {spatial} tokens"
    assert verdict(9, "pooling conservation", ok, detail)
