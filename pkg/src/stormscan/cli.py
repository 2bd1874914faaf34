"""``stormscan`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.

Settings resolve in this order, highest first: command-line flags and
``--set key=value``, the ``--config`` file, ``STORM_SEED`` (seed only),
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import constants as C
from .compression import CompressionSpec, ratio_table, token_budget_check
from .profiler import PipelineConfig, init_pipeline_weights, latency_profile, run_pipeline, vision_stub_encode
from .projector import BIDIRECTIONAL, UNIDIRECTIONAL, ProjectorConfig, downsample_video, projector_forward, sensitivity_matrix
from .report import emit_report
from .synth import SynthVideoSpec, synth_video
from .tensor import TokenTensor
from .verify import run_gradcheck, run_scan_check

log = logging.getLogger("stormscan")

DEFAULTS: dict[str, object] = {
    "seed": C.DEFAULT_SEED,
    "frames": 32,
    "tokens": 256,
    "budget": 8192,
    "k": 1,
    "p": 1,
    "s": 1,
    "raw_tokens": C.DEFAULT_RAW_TOKENS,
    "ratio": C.DEFAULT_RATIO,
    "channels": C.DEFAULT_CHANNELS,
    "state_dim": C.DEFAULT_STATE_DIM,
    "layers": C.DEFAULT_LAYERS,
    "llm_dim": C.DEFAULT_LLM_DIM,
    "llm_layers": C.DEFAULT_LLM_LAYERS,
    "repetitions": 3,
    "warmup": 1,
    "direction": BIDIRECTIONAL,
    "probe_scale": 1e-3,
    "needle_frame": -1,
    "needle_amplitude": 1.0,
    "instances": 0,
    "frames_grid": "32,64,128,256,512",
    "format": "csv",
    "output": "-",
}


class UsageError(Exception):
    pass


def _coerce(key: str, value):
    if key not in DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    kind = type(DEFAULTS[key])
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {key}: {value!r}") from None


def parse_pairs(lines, source: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve_settings(config_path=None, overrides=(), flags=None, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    settings = dict(DEFAULTS)
    if environ.get("STORM_SEED"):
        settings["seed"] = _coerce("seed", environ["STORM_SEED"])
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                settings.update(parse_pairs(fh, config_path))
        except OSError as err:
            raise UsageError(f"cannot read config {config_path}: {err}") from None
    settings.update(parse_pairs(overrides, "--set"))
    for key, value in (flags or {}).items():
        if value is not None:
            settings[key] = _coerce(key, value)
    if settings["format"] not in ("csv", "json"):
        raise UsageError("format must be csv or json")
    if settings["direction"] not in (BIDIRECTIONAL, UNIDIRECTIONAL):
        raise UsageError(f"direction must be {BIDIRECTIONAL} or {UNIDIRECTIONAL}")
    return settings


def _spec(st) -> CompressionSpec:
    return CompressionSpec(st["k"], st["p"], st["s"])


def _projector_config(st, direction=None) -> ProjectorConfig:
    return ProjectorConfig(
        raw_tokens=st["raw_tokens"],
        downsample_ratio=st["ratio"],
        channels=st["channels"],
        layers=st["layers"],
        state_dim=st["state_dim"],
        direction_mode=direction or st["direction"],
    )


def _pipeline_config(st, frames=None, spec=None) -> PipelineConfig:
    return PipelineConfig(
        projector=_projector_config(st),
        compression=spec or _spec(st),
        llm_dim=st["llm_dim"],
        llm_layers=st["llm_layers"],
        frames=frames or st["frames"],
        budget=st["budget"],
        repetitions=st["repetitions"],
        warmup=st["warmup"],
    )


def _write(text: str, st) -> None:
    if st["output"] == "-":
        sys.stdout.write(text)
    else:
        with open(st["output"], "w", encoding="utf-8") as fh:
            fh.write(text)


# -- subcommands ----------------------------------------------------------------


def cmd_scan_check(st) -> int:
    result = run_scan_check(st["seed"], st["instances"] or 50)
    print(result.summary())
    for failure in result.failures:
        print("  " + failure)
    return 0 if result.passed else 1


def cmd_gradcheck(st) -> int:
    result = run_gradcheck(st["seed"], st["instances"] or 20)
    print(result.summary())
    for failure in result.failures:
        print("  " + failure)
    return 0 if result.passed else 1


def cmd_ratio_table(st) -> int:
    rows = ratio_table()
    if st["format"] == "json":
        payload = [{"method": label, "k": sp.temporal_pool_k, "p": sp.spatial_pool_p, "s": sp.temporal_sample_s,
                    "ratio_percent": ratio} for label, sp, ratio in rows]  # fmt: skip
        _write(json.dumps(payload, indent=2) + "\n", st)
        return 0
    lines = [f"{'method':<40} {'k':>2} {'p':>2} {'s':>2} {'ratio%':>7}"]
    for label, sp, ratio in rows:
        lines.append(f"{label:<40} {sp.temporal_pool_k:>2} {sp.spatial_pool_p:>2} {sp.temporal_sample_s:>2} {ratio:>7.2f}")
    _write("\n".join(lines) + "\n", st)
    return 0


def cmd_budget(st) -> int:
    report = token_budget_check(st["frames"], st["tokens"], _spec(st), st["budget"])
    fields = asdict(report)
    if st["format"] == "json":
        _write(json.dumps(fields, indent=2) + "\n", st)
    else:
        text = "".join(f"{k}: {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in fields.items())
        _write(text, st)
    return 0 if report.within_budget else 1


def _encode_video(video, pipe_cfg, weights) -> TokenTensor:
    raw = vision_stub_encode(video, weights.stub, pipe_cfg)
    return downsample_video(raw, weights.projector, pipe_cfg.projector)


def propagation(st) -> dict:
    """Sensitivity matrix around a synthetic video, plus the needle response.

    ``needle_response[t]`` is the change of output frame ``t`` between the
    video with and without its needle, per unit amplitude.
    """
    frames = st["frames"]
    pipe_cfg = _pipeline_config(st, frames=frames, spec=CompressionSpec())
    pc = pipe_cfg.projector
    weights = init_pipeline_weights(pipe_cfg, st["seed"])
    rows, cols = pc.raw_grid
    needle = st["needle_frame"] if st["needle_frame"] >= 0 else None
    spec = SynthVideoSpec(frames, rows, cols, needle, st["needle_amplitude"])
    clean = synth_video(SynthVideoSpec(frames, rows, cols), st["seed"])
    video = synth_video(spec, st["seed"])
    base = _encode_video(video, pipe_cfg, weights)
    matrix = sensitivity_matrix(weights.projector, pc, frames, st["probe_scale"], st["seed"], base=base)
    response = np.zeros(frames)
    if needle is not None and st["needle_amplitude"] != 0:
        out_needle = projector_forward(base, weights.projector, pc).data
        out_clean = projector_forward(_encode_video(clean, pipe_cfg, weights), weights.projector, pc).data
        diff = (out_needle - out_clean).reshape(frames, -1)
        response = np.linalg.norm(diff, axis=1) / abs(st["needle_amplitude"])
    return {
        "direction": pc.direction_mode,
        "frames": frames,
        "needle_frame": needle,
        "sensitivity": matrix,
        "needle_response": response,
    }


def propagation_ok(result) -> bool:
    s = result["sensitivity"]
    if result["direction"] == UNIDIRECTIONAL:
        return bool(np.all(np.triu(s, 1) == 0.0))
    band = np.concatenate([np.diag(s, 1), np.diag(s, -1)])
    return bool(np.all(band > 0))


def cmd_propagate(st) -> int:
    result = propagation(st)
    ok = propagation_ok(result)
    if st["format"] == "json":
        payload = dict(result, sensitivity=result["sensitivity"].tolist(),
                       needle_response=result["needle_response"].tolist(), ok=ok)  # fmt: skip
        _write(json.dumps(payload, indent=2) + "\n", st)
    else:
        lines = [f"# sensitivity S[t_out, t_in], {result['direction']}, probe={st['probe_scale']}"]
        lines += [",".join(f"{v:.6e}" for v in row) for row in result["sensitivity"]]
        if result["needle_frame"] is not None:
            lines.append(f"# needle response, needle at frame {result['needle_frame']}")
            lines.append(",".join(f"{v:.6e}" for v in result["needle_response"]))
        lines.append(f"# causality/propagation check: {'PASS' if ok else 'FAIL'}")
        _write("\n".join(lines) + "\n", st)
    return 0 if ok else 1


def cmd_profile(st) -> int:
    grid = [int(t) for t in st["frames_grid"].split(",") if t.strip()]
    spec = _spec(st)
    specs = (CompressionSpec(), spec if not spec.is_off else CompressionSpec(temporal_pool_k=4))
    profile = latency_profile(_pipeline_config(st, frames=grid[0]), grid, specs, seed=st["seed"])
    emit_report(profile.reports, st["format"], st["output"])
    for name, fit in profile.fits.items():
        print(f"{name}: log-log slope {fit.loglog_slope:.3f} (r^2 {fit.r_squared:.3f})", file=sys.stderr)
    for failure in profile.failures:
        print(f"failed: {failure}", file=sys.stderr)
    return 1 if profile.failures else 0


def cmd_demo(st) -> int:
    frames = st["frames"]
    spec = _spec(st) if not _spec(st).is_off else CompressionSpec(temporal_pool_k=4)
    cfg = _pipeline_config(st, frames=frames, spec=spec)
    rows, cols = cfg.projector.raw_grid
    video = synth_video(SynthVideoSpec(frames, rows, cols), st["seed"])
    weights = init_pipeline_weights(cfg, st["seed"])
    for label, sp in (("uncompressed", CompressionSpec()), (spec.label(), spec)):
        r = run_pipeline(replace(cfg, compression=sp), video, weights)
        print(f"[{label}] tokens {r.tokens_raw} -> {r.tokens_in} -> {r.tokens_out} ({r.ratio_percent:.2f}%)")
        print(f"  vision {r.vision_ns / 1e6:.2f} ms | projector {r.projector_ns / 1e6:.2f} ms | "
              f"compression {r.compression_ns / 1e6:.2f} ms | llm {r.llm_ns / 1e6:.2f} ms | "
              f"llm share {r.llm_share:.2f}")  # fmt: skip
    return 0


COMMANDS = {
    "scan-check": (cmd_scan_check, "parallel vs sequential scan equivalence suite"),
    "gradcheck": (cmd_gradcheck, "analytic scan gradients vs central finite differences"),
    "ratio-table": (cmd_ratio_table, "compression ratios of the pooling/sampling combinations"),
    "budget": (cmd_budget, "token count after compression against a budget"),
    "propagate": (cmd_propagate, "frame-to-frame sensitivity matrix of the projector"),
    "profile": (cmd_profile, "per-stage latency over a grid of frame counts"),
    "demo": (cmd_demo, "one small pipeline run, with and without compression"),
}

# flag -> config key, for flags every subcommand accepts
_FLAGS = {
    "--seed": ("seed", int, "random seed (default 42, or STORM_SEED)"),
    "--frames": ("frames", int, "number of video frames T"),
    "--tokens": ("tokens", int, "tokens per frame N (budget)"),
    "--budget": ("budget", int, "token budget"),
    "--k": ("k", int, "temporal pooling factor"),
    "--p": ("p", int, "spatial pooling areal factor (perfect square)"),
    "--s": ("s", int, "temporal sampling stride"),
    "--direction": ("direction", str, "bidirectional or unidirectional"),
    "--needle-frame": ("needle_frame", int, "frame index carrying the needle (-1: none)"),
    "--needle-amplitude": ("needle_amplitude", float, "needle amplitude"),
    "--probe-scale": ("probe_scale", float, "perturbation size for the sensitivity matrix"),
    "--instances": ("instances", int, "random instances for scan-check/gradcheck"),
    "--frames-grid": ("frames_grid", str, "comma-separated frame counts for profile"),
    "--repetitions": ("repetitions", int, "timed repetitions per point (>= 3)"),
    "--format": ("format", str, "csv or json"),
    "--output": ("output", str, "output path, '-' for stdout"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file ('#' starts a comment)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one config key")
    for flag, (key, kind, text) in _FLAGS.items():
        common.add_argument(flag, dest=key, type=kind, default=None, help=text)
    parser = argparse.ArgumentParser(prog="stormscan", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text, allow_abbrev=False)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:  # --help (0) or usage error (2)
        return exit_.code
    flags = {key: getattr(args, key) for key, _, _ in _FLAGS.values()}
    try:
        settings = resolve_settings(args.config, args.set, flags)
        return COMMANDS[args.command][0](settings)
    except (UsageError, ValueError, OSError) as err:
        print(f"stormscan {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
