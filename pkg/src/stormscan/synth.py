"""Synthetic videos for the pipeline and propagation checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, Rng, rng_fill

NOISE_SCALE = 0.05


@dataclass(frozen=True)
class SynthVideoSpec:
    frames: int
    height: int  # in patches
    width: int  # in patches
    needle_frame: int | None = None
    needle_amplitude: float = 1.0
    patch_size: int = 4
    color_channels: int = 3

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.patch_size, self.color_channels) < 1:
            raise ConfigError("video sizes must be positive")
        if self.needle_frame is not None and not 0 <= self.needle_frame < self.frames:
            raise ConfigError(f"needle_frame {self.needle_frame} outside [0, {self.frames})")


def needle_pattern(spec: SynthVideoSpec) -> np.ndarray:
    """Patch-level checkerboard with distinct per-color weights, peak 1."""
    ps = spec.patch_size
    rows = np.arange(spec.height * ps) // ps
    cols = np.arange(spec.width * ps) // ps
    board = np.where((rows[:, None] + cols[None, :]) % 2 == 0, 1.0, -1.0)
    colors = 0.5 ** np.arange(spec.color_channels)
    return board[:, :, None] * colors


def synth_video(spec: SynthVideoSpec, seed: int) -> np.ndarray:
    """Low-amplitude uniform noise frames ``(T, H*ps, W*ps, c)`` plus an optional needle."""
    shape = (spec.frames, spec.height * spec.patch_size, spec.width * spec.patch_size, spec.color_channels)
    video = rng_fill(Rng(seed), shape, NOISE_SCALE)
    if spec.needle_frame is not None and spec.needle_amplitude != 0:
        video[spec.needle_frame] += spec.needle_amplitude * needle_pattern(spec)
    return video
