"""Selective state-space scan with a diagonal per-channel state.

For an input sequence ``x`` of shape ``(T, D)`` the recurrence is::

    delta_t = softplus(W_delta x_t + b_delta)            # (D,)
    A_bar_t = exp(delta_t[:, None] * A)                  # (D, H), A = -exp(a_log)
    B_bar_t = delta_t[:, None] * (W_B x_t + b_B)[None]   # (D, H)
    C_t     = W_C x_t + b_C                              # (H,)
    h_t     = A_bar_t * h_{t-1} + B_bar_t * x_t[:, None]
    y_t     = h_t @ C_t                                  # (D,)

The state ``h`` is a plain ``(D, H)`` float64 array; ``h0=None`` means zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import AffineMap, Rng, ShapeError, affine_apply, rng_fill, rng_uniform

FORWARD = "forward"
REVERSE = "reverse"
# time steps per block in scan_parallel
SCAN_CHUNK = 256


@dataclass(frozen=True)
class SelectiveScanWeights:
    a_log: np.ndarray  # (D, H)
    w_delta: AffineMap  # D -> D
    w_B: AffineMap  # D -> H
    w_C: AffineMap  # D -> H

    def __post_init__(self):
        a_log = np.asarray(self.a_log, dtype=np.float64)
        if a_log.ndim != 2:
            raise ShapeError("a_log must be (D, H)")
        d, h = a_log.shape
        if (self.w_delta.in_dim, self.w_delta.out_dim) != (d, d):
            raise ShapeError(f"w_delta must map {d}->{d}")
        for name, amap in (("w_B", self.w_B), ("w_C", self.w_C)):
            if (amap.in_dim, amap.out_dim) != (d, h):
                raise ShapeError(f"{name} must map {d}->{h}")
        if not np.all(np.isfinite(a_log)):
            raise FloatingPointError("a_log contains non-finite values")
        object.__setattr__(self, "a_log", a_log)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @classmethod
    def init(cls, rng: Rng, channels: int, state_dim: int, scale: float = 0.1) -> SelectiveScanWeights:
        """Random weights: affine maps uniform in ``±scale``, a_log in [log .5, log 1.5]."""
        a_log = rng_uniform(rng, (channels, state_dim), np.log(0.5), np.log(1.5))

        def amap(out_dim):
            return AffineMap(rng_fill(rng, (out_dim, channels), scale), rng_fill(rng, out_dim, scale))

        return cls(a_log, amap(channels), amap(state_dim), amap(state_dim))

    @classmethod
    def zeros(cls, channels: int, state_dim: int) -> SelectiveScanWeights:
        return cls(
            np.zeros((channels, state_dim)),
            AffineMap.zeros(channels, channels),
            AffineMap.zeros(channels, state_dim),
            AffineMap.zeros(channels, state_dim),
        )

    def flat_params(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order."""
        return [
            self.a_log,
            self.w_delta.weight, self.w_delta.bias,
            self.w_B.weight, self.w_B.bias,
            self.w_C.weight, self.w_C.bias,
        ]  # fmt: skip

    @classmethod
    def from_flat(cls, arrays) -> SelectiveScanWeights:
        a, wd, bd, wb, bb, wc, bc = arrays
        return cls(a, AffineMap(wd, bd), AffineMap(wb, bb), AffineMap(wc, bc))


@dataclass(frozen=True)
class ScanGrad:
    """Gradients of ``sum(grad_y * y)``; ``weights`` holds dL/d(each field)."""

    x: np.ndarray
    weights: SelectiveScanWeights
    h0: np.ndarray


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_input(x, weights: SelectiveScanWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (weights.channels,):
        raise ShapeError(f"input trailing dim must be {weights.channels}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("scan input contains non-finite values")
    return x


def _check_h0(h0, weights: SelectiveScanWeights) -> np.ndarray:
    shape = (weights.channels, weights.state_dim)
    if h0 is None:
        return np.zeros(shape)
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape != shape:
        raise ShapeError(f"state must be {shape}, got {h0.shape}")
    return h0


def _check_seq(x, weights) -> np.ndarray:
    x = _check_input(x, weights)
    if x.ndim != 2:
        raise ShapeError(f"sequence must be (T, D), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("empty sequence")
    return x


def _projections(x, weights: SelectiveScanWeights):
    z = affine_apply(weights.w_delta, x)
    delta = softplus(z)
    bv = affine_apply(weights.w_B, x)
    cv = affine_apply(weights.w_C, x)
    return z, delta, bv, cv


def selective_params(x_t, weights: SelectiveScanWeights):
    """Input-dependent ``(A_bar, B_bar, C)`` for one token or a stack of tokens.

    Shapes for input ``(..., D)``: ``A_bar`` and ``B_bar`` are ``(..., D, H)``,
    ``C`` is ``(..., H)`` and is shared by all channels.
    """
    x_t = _check_input(x_t, weights)
    _, delta, bv, cv = _projections(x_t, weights)
    a_bar = np.exp(delta[..., :, None] * weights.A)
    b_bar = delta[..., :, None] * bv[..., None, :]
    return a_bar, b_bar, cv


def ssm_step(h_prev, x_t, weights: SelectiveScanWeights):
    """One recurrence step; returns ``(h_t, y_t)``."""
    x_t = _check_input(x_t, weights)
    if x_t.ndim != 1:
        raise ShapeError("ssm_step takes a single (D,) token")
    h_prev = _check_h0(h_prev, weights)
    a, b, c = _coefficients(x_t[None], weights)
    h = a[0] * h_prev + b[0]
    return h, h @ c[0]


def _orient(x, direction):
    if direction == FORWARD:
        return x
    if direction == REVERSE:
        return x[::-1]
    raise ValueError(f"direction must be {FORWARD!r} or {REVERSE!r}, got {direction!r}")


def _coefficients(x, weights):
    """Per-step ``(A_bar, B_bar * x, C)`` for a ``(T, D)`` block."""
    _, delta, bv, cv = _projections(x, weights)
    a = delta[:, :, None] * weights.A
    np.exp(a, out=a)
    b = (delta * x)[:, :, None] * bv[:, None, :]
    return a, b, cv


def scan_sequential(x, weights: SelectiveScanWeights, h0=None, direction: str = FORWARD):
    """Step-by-step scan. Returns ``(y, h_final)`` with ``y`` aligned to ``x``."""
    x = _check_seq(x, weights)
    h = _check_h0(h0, weights)
    xs = _orient(x, direction)
    y = np.empty_like(xs)
    # coefficients per block keep memory traffic proportional to T
    for start in range(0, xs.shape[0], SCAN_CHUNK):
        a, b, c = _coefficients(xs[start : start + SCAN_CHUNK], weights)
        for t in range(a.shape[0]):
            h = a[t] * h + b[t]
            y[start + t] = h @ c[t]
    return _orient(y, direction), h


def linear_recurrence(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All states of ``h_t = a_t * h_{t-1} + b_t`` with ``h_{-1} = 0``.

    Work-efficient associative scan over the leading axis: adjacent pairs are
    combined with ``(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)``, the half-length
    problem is solved recursively, and even positions are filled from their
    odd predecessors. O(T) work, O(log T) vectorized levels, fixed tree order.
    """
    n = a.shape[0]
    if n == 1:
        return b.copy()
    m2 = 2 * (n // 2)
    a_hi = a[1:m2:2]
    pair_a = a_hi * a[0:m2:2]
    pair_b = a_hi * b[0:m2:2] + b[1:m2:2]
    odd = linear_recurrence(pair_a, pair_b)
    h = np.empty_like(b)
    h[0] = b[0]
    h[1:m2:2] = odd
    h[2:n:2] = a[2:n:2] * odd[: (n - 1) // 2] + b[2:n:2]
    return h


def _states(a, b, h0):
    """States for initial state ``h0``; overwrites ``b[0]``."""
    b[0] += a[0] * h0
    return linear_recurrence(a, b)


def scan_parallel(x, weights: SelectiveScanWeights, h0=None, direction: str = FORWARD, chunk: int | None = SCAN_CHUNK):
    """Associative-scan equivalent of :func:`scan_sequential`.

    The sequence is cut into fixed blocks of ``chunk`` steps; each block is
    solved with :func:`linear_recurrence` and hands its last state to the
    next block. Blocks keep the (T, D, H) temporaries cache-sized. The
    result depends only on ``chunk``, and ``chunk=None`` scans the whole
    sequence as one tree.
    """
    x = _check_seq(x, weights)
    h = _check_h0(h0, weights)
    xs = _orient(x, direction)
    step = chunk or xs.shape[0]
    y = np.empty_like(xs)
    for start in range(0, xs.shape[0], step):
        a, b, c = _coefficients(xs[start : start + step], weights)
        hs = _states(a, b, h)
        y[start : start + step] = np.einsum("tdh,th->td", hs, c)
        h = hs[-1]
    return _orient(y, direction), h.copy()


def scan_backward(x, weights: SelectiveScanWeights, h0=None, grad_y=None, direction: str = FORWARD) -> ScanGrad:
    """Reverse-mode gradients of ``L = sum(grad_y * y)`` for a scan.

    Differentiates through the input dependence of delta, B and C, and
    through ``h0``.
    """
    x = _check_seq(x, weights)
    h0 = _check_h0(h0, weights)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != x.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} != y shape {x.shape}")

    xs = _orient(x, direction)
    gy = _orient(grad_y, direction)
    A = weights.A

    z, delta, bv, cv = _projections(xs, weights)
    a_bar = np.exp(delta[:, :, None] * A)
    b_bar = delta[:, :, None] * bv[:, None, :]
    h = _states(a_bar, b_bar * xs[:, :, None], h0)
    h_prev = np.concatenate([h0[None], h[:-1]], axis=0)

    # dL/dh_t = gy_t C_t + A_bar_{t+1} dL/dh_{t+1}, solved as a reversed scan
    src = gy[:, :, None] * cv[:, None, :]
    coef = np.ones_like(a_bar)
    coef[:-1] = a_bar[1:]
    gh = linear_recurrence(coef[::-1], src[::-1])[::-1]

    d_abar = gh * h_prev
    d_bbar = gh * xs[:, :, None]
    gx = (gh * b_bar).sum(axis=2)

    d_abar_pre = d_abar * a_bar  # through exp
    d_delta = (d_abar_pre * A).sum(axis=2) + (d_bbar * bv[:, None, :]).sum(axis=2)
    d_a_log = (d_abar_pre * delta[:, :, None]).sum(axis=0) * A
    d_bv = (d_bbar * delta[:, :, None]).sum(axis=1)
    d_cv = np.einsum("td,tdh->th", gy, h)
    d_z = d_delta * sigmoid(z)

    grads = []
    for amap, dout in ((weights.w_delta, d_z), (weights.w_B, d_bv), (weights.w_C, d_cv)):
        grads.append(AffineMap(dout.T @ xs, dout.sum(axis=0)))
        gx = gx + dout @ amap.weight

    gw = SelectiveScanWeights(d_a_log, *grads)
    return ScanGrad(x=_orient(gx, direction).copy(), weights=gw, h0=a_bar[0] * gh[0])
