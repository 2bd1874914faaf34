"""Verification suites shared by the CLI and the acceptance tests.

The gradient oracle here is central finite differences over
:func:`scan_sequential`; it never touches the analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import constants as C
from .scan import SelectiveScanWeights, scan_backward, scan_parallel, scan_sequential
from .tensor import Rng, rng_fill

SCAN_CHECK_LENGTHS = (1, 2, 3, 17, 256, 257, 1024)


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failures: list[str] = field(default_factory=list)
    worst: float = 0.0

    @property
    def passed(self) -> bool:
        return self.cases > 0 and not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst={self.worst:.3e}, failures={len(self.failures)}"


def scan_equivalence(x, weights, h0=None, direction="forward") -> float:
    """max|y_par - y_seq| / (1 + max|y_seq|)."""
    y_seq, _ = scan_sequential(x, weights, h0, direction)
    y_par, _ = scan_parallel(x, weights, h0, direction)
    return float(np.abs(y_par - y_seq).max() / (1.0 + np.abs(y_seq).max()))


def run_scan_check(seed: int = C.DEFAULT_SEED, instances: int = 50, lengths=SCAN_CHECK_LENGTHS) -> SuiteResult:
    rng = Rng(seed)
    result = SuiteResult("scan-check")
    for i in range(instances):
        t_len = lengths[i % len(lengths)]
        d = 1 + int(rng.raw(1)[0] % 4)
        h = 1 + int(rng.raw(1)[0] % 8)
        weights = SelectiveScanWeights.init(rng, d, h, scale=0.5)
        x = rng_fill(rng, (t_len, d), 1.0)
        h0 = rng_fill(rng, (d, h), 1.0) if i % 2 else None
        direction = "reverse" if i % 3 == 2 else "forward"
        err = scan_equivalence(x, weights, h0, direction)
        result.cases += 1
        result.worst = max(result.worst, err)
        if not err <= C.SCAN_REL_TOL:
            result.failures.append(f"instance {i} (T={t_len}, {direction}): {err:.3e}")
    return result


def numeric_grad(f, arrays: list[np.ndarray], step: float = C.FD_STEP) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor: float = C.GRAD_REL_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck_instance(x, weights: SelectiveScanWeights, h0, grad_y, direction="forward") -> dict[str, float]:
    """Worst relative error per named parameter group for one instance."""
    params = [p.copy() for p in weights.flat_params()]
    x = np.array(x, dtype=np.float64)
    h0 = np.array(h0, dtype=np.float64)

    def loss():
        w = SelectiveScanWeights.from_flat(params)
        y, _ = scan_sequential(x, w, h0, direction)
        return float(np.sum(grad_y * y))

    numeric = numeric_grad(loss, [x, h0, *params])
    analytic = scan_backward(x, weights, h0, grad_y, direction)
    names = ["x", "h0", "a_log", "w_delta.weight", "w_delta.bias", "w_B.weight", "w_B.bias", "w_C.weight", "w_C.bias"]
    exact = [analytic.x, analytic.h0, *analytic.weights.flat_params()]
    return {n: float(relative_error(a, g).max()) for n, a, g in zip(names, exact, numeric)}


def run_gradcheck(seed: int = C.DEFAULT_SEED, instances: int = 20) -> SuiteResult:
    rng = Rng(seed)
    result = SuiteResult("gradcheck")
    for i in range(instances):
        t_len = 1 + int(rng.raw(1)[0] % 8)
        d = 1 + int(rng.raw(1)[0] % 4)
        h = 1 + int(rng.raw(1)[0] % 4)
        weights = SelectiveScanWeights.init(rng, d, h, scale=0.5)
        x = rng_fill(rng, (t_len, d), 1.0)
        h0 = rng_fill(rng, (d, h), 0.5)
        gy = rng_fill(rng, (t_len, d), 1.0)
        direction = "reverse" if i % 2 else "forward"
        errs = gradcheck_instance(x, weights, h0, gy, direction)
        result.cases += 1
        worst = max(errs.values())
        result.worst = max(result.worst, worst)
        if not worst <= C.GRAD_REL_TOL:
            bad = ", ".join(f"{k}={v:.2e}" for k, v in errs.items() if v > C.GRAD_REL_TOL)
            result.failures.append(f"instance {i}: {bad}")
    return result
