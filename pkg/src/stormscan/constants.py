"""Shared numeric tolerances and desk-scale defaults.

Every tolerance used by the verification suites and the CLI lives here so
tests, docs and ``stormscan`` subcommands quote the same numbers.
"""

# parallel vs sequential scan: max|dy| <= SCAN_REL_TOL * (1 + max|y|)
SCAN_REL_TOL = 1e-12

# central finite differences for gradcheck
FD_STEP = 1e-5
GRAD_REL_TOL = 1e-5
# denominator floor of the relative error; below it the error is absolute
GRAD_REL_FLOOR = 1e-8

# streaming vs batch projector
STREAM_TOL = 1e-12
# |log-log slope| of per-step streaming cost
STREAM_SLOPE_MAX = 0.2

POOL_TOL = 1e-12

# timing: coefficient of variation above which a point is flagged noisy
NOISY_CV = 0.25

# scaling-fit windows
LINEAR_SLOPE = (0.8, 1.2)
QUADRATIC_SLOPE = (1.7, 2.3)

LAYER_NORM_EPS = 1e-5
INIT_SCALE = 0.1
DEFAULT_SEED = 42

# desk-scale pipeline defaults
DEFAULT_CHANNELS = 64
DEFAULT_STATE_DIM = 16
DEFAULT_LAYERS = 2
DEFAULT_RAW_TOKENS = 64  # 8x8 patch grid
DEFAULT_RATIO = 4
DEFAULT_LLM_DIM = 64
DEFAULT_LLM_LAYERS = 2
