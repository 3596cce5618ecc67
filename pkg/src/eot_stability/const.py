import math
import os
import pathlib

OUTPUT_DIR = (
    pathlib.Path.cwd() / "eot-output"
    if not os.environ.get("EOT_OUTPUT_DIR", "")
    else pathlib.Path(os.environ.get("EOT_OUTPUT_DIR", ""))
)

# solver defaults
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100_000
REFERENCE_FACTOR = 10
TRACE_REFERENCE_FACTOR = 100
RESIDUAL_FACTOR = 10.0

# log-space exponent above which exp() is treated as an overflow
OVERFLOW_EXPONENT = 700.0

WEIGHT_SUM_TOL = 1e-12
CANONICAL_DIGITS = 12

ORACLE_MAX_CELLS = 25
ORACLE_MAX_SWEEPS = 20_000

# +inf marks "undefined" / "inapplicable" metric values
INF = math.inf

BL_DICTIONARY_VERSION = "bl-dict-1"
POTENTIAL_UNITS = "cost"
WEAK_METRIC_LABEL = "bounded-Lipschitz surrogate over a fixed test-function dictionary"
