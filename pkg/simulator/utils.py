import logging
import math
import sys
from typing import List, Optional

# ------------------------
# CONSTANTS
# ------------------------

EPS = 1e-9  # absolute tolerance for every timestamp comparison (seconds)

# TTFT target = max(input_len / TTFT_PREFILL_RATE, TTFT_FLOOR_S)
TTFT_PREFILL_RATE = 5000.0
TTFT_FLOOR_S = 1.0

DEFAULT_DELTA_T = 2.0
DEFAULT_WATERMARK = 0.90
DEFAULT_DP_BUDGET = 1e8
DEFAULT_OVERHEAD_BUDGET = 0.1  # share of engine time preemption round trips may take
DEFAULT_CYCLE_LEN_S = 1200.0

OUTPUT_DIR_ENV = "STREAMSCHED_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

UNBOUNDED = math.inf

LOG_FORMAT = "(%(module)s): %(message)s"


# ------------------------
# EXCEPTIONS
# ------------------------
class ConfigError(ValueError):
    """Invalid or contradictory experiment configuration."""


class TraceFormatError(ValueError):
    """A trace file row could not be parsed."""


class EmptyTimelineError(ValueError):
    """QoE requested over zero consumed tokens; use evaluate_partial."""


class InfeasibleBatchError(ValueError):
    """No subset of exactly B requests fits in the KV capacity."""


class DpBudgetError(ConfigError):
    """The DP table would exceed the configured M*N^2 budget."""


class PacerError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    """Event-queue corruption or a broken capacity invariant."""


# ------------------------
# LOGGING
# ------------------------
def configure_logging(verbose: bool = False) -> None:
    """
    Sends every module logger to stderr with the `(module): message` prefix.
    Safe to call more than once.
    """
    root = logging.getLogger()
    level = logging.DEBUG if verbose else logging.INFO
    root.setLevel(level)
    for handler in root.handlers:
        if getattr(handler, "_streamsched", False):
            handler.setLevel(level)
            handler.stream = sys.stderr
            return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.setLevel(level)
    handler._streamsched = True  # type: ignore[attr-defined]
    root.addHandler(handler)


# ------------------------
# NUMERIC HELPERS
# ------------------------
def safe_div(num: float, den: float) -> float:
    """num / den where a zero or infinite denominator yields 0."""
    if den == 0 or math.isinf(den):
        return 0.0
    return num / den


def fmt_float(value: Optional[float]) -> str:
    """
    Decimal string with full round-trip precision; no locale formatting.
    None becomes an empty cell.
    """
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return repr(float(value))


def parse_float_list(raw: str) -> List[float]:
    """'0.5, 1,2' -> [0.5, 1.0, 2.0]"""
    return [float(part) for part in raw.split(",") if part.strip()]


def parse_name_list(raw: str) -> List[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]

