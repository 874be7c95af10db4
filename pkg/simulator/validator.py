import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from latency import LatencyProfile, default_profile, load_profile
from policies import canonical_name
from policies.base import OBJECTIVES, SOLVERS, PolicySettings
from report import SimulationReport
from utils import (
    DEFAULT_CYCLE_LEN_S,
    DEFAULT_DELTA_T,
    DEFAULT_DP_BUDGET,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_OVERHEAD_BUDGET,
    DEFAULT_WATERMARK,
    EPS,
    OUTPUT_DIR_ENV,
    ConfigError,
)
from workload import (
    DATASET_MOMENTS,
    BurstSpec,
    LengthDistribution,
    SpeedDistribution,
    make_burst_spec,
)

logger = logging.getLogger(__name__)

GENERATOR_KEYS = {
    "duration_s",
    "dataset",
    "input_mean",
    "input_std",
    "output_mean",
    "output_std",
    "max_len",
}
POISSON_KEYS = {"rate_rps"}
BURST_KEYS = {"mean_rate_rps", "intensity", "duration_frac", "cycle_len_s"}
QOE_AWARE_KEYS = {"solver", "objective", "greedy_skip", "dp_budget"}
GAIN_KEYS = {"delta_t", "watermark", "refiner", "overhead_budget"}

DEFAULT_DURATION_S = 1200.0
DEFAULT_DATASET = "sharegpt"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # workload
    workload: Literal["trace", "poisson", "cyclic-burst"] = "cyclic-burst"
    trace_path: Optional[str] = None
    seed: Optional[int] = None
    duration_s: Optional[float] = Field(default=None, gt=0)
    rate_rps: Optional[float] = Field(default=None, gt=0)
    mean_rate_rps: Optional[float] = Field(default=None, gt=0)
    intensity: Optional[float] = Field(default=None, ge=1)
    duration_frac: Optional[float] = Field(default=None, gt=0, lt=1)
    cycle_len_s: Optional[float] = Field(default=None, gt=0)
    dataset: Optional[str] = None
    input_mean: Optional[float] = Field(default=None, gt=0)
    input_std: Optional[float] = Field(default=None, ge=0)
    output_mean: Optional[float] = Field(default=None, gt=0)
    output_std: Optional[float] = Field(default=None, ge=0)
    max_len: Optional[int] = Field(default=None, ge=2)
    speeds: Optional[List[float]] = None
    speed_weights: Optional[List[float]] = None

    # scheduling
    policy: str = "andes"
    solver: Optional[str] = None
    objective: Optional[str] = None
    delta_t: Optional[float] = Field(default=None, gt=0)
    watermark: Optional[float] = Field(default=None, gt=0, le=1)
    greedy_skip: Optional[bool] = None
    dp_budget: Optional[float] = Field(default=None, gt=0)
    refiner: Optional[bool] = None
    overhead_budget: Optional[float] = Field(default=None, gt=0, le=1)

    # engine
    profile_path: Optional[str] = None
    kv_capacity: Optional[int] = Field(default=None, gt=0)
    chunk_size: int = Field(default=1, ge=1)
    network_delay: float = Field(default=0.0, ge=0)
    surplus_staleness: float = Field(default=0.0, ge=0)
    pacer_bypass: bool = False
    until: Optional[float] = Field(default=None, gt=0)

    # output
    output_dir: Optional[str] = None
    verbose: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        given = self.model_fields_set

        # exactly one workload source
        if self.workload == "trace":
            if not self.trace_path:
                raise ValueError("workload 'trace' needs trace_path")
            stray = sorted(given & (GENERATOR_KEYS | POISSON_KEYS | BURST_KEYS))
            if stray:
                raise ValueError(f"generator options {stray} conflict with a trace workload")
        else:
            if self.trace_path:
                raise ValueError(
                    f"trace_path given with workload '{self.workload}'; pick one source"
                )
            if self.seed is None:
                raise ValueError(f"workload '{self.workload}' needs a seed")
        if self.workload == "poisson":
            stray = sorted(given & BURST_KEYS)
            if stray:
                raise ValueError(f"burst options {stray} conflict with a Poisson workload")
            if self.rate_rps is None:
                raise ValueError("workload 'poisson' needs rate_rps")
        if self.workload == "cyclic-burst":
            if "rate_rps" in given:
                raise ValueError("rate_rps is for Poisson workloads; use mean_rate_rps")
            if self.mean_rate_rps is None:
                raise ValueError("workload 'cyclic-burst' needs mean_rate_rps")
            spec_i = self.intensity if self.intensity is not None else 2.0
            spec_f = self.duration_frac if self.duration_frac is not None else 0.35
            if spec_i * spec_f > 1.0 + EPS:
                raise ValueError(
                    f"intensity*duration_frac = {spec_i * spec_f:.3f} > 1: "
                    "the non-burst rate would be negative"
                )
        if self.dataset is not None and self.dataset not in DATASET_MOMENTS:
            raise ValueError(
                f"unknown dataset '{self.dataset}' (choose from {sorted(DATASET_MOMENTS)})"
            )
        if self.speed_weights is not None and (
            self.speeds is None or len(self.speeds) != len(self.speed_weights)
        ):
            raise ValueError("speed_weights needs speeds of the same length")

        # policy options must belong to the chosen policy
        policy = canonical_name(self.policy)
        if policy != "qoe_aware":
            stray = sorted(given & QOE_AWARE_KEYS)
            if stray:
                raise ValueError(f"options {stray} only apply to the QoE-aware policy")
        if policy == "fcfs":
            stray = sorted(given & GAIN_KEYS)
            if stray:
                raise ValueError(f"options {stray} do not apply to fcfs")
        if self.solver is not None and self.solver not in SOLVERS:
            raise ValueError(f"unknown solver '{self.solver}' (choose from {SOLVERS})")
        if self.objective is not None and self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective '{self.objective}' (choose from {OBJECTIVES})")
        if self.greedy_skip and self.solver == "dp":
            raise ValueError("greedy_skip cannot be combined with solver 'dp'")
        return self

    # ------------------------
    # RESOLVED VIEWS
    # ------------------------
    @property
    def policy_name(self) -> str:
        return canonical_name(self.policy)

    def policy_settings(self) -> PolicySettings:
        return PolicySettings(
            name=self.policy_name,
            solver=self.solver or "greedy",
            objective=self.objective or "average",
            delta_t=self.delta_t if self.delta_t is not None else DEFAULT_DELTA_T,
            watermark=self.watermark if self.watermark is not None else DEFAULT_WATERMARK,
            greedy_skip=bool(self.greedy_skip),
            dp_budget=self.dp_budget if self.dp_budget is not None else DEFAULT_DP_BUDGET,
            refiner=True if self.refiner is None else self.refiner,
            overhead_budget=(
                self.overhead_budget
                if self.overhead_budget is not None
                else DEFAULT_OVERHEAD_BUDGET
            ),
        )

    def length_distribution(self) -> LengthDistribution:
        base = LengthDistribution.preset(self.dataset or DEFAULT_DATASET)
        return LengthDistribution(
            input_mean=self.input_mean if self.input_mean is not None else base.input_mean,
            input_std=self.input_std if self.input_std is not None else base.input_std,
            output_mean=self.output_mean if self.output_mean is not None else base.output_mean,
            output_std=self.output_std if self.output_std is not None else base.output_std,
            max_len=self.max_len if self.max_len is not None else base.max_len,
        )

    def speed_distribution(self) -> SpeedDistribution:
        if self.speeds is None:
            return SpeedDistribution.default()
        weights = self.speed_weights or [1.0] * len(self.speeds)
        return SpeedDistribution(tuple(self.speeds), tuple(weights))

    def burst_spec(self) -> BurstSpec:
        return make_burst_spec(
            self.intensity if self.intensity is not None else 2.0,
            self.duration_frac if self.duration_frac is not None else 0.35,
            self.cycle_len_s if self.cycle_len_s is not None else DEFAULT_CYCLE_LEN_S,
            self.mean_rate_rps,
        )

    @property
    def duration(self) -> float:
        return self.duration_s if self.duration_s is not None else DEFAULT_DURATION_S

    def profile(self) -> LatencyProfile:
        if self.profile_path:
            profile = load_profile(self.profile_path)
            if self.kv_capacity is not None:
                profile = profile.with_capacity(self.kv_capacity)
            return profile
        if self.kv_capacity is not None:
            return default_profile(self.kv_capacity)
        return default_profile()

    def resolved_output_dir(self) -> str:
        return self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR


def load_config(
    values: Dict[str, Any],
    config_path: Optional[str] = None,
    defaults: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Layers CLI values over an optional JSON file over `defaults`; CLI wins."""
    merged: Dict[str, Any] = dict(defaults or {})
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        merged.update(doc)
    merged.update({k: v for k, v in values.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(x) for x in first.get("loc", ())) or "config"
        raise ConfigError(f"{where}: {first.get('msg')}") from e


# ------------------------
# REPORT CHECKS
# ------------------------
def is_valid_report(report: SimulationReport) -> bool:
    """Conservation and range checks over a finished simulation."""
    for r in report.requests:
        if r.qoe is not None and not -EPS <= r.qoe <= 1.0 + EPS:
            logger.warning(f"Request {r.id}: QoE {r.qoe} out of [0, 1]")
            return False
        if r.state == "finished" and r.generated != r.output_len:
            logger.warning(
                f"Request {r.id}: finished with {r.generated}/{r.output_len} tokens"
            )
            return False
        if r.ttft is not None and r.ttft < -EPS:
            logger.warning(f"Request {r.id}: negative TTFT {r.ttft}")
            return False
    for s in report.timeseries:
        if s.kv_frac > 1.0 + EPS:
            logger.warning(f"KV occupancy {s.kv_frac} above capacity at t={s.time}")
            return False
    return True
