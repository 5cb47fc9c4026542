import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from timecon.errors import ConfigError
from timecon.services.benchmarks import BENCHMARKS, OUT_OF_SCOPE
from timecon.services.bsde import PolicySpace
from timecon.services.lattice import TreeMode


# Experiment models
class ExperimentName(str, Enum):
    STATIC_VALUE = "static-value"
    DUALITY = "duality"
    GEOMETRIC_DPP = "geometric-dpp"
    DYNAMIC_UTILITY_LINEAR = "dynamic-utility-linear"
    TAU_BOUND = "tau-bound"
    FORWARD_DPP = "forward-dpp"
    MASTER_RESIDUAL = "master-residual"
    ILLPOSED_DEMO = "illposed-demo"
    BENCHMARK_VERIFY = "benchmark-verify"


# Experiments that draw random numbers and therefore need SEED
STOCHASTIC_EXPERIMENTS = {
    ExperimentName.DYNAMIC_UTILITY_LINEAR,
    ExperimentName.TAU_BOUND,
    ExperimentName.FORWARD_DPP,
}

BENCHMARK_EXPERIMENTS = {ExperimentName.STATIC_VALUE, ExperimentName.BENCHMARK_VERIFY}


class ExperimentConfig(BaseModel):
    """Flat KEY=value experiment document; keys are the upper-cased field names."""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentName
    benchmark: Optional[str] = None
    horizon: float = Field(default=1.0, gt=0)
    steps: int = Field(default=4, ge=1)
    tree_mode: TreeMode = TreeMode.RECOMBINING
    brownian_dim: int = Field(default=1, ge=1, le=3)
    policy_space: Optional[PolicySpace] = None
    policy_cap: Optional[int] = Field(default=None, ge=1)
    monte_carlo_size: int = Field(default=10_000, ge=1)
    epsilon: Optional[float] = Field(default=None, gt=0)
    comparison_tol: float = Field(default=1e-8, gt=0)
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    output_dir: Optional[str] = None
    parallel: bool = False
    param_c: Optional[float] = None
    param_x0: Optional[float] = None
    gamma_a: Optional[float] = None
    gamma_p: Optional[float] = None
    reservation: Optional[float] = None
    tau_paths_n: int = Field(default=6, ge=1, le=20)

    @field_validator("benchmark")
    @classmethod
    def known_benchmark(cls, value):
        if value is not None and value not in BENCHMARKS and value not in OUT_OF_SCOPE:
            raise ValueError(f"unknown benchmark '{value}'; valid: {', '.join(sorted(BENCHMARKS))}")
        return value

    @model_validator(mode="after")
    def check_requirements(self):
        if self.experiment in STOCHASTIC_EXPERIMENTS and self.seed is None:
            raise ValueError(f"experiment '{self.experiment.value}' is stochastic and needs SEED")
        if self.experiment in BENCHMARK_EXPERIMENTS and self.benchmark is None:
            raise ValueError(f"experiment '{self.experiment.value}' needs BENCHMARK")
        return self

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = dotenv_values(path)
        data = {key.lower(): value for key, value in raw.items() if value not in (None, "")}
        return cls.model_validate(data)

    def canonical_json(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]

    @property
    def run_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def benchmark_params(self) -> Dict[str, float]:
        """Constructor arguments for the configured benchmark, skipping unset keys."""
        mapping = {
            "mean_variance": {"x0": self.param_x0, "c": self.param_c, "horizon": self.horizon},
            "one_dim": {"c": self.param_c, "horizon": self.horizon},
            "principal_agent": {
                "gamma_a": self.gamma_a,
                "gamma_p": self.gamma_p,
                "reservation": self.reservation,
                "horizon": self.horizon,
            },
            "deterministic": {"horizon": self.horizon},
        }
        params = mapping.get(self.benchmark or "", {})
        return {k: v for k, v in params.items() if v is not None}


# Report models
class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    FLAGGED = "flagged"


class CheckResult(BaseModel):
    name: str
    verdict: Verdict
    measured: Optional[float] = None
    tolerance: Optional[float] = None
    detail: str = ""

    @classmethod
    def at_most(cls, name: str, measured: float, tolerance: float, detail: str = "", flag: bool = False) -> "CheckResult":
        """PASS when measured <= tolerance; otherwise FAIL (or FLAGGED for diagnostics)."""
        ok = float(measured) <= float(tolerance)
        verdict = Verdict.PASS if ok else (Verdict.FLAGGED if flag else Verdict.FAIL)
        return cls(name=name, verdict=verdict, measured=float(measured), tolerance=float(tolerance), detail=detail)

    @classmethod
    def holds(cls, name: str, ok: bool, detail: str = "", measured: Optional[float] = None, flag: bool = False) -> "CheckResult":
        verdict = Verdict.PASS if ok else (Verdict.FLAGGED if flag else Verdict.FAIL)
        return cls(name=name, verdict=verdict, measured=None if measured is None else float(measured), detail=detail)


class ExperimentReport(BaseModel):
    experiment: str
    anchor: str
    config: Dict[str, Any]
    checks: List[CheckResult] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)
    wall_clock: float = Field(default=0.0, exclude=True)

    @property
    def passed(self) -> bool:
        return all(check.verdict is not Verdict.FAIL for check in self.checks)

    def failures(self) -> List[CheckResult]:
        return [check for check in self.checks if check.verdict is Verdict.FAIL]
