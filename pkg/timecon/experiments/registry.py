import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from timecon.errors import UnknownExperimentError
from timecon.models import CheckResult, ExperimentConfig, ExperimentName, ExperimentReport, Verdict
from timecon.services.bsde import PolicySpace
from timecon.services.lattice import ScenarioTree, TimeGrid, TreeMode, build_tree
from timecon.settings import get_settings
from timecon.store import ArtifactStore

logger = logging.getLogger(__name__)


class RunContext:
    """What an experiment handler sees: its config, artifact store and report under construction."""

    def __init__(self, config: ExperimentConfig, store: ArtifactStore, report: ExperimentReport):
        self.config = config
        self.store = store
        self.report = report
        settings = get_settings()
        self.cap = config.policy_cap or settings.policy_cap
        self.workers = settings.workers if config.parallel else 1

    @property
    def seed(self) -> int:
        return self.config.run_seed

    def space(self, default: PolicySpace = PolicySpace.ADAPTED) -> PolicySpace:
        return self.config.policy_space or default

    def tree(self, steps: Optional[int] = None, mode: Optional[TreeMode] = None, horizon: Optional[float] = None, dim: Optional[int] = None) -> ScenarioTree:
        grid = TimeGrid(self.config.horizon if horizon is None else horizon, self.config.steps if steps is None else steps)
        return build_tree(grid, self.config.brownian_dim if dim is None else dim, mode or self.config.tree_mode)

    def check(self, result: CheckResult) -> CheckResult:
        self.report.checks.append(result)
        level = logging.WARNING if result.verdict is Verdict.FAIL else logging.INFO
        logger.log(level, "%s: %s (measured=%s, tol=%s)", result.name, result.verdict.value, result.measured, result.tolerance)
        return result

    def note(self, **values) -> None:
        self.report.summary.update(values)


Handler = Callable[[RunContext], None]


@dataclass(frozen=True)
class Experiment:
    name: ExperimentName
    anchor: str
    handler: Handler
    summary: str = ""


class ExperimentRouter:
    def __init__(self):
        self.experiments: List[Experiment] = []

    def experiment(self, name: ExperimentName, anchor: str, summary: str = ""):
        def register(handler: Handler) -> Handler:
            self.experiments.append(Experiment(ExperimentName(name), anchor, handler, summary))
            return handler

        return register


class Registry:
    def __init__(self):
        self._experiments: Dict[ExperimentName, Experiment] = {}

    def include_router(self, router: ExperimentRouter) -> None:
        for exp in router.experiments:
            self._experiments[exp.name] = exp

    def get(self, name) -> Experiment:
        try:
            return self._experiments[ExperimentName(name)]
        except (ValueError, KeyError):
            raise UnknownExperimentError(str(name), [e.value for e in self._experiments]) from None

    def listing(self) -> List[Experiment]:
        """Registered experiments in declaration order of ExperimentName."""
        return [self._experiments[n] for n in ExperimentName if n in self._experiments]

    def run(self, config: ExperimentConfig, root: Optional[str] = None) -> ExperimentReport:
        exp = self.get(config.experiment)
        store = ArtifactStore(config, root)
        report = ExperimentReport(
            experiment=exp.name.value,
            anchor=exp.anchor,
            config=config.model_dump(mode="json", exclude={"output_dir"}),
        )
        ctx = RunContext(config, store, report)
        logger.info("Running %s (%s) into %s", exp.name.value, exp.anchor, store.path)
        started = time.perf_counter()
        exp.handler(ctx)
        report.wall_clock = time.perf_counter() - started
        store.write_report(report)
        logger.info("Finished %s in %.2fs: %d checks, %d failed", exp.name.value, report.wall_clock, len(report.checks), len(report.failures()))
        return report
