import enum
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

from rewritehub.database import DatabaseGateway, DbTarget, ResultTable
from rewritehub.errors import PreconditionError, QueryFailed, QueryTimeout
from rewritehub.models import DEFAULT_THETA, REGRESSION_TOLERANCE, Budget, Query
from rewritehub.sql_utils import outer_order_by

__all__ = [
    'EvaluationMode',
    'Classification',
    'Witness',
    'EquivalenceVerdict',
    'PerformanceVerdict',
    'Evaluator',
    'classify',
]

logger = logging.getLogger(__name__)

MIN_METRIC = 1e-9
MAX_DIFF_ROWS = 3


class EvaluationMode(str, enum.Enum):
    LATENCY = 'latency'
    EXPLAIN_COST = 'explain-cost'


class Classification(str, enum.Enum):
    REGRESSION = 'regression'
    NEUTRAL = 'neutral'
    IMPROVED = 'improved'


@dataclass(frozen=True)
class Witness:
    instance: str
    seed: Optional[int]
    summary: str


@dataclass(frozen=True)
class EquivalenceVerdict:
    """
    Result of differential testing. `order_sensitive` tells whether rows were compared as sequences;
    `order_uncertain` flags that outer ORDER BY detection was not sure.
    """
    equivalent: bool
    witness: Optional[Witness] = None
    instances_tested: int = 0
    order_sensitive: bool = False
    order_uncertain: bool = False
    short_circuit: bool = False

    def __post_init__(self):
        if not self.equivalent and self.witness is None:
            raise PreconditionError('A non-equivalent verdict needs a witness.')

    def to_dict(self) -> dict:
        return {
            'equivalent': self.equivalent,
            'instances_tested': self.instances_tested,
            'order_sensitive': self.order_sensitive,
            'order_uncertain': self.order_uncertain,
            'short_circuit': self.short_circuit,
            'witness': None if self.witness is None else {
                'instance': self.witness.instance,
                'seed': self.witness.seed,
                'summary': self.witness.summary,
            },
        }


def classify(original_metric: float, rewrite_metric: float, theta: float = DEFAULT_THETA) -> Classification:
    if rewrite_metric > REGRESSION_TOLERANCE * original_metric:
        return Classification.REGRESSION
    if original_metric / rewrite_metric > theta:
        return Classification.IMPROVED
    return Classification.NEUTRAL


@dataclass(frozen=True)
class PerformanceVerdict:
    mode: EvaluationMode
    original_metric: float
    rewrite_metric: float
    speedup: float
    classification: Classification
    rewrite_timed_out: bool = False

    def __post_init__(self):
        if min(self.original_metric, self.rewrite_metric, self.speedup) <= 0:
            raise PreconditionError('Performance metrics and speedup must be positive.')

    def to_dict(self) -> dict:
        return {
            'mode': self.mode.value,
            'original_metric': self.original_metric,
            'rewrite_metric': self.rewrite_metric,
            'speedup': self.speedup,
            'classification': self.classification.value,
            'rewrite_timed_out': self.rewrite_timed_out,
        }


def _diff_summary(left: ResultTable, right: ResultTable, ordered: bool) -> Optional[str]:
    if len(left.columns) != len(right.columns):
        return f'column count {len(left.columns)} vs {len(right.columns)}'
    if left.normalized_columns != right.normalized_columns:
        return f'column names {list(left.normalized_columns)} vs {list(right.normalized_columns)}'
    if ordered:
        if left.rows == right.rows:
            return None
        if len(left.rows) != len(right.rows):
            return f'row count {len(left.rows)} vs {len(right.rows)}'
        position = next(i for i, (a, b) in enumerate(zip(left.rows, right.rows)) if a != b)
        return f'row {position} differs: {left.rows[position]} vs {right.rows[position]}'

    left_rows, right_rows = left.multiset(), right.multiset()
    if left_rows == right_rows:
        return None
    only_left = sorted((left_rows - right_rows).elements())[:MAX_DIFF_ROWS]
    only_right = sorted((right_rows - left_rows).elements())[:MAX_DIFF_ROWS]
    return (f'row count {len(left.rows)} vs {len(right.rows)}; '
            f'only in first: {only_left}; only in second: {only_right}')


class Evaluator:
    """
    Judges a rewrite: equivalence by differential testing on seeded sample instances, performance by latency or
    EXPLAIN cost on the benchmark target. The original query's metric is measured once per target and mode.
    """

    def __init__(self,
                 database: DatabaseGateway,
                 benchmark: DbTarget,
                 samples: Sequence[DbTarget],
                 theta: float = DEFAULT_THETA,
                 repetitions: int = 3,
                 timeout_multiplier: float = 10.0,
                 timeout_cap: float | None = 300.0,
                 sample_timeout: float | None = 60.0):
        """
        :param database: Gateway used for every execution.
        :param benchmark: Target where performance is measured.
        :param samples: Equivalence-sample targets; must be distinct from the benchmark database.
        :param theta: Minimum desirable speedup.
        :param repetitions: Timed runs per latency measurement.
        :param timeout_multiplier: Rewrite timeout as a multiple of the original's latency.
        :param timeout_cap: Upper bound of any statement timeout, in seconds.
        :param sample_timeout: Statement timeout on sample instances.
        """
        if theta < 1:
            raise PreconditionError('theta must be at least 1.')
        for sample in samples:
            if sample.same_database(benchmark):
                raise PreconditionError(f'Sample target {sample.name} is the benchmark database.')
        self.database = database
        self.benchmark = benchmark
        self.samples = list(samples)
        self.theta = theta
        self.repetitions = repetitions
        self.timeout_multiplier = timeout_multiplier
        self.timeout_cap = timeout_cap
        self.sample_timeout = sample_timeout
        self._original_metrics: Dict[Tuple[str, EvaluationMode, DbTarget], float] = {}
        self._lock = threading.Lock()

    # --- Equivalence --------------------------------------------------------------------------------------------

    def _compare_on(self, first: Query, second: Query, target: DbTarget, ordered: bool,
                    budget: Budget | None) -> Optional[Witness]:
        try:
            left = self.database.execute_rows(first.sql, target, timeout=self.sample_timeout, budget=budget)
            right = self.database.execute_rows(second.sql, target, timeout=self.sample_timeout, budget=budget)
        except QueryTimeout as e:
            return Witness(target.name, target.seed, f'unknown: {e}')
        except QueryFailed as e:
            return Witness(target.name, target.seed, f'execution failed: {e}')
        summary = _diff_summary(left, right, ordered)
        return None if summary is None else Witness(target.name, target.seed, summary)

    def check_equivalence(self,
                          first: Query,
                          second: Query,
                          instances: Sequence[DbTarget] | None = None,
                          budget: Budget | None = None) -> EquivalenceVerdict:
        """
        Execute both queries on every sample instance and compare the canonical result tables: as sequences when
        either query ends with an outer ORDER BY, as multisets otherwise. A timeout counts as a disagreement.

        :raises DatabaseConnectionError: If an instance cannot be reached.
        """
        if first.canonical_sql == second.canonical_sql:
            return EquivalenceVerdict(equivalent=True, short_circuit=True)
        instances = list(instances if instances is not None else self.samples)
        if not instances:
            raise PreconditionError('Equivalence checking needs at least one sample instance.')

        first_order, first_certain = outer_order_by(first.sql)
        second_order, second_certain = outer_order_by(second.sql)
        ordered = first_order or second_order
        uncertain = not (first_certain and second_certain)

        with ThreadPoolExecutor(max_workers=len(instances), thread_name_prefix='equivalence') as pool:
            witnesses = list(pool.map(lambda target: self._compare_on(first, second, target, ordered, budget),
                                      instances))
        witness = next((w for w in witnesses if w is not None), None)
        verdict = EquivalenceVerdict(equivalent=witness is None,
                                     witness=witness,
                                     instances_tested=len(instances),
                                     order_sensitive=ordered,
                                     order_uncertain=uncertain)
        if witness is not None:
            logger.debug(f'Query {first.id}: rewrite differs on {witness.instance} (seed {witness.seed}): '
                         f'{witness.summary}')
        return verdict

    # --- Performance --------------------------------------------------------------------------------------------

    def _metric(self, sql: str, mode: EvaluationMode, target: DbTarget, timeout: float | None,
                budget: Budget | None) -> Tuple[float, bool]:
        if mode == EvaluationMode.EXPLAIN_COST:
            result = self.database.explain(sql, target, budget=budget)
            if not result.ok:
                raise QueryFailed(result.error_message)
            return max(result.total_cost, MIN_METRIC), False
        measurement = self.database.run_timed(sql, target, repetitions=self.repetitions, timeout=timeout,
                                              budget=budget)
        return max(measurement.mean, MIN_METRIC), measurement.timed_out

    def original_metric(self, query: Query, mode: EvaluationMode, target: DbTarget | None = None,
                        budget: Budget | None = None) -> float:
        target = target or self.benchmark
        key = (query.canonical_sql, mode, target)
        with self._lock:
            cached = self._original_metrics.get(key)
        if cached is not None:
            return cached
        metric, timed_out = self._metric(query.sql, mode, target, self.timeout_cap, budget)
        if timed_out:
            logger.warning(f'Query {query.id}: original query hit the {self.timeout_cap}s timeout cap.')
        with self._lock:
            self._original_metrics.setdefault(key, metric)
        return metric

    def rewrite_timeout(self, original_metric: float) -> float | None:
        timeout = original_metric * self.timeout_multiplier
        return min(timeout, self.timeout_cap) if self.timeout_cap else timeout

    def measure_speedup(self,
                        original: Query,
                        rewrite: Query,
                        mode: EvaluationMode = EvaluationMode.LATENCY,
                        target: DbTarget | None = None,
                        budget: Budget | None = None) -> PerformanceVerdict:
        """
        Speedup of `rewrite` over `original` on the benchmark target.

        In latency mode both run `repetitions` times with cache resets and the rewrite's statement timeout is the
        original latency times `timeout_multiplier`, capped; a rewrite hitting it is a regression measured at the
        timeout. In explain-cost mode the speedup is the ratio of total costs.

        :raises QueryFailed: If either query does not plan in explain-cost mode.
        """
        target = target or self.benchmark
        original_metric = self.original_metric(original, mode, target, budget)
        timeout = self.rewrite_timeout(original_metric) if mode == EvaluationMode.LATENCY else None
        rewrite_metric, timed_out = self._metric(rewrite.sql, mode, target, timeout, budget)
        speedup = original_metric / rewrite_metric
        classification = Classification.REGRESSION if timed_out else classify(original_metric, rewrite_metric,
                                                                                self.theta)
        verdict = PerformanceVerdict(mode=mode,
                                     original_metric=original_metric,
                                     rewrite_metric=rewrite_metric,
                                     speedup=speedup,
                                     classification=classification,
                                     rewrite_timed_out=timed_out)
        logger.debug(f'Query {original.id}: {mode.value} {original_metric:.6g} -> {rewrite_metric:.6g}, '
                     f'speedup {speedup:.3f} ({classification.value}).')
        return verdict
