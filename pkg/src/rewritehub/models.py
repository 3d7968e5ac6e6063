import enum
import threading
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

from rewritehub.errors import BudgetExhausted, PreconditionError
from rewritehub.sql_utils import canonicalize_sql, sql_digest

__all__ = [
    'Query',
    'RewriteStage',
    'CandidateRewrite',
    'Explanation',
    'RewriteOutcome',
    'Budget',
    'DEFAULT_THETA',
    'REGRESSION_TOLERANCE',
]

DEFAULT_THETA = 1.05
REGRESSION_TOLERANCE = 1.05


@dataclass(frozen=True)
class Query:
    """
    A workload query. `canonical_sql` is derived from `sql`; `embedding` is filled in once the query is embedded.
    """
    id: str
    sql: str
    canonical_sql: str = field(init=False)
    embedding: Optional[Tuple[float, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.sql or not self.sql.strip():
            raise PreconditionError(f'Query {self.id}: SQL text is empty.')
        object.__setattr__(self, 'canonical_sql', canonicalize_sql(self.sql))

    @staticmethod
    def from_sql(sql: str, query_id: str | None = None) -> 'Query':
        return Query(id=query_id or sql_digest(sql), sql=sql)

    def with_embedding(self, embedding) -> 'Query':
        return replace(self, embedding=tuple(float(v) for v in embedding))


class RewriteStage(enum.IntEnum):
    SUGGESTED = 0
    SEMANTICALLY_CORRECTED = 1
    SYNTAX_CORRECTED = 2


@dataclass(frozen=True)
class CandidateRewrite:
    source_id: str
    sql: str
    stage: RewriteStage = RewriteStage.SUGGESTED
    revision: int = 0

    @property
    def canonical_sql(self) -> str:
        return canonicalize_sql(self.sql)

    def revise(self, sql: str) -> 'CandidateRewrite':
        """
        Next revision of this candidate, produced by one correction iteration.
        """
        return replace(self, sql=sql, revision=self.revision + 1)

    def advance(self, stage: RewriteStage) -> 'CandidateRewrite':
        """
        Move the candidate to a later stage. Stages never go backwards.
        """
        if stage < self.stage:
            raise PreconditionError(f'Candidate for {self.source_id}: cannot move from {self.stage.name} '
                                    f'back to {stage.name}.')
        return replace(self, stage=stage)


@dataclass(frozen=True)
class Explanation:
    """
    Rule descriptions the model reports having applied, with optional per-rule applicability conditions
    (aligned by index; None where no condition was elicited).
    """
    rules: Tuple[str, ...] = ()
    conditions: Tuple[Optional[str], ...] = ()

    def __post_init__(self):
        if self.conditions and len(self.conditions) != len(self.rules):
            raise PreconditionError('Explanation: one condition slot per rule is required.')

    def condition_for(self, index: int) -> Optional[str]:
        return self.conditions[index] if self.conditions else None


@dataclass(frozen=True)
class RewriteOutcome:
    query: Query
    rewrite: CandidateRewrite
    explanation: Explanation
    equivalent: bool
    speedup: float
    accepted: bool

    def __post_init__(self):
        if self.speedup <= 0:
            raise PreconditionError(f'Query {self.query.id}: speedup must be positive, got {self.speedup}.')
        if self.accepted and not self.equivalent:
            raise PreconditionError(f'Query {self.query.id}: an inequivalent rewrite cannot be accepted.')
        if self.accepted and not self.explanation.rules:
            raise PreconditionError(f'Query {self.query.id}: an accepted rewrite needs at least one rule.')

    @staticmethod
    def fallback(query: Query) -> 'RewriteOutcome':
        """
        The original query standing in for itself: equivalent, speedup exactly 1.0, not accepted.
        """
        return RewriteOutcome(query=query,
                              rewrite=CandidateRewrite(source_id=query.id, sql=query.sql),
                              explanation=Explanation(),
                              equivalent=True,
                              speedup=1.0,
                              accepted=False)


class Budget:
    """
    Remaining wall time (seconds) and money (currency units) for a query or for a whole run. `None` means
    unbounded. A budget may have a parent: debits propagate upwards and the budget counts as exhausted as soon as
    either itself or any ancestor is. Remaining values saturate at zero.
    """

    def __init__(self,
                 seconds: float | None = None,
                 money: float | None = None,
                 parent: Optional['Budget'] = None):
        self._lock = threading.Lock()
        self._seconds = None if seconds is None else max(0.0, float(seconds))
        self._money = None if money is None else max(0.0, float(money))
        self._exhausted_flag = (seconds is not None and seconds <= 0) or (money is not None and money <= 0)
        self.parent = parent
        self.llm_calls_made = 0
        self.db_runs_made = 0

    def child(self, seconds: float | None = None, money: float | None = None) -> 'Budget':
        return Budget(seconds=seconds, money=money, parent=self)

    @property
    def wall_time_remaining(self) -> float:
        with self._lock:
            return float('inf') if self._seconds is None else self._seconds

    @property
    def money_remaining(self) -> float:
        with self._lock:
            return float('inf') if self._money is None else self._money

    def exhausted(self) -> bool:
        with self._lock:
            own = self._exhausted_flag
        return own or (self.parent is not None and self.parent.exhausted())

    def check(self, subject: str = 'Budget') -> None:
        """
        :raises BudgetExhausted: If this budget or an ancestor is exhausted.
        """
        if self.exhausted():
            raise BudgetExhausted(f'{subject}: budget exhausted.')

    def debit(self, seconds: float = 0.0, money: float = 0.0, llm_call: bool = False, db_run: bool = False) -> None:
        with self._lock:
            if self._seconds is not None:
                self._seconds = max(0.0, self._seconds - max(0.0, seconds))
                if self._seconds <= 0:
                    self._exhausted_flag = True
            if self._money is not None:
                self._money = max(0.0, self._money - max(0.0, money))
                if self._money <= 0:
                    self._exhausted_flag = True
            if llm_call:
                self.llm_calls_made += 1
            if db_run:
                self.db_runs_made += 1
        if self.parent is not None:
            self.parent.debit(seconds=seconds, money=money, llm_call=llm_call, db_run=db_run)
