import enum
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from rewritehub.corrector import CorrectionTrace, Corrector
from rewritehub.embedding import EmbeddingProvider, EmbeddingVector, embed
from rewritehub.errors import (BudgetExhausted, NoSqlFound, PreconditionError, ProviderError, RewriteHubError,
                               TransportError)
from rewritehub.evaluator import (Classification, EquivalenceVerdict, EvaluationMode, Evaluator,
                                  PerformanceVerdict)
from rewritehub.llm import LlmGateway
from rewritehub.models import DEFAULT_THETA, Budget, CandidateRewrite, Explanation, Query, RewriteOutcome
from rewritehub.prompts import (RULE_DESCRIPTION_REQUEST, TemplateId, parse_condition, parse_rewrite_response,
                                render, render_text)
from rewritehub.report import RunReport
from rewritehub.repository import Hint, RuleRepository
from rewritehub.sql_utils import mentions_query_details, query_identifiers
from rewritehub.types import ResultSignature
from rewritehub.utils import try_or_default

__all__ = [
    'Diagnosis',
    'RunConfig',
    'QueryAttempt',
    'RoundSummary',
    'RunState',
    'Orchestrator',
]

logger = logging.getLogger(__name__)


class Diagnosis(str, enum.Enum):
    NO_SUGGESTION = 'no-suggestion'
    UNEXPLAINED = 'unexplained'
    SYNTAX_STUCK = 'syntax-stuck'
    INEQUIVALENT = 'inequivalent'
    REGRESSION = 'regression'
    NO_IMPROVEMENT = 'no-improvement'
    BUDGET = 'budget'
    ERROR = 'error'


@dataclass(frozen=True)
class RunConfig:
    """
    Knobs of a run. `per_query_seconds` and `per_query_money` bound each query over the whole run; the global
    limits bound the run. None means unbounded.
    """
    zero_shot_rounds: int = 4
    max_total_rounds: int = 5
    theta: float = DEFAULT_THETA
    mode: EvaluationMode = EvaluationMode.LATENCY
    k_neighbors: int = 5
    k_groups: int = 3
    max_iterations: int = 5
    per_query_seconds: Optional[float] = 30.0
    per_query_money: Optional[float] = None
    global_seconds: Optional[float] = None
    global_money: Optional[float] = None
    workers: int = 1
    requeue_accepted: bool = False

    def __post_init__(self):
        if self.zero_shot_rounds < 0 or self.max_total_rounds < 1:
            raise PreconditionError('Round counts must be non-negative and allow at least one round.')
        if self.zero_shot_rounds > self.max_total_rounds:
            raise PreconditionError('zero_shot_rounds cannot exceed max_total_rounds.')
        if self.theta < 1:
            raise PreconditionError('theta must be at least 1.')
        if min(self.k_neighbors, self.k_groups, self.max_iterations, self.workers) < 1:
            raise PreconditionError('k_neighbors, k_groups, max_iterations and workers must be positive.')

    def to_dict(self) -> dict:
        return {
            'zero_shot_rounds': self.zero_shot_rounds,
            'max_total_rounds': self.max_total_rounds,
            'theta': self.theta,
            'mode': self.mode.value,
            'k_neighbors': self.k_neighbors,
            'k_groups': self.k_groups,
            'max_iterations': self.max_iterations,
            'per_query_seconds': self.per_query_seconds,
            'per_query_money': self.per_query_money,
            'global_seconds': self.global_seconds,
            'global_money': self.global_money,
            'requeue_accepted': self.requeue_accepted,
        }


@dataclass
class QueryAttempt:
    """
    One query's pass through suggest, correct and evaluate in one round.
    """
    query: Query
    round_index: int
    hints: List[Hint] = field(default_factory=list)
    candidate: Optional[CandidateRewrite] = None
    explanation: Explanation = field(default_factory=Explanation)
    traces: Tuple[CorrectionTrace, ...] = ()
    equivalence: Optional[EquivalenceVerdict] = None
    performance: Optional[PerformanceVerdict] = None
    diagnosis: Optional[Diagnosis] = None
    detail: Optional[str] = None
    accepted: bool = False

    @property
    def equivalent(self) -> bool:
        return self.equivalence is not None and self.equivalence.equivalent

    @property
    def speedup(self) -> float:
        return self.performance.speedup if self.performance is not None else 1.0

    def to_dict(self) -> dict:
        return {
            'query_id': self.query.id,
            'round': self.round_index + 1,
            'hints': [hint.description for hint in self.hints],
            'candidate': self.candidate.sql if self.candidate else None,
            'rules': list(self.explanation.rules),
            'traces': [trace.to_dict() for trace in self.traces],
            'equivalence': self.equivalence.to_dict() if self.equivalence else None,
            'performance': self.performance.to_dict() if self.performance else None,
            'diagnosis': self.diagnosis.value if self.diagnosis else None,
            'detail': self.detail,
            'accepted': self.accepted,
        }


@dataclass
class RoundSummary:
    round_index: int
    hinted: bool
    pending: int
    accepted: int
    changed: bool
    attempts: List[QueryAttempt] = field(default_factory=list)

    def to_dict(self) -> dict:
        diagnoses: Dict[str, int] = {}
        for attempt in self.attempts:
            if attempt.diagnosis is not None:
                diagnoses[attempt.diagnosis.value] = diagnoses.get(attempt.diagnosis.value, 0) + 1
        return {
            'round': self.round_index + 1,
            'hinted': self.hinted,
            'pending': self.pending,
            'accepted': self.accepted,
            'changed': self.changed,
            'diagnoses': dict(sorted(diagnoses.items())),
            'attempts': [attempt.to_dict() for attempt in self.attempts],
        }


@dataclass
class RunState:
    queries: List[Query]
    pending: List[Query]
    budget: Budget
    query_budgets: Dict[str, Budget]
    embeddings: Dict[str, EmbeddingVector]
    results: Dict[str, RewriteOutcome] = field(default_factory=dict)
    last_attempts: Dict[str, QueryAttempt] = field(default_factory=dict)
    rounds: List[RoundSummary] = field(default_factory=list)
    round_index: int = 0
    truncated: bool = False
    truncation_reason: Optional[str] = None
    converged: bool = False

    def signature(self) -> ResultSignature:
        return frozenset((query_id, outcome.rewrite.canonical_sql) for query_id, outcome in self.results.items())


class Orchestrator:
    """
    Runs the rewrite loop over a workload: rounds of suggest, correct and evaluate, growing the rule repository
    from every equivalent rewrite and feeding its rules back as hints once the zero-shot rounds are over.

    Each round has three phases. Hints for every pending query are selected first, so a round only sees rules from
    earlier rounds. Queries are then processed by a worker pool. Finally repository updates are applied one query
    at a time in workload order, which keeps rule and group ids reproducible.

    Attributes:
        llm: Gateway for suggestion and condition calls.
        repository: The rule repository read for hints and grown by the run.
        corrector: Two-stage correction.
        evaluator: Equivalence and performance judgement.
        config: Run configuration.
    """

    def __init__(self,
                 llm: LlmGateway,
                 repository: RuleRepository,
                 corrector: Corrector,
                 evaluator: Evaluator,
                 query_embedder: EmbeddingProvider,
                 config: RunConfig = RunConfig()):
        self.llm = llm
        self.repository = repository
        self.corrector = corrector
        self.evaluator = evaluator
        self.query_embedder = query_embedder
        self.config = config
        self.stop_event = threading.Event()

    def stop(self) -> None:
        """
        Ask a running `rewrite_workload` to stop after the queries already in progress.
        """
        self.stop_event.set()

    # --- Suggest and explain ------------------------------------------------------------------------------------

    def _elicit_condition(self, query: Query, conversation, reply: str, rule: str, identifiers,
                          budget: Budget | None) -> Optional[str]:
        follow_up = conversation.follow_up(reply, render_text(TemplateId.CONDITION_ELICIT, {'rule': rule}),
                                           template_id=TemplateId.CONDITION_ELICIT.value)
        try:
            answer, _ = self.llm.complete(follow_up, budget=budget, subject=f'Query {query.id}')
        except TransportError as e:
            logger.warning(f'Query {query.id}: condition request for "{rule}" failed ({e}).')
            return None
        condition = parse_condition(answer)
        if condition and mentions_query_details(condition, identifiers):
            logger.warning(f'Query {query.id}: condition for "{rule}" names query details, dropped.')
            return None
        return condition

    def suggest_and_explain(self,
                            query: Query,
                            hints: Sequence[str] = (),
                            budget: Budget | None = None) -> Tuple[CandidateRewrite, Explanation]:
        """
        Ask for a rewrite and the rules it applies; with hints the hinted prompt is used, otherwise the zero-shot
        prompt followed by the rule-description request. Rules naming identifiers of the query are dropped. Every
        rule the repository does not know yet gets one follow-up asking for its applicability condition.

        :raises NoSqlFound: If the reply holds no SQL.
        :raises BudgetExhausted: If the budget runs out.
        :raises TransportError: If the suggestion call fails after retries.
        """
        if hints:
            conversation = render(TemplateId.HINTED_REWRITE, {'query': query.sql, 'hints': list(hints)})
        else:
            conversation = render(TemplateId.ZERO_SHOT_REWRITE, {'query': query.sql}) \
                .append_to_last_turn(RULE_DESCRIPTION_REQUEST)
        reply, _ = self.llm.complete(conversation, budget=budget, subject=f'Query {query.id}')
        response = parse_rewrite_response(reply)

        identifiers = query_identifiers(query.sql)
        rules, conditions = [], []
        for rule in response.rules:
            if mentions_query_details(rule, identifiers):
                logger.warning(f'Query {query.id}: rule "{rule}" names query details, dropped.')
                continue
            known = self.repository.find_rule(rule)
            if known is not None:
                condition = known.condition
            else:
                condition = self._elicit_condition(query, conversation, reply, rule, identifiers, budget)
            rules.append(rule)
            conditions.append(condition)

        candidate = CandidateRewrite(source_id=query.id, sql=response.sql)
        return candidate, Explanation(rules=tuple(rules), conditions=tuple(conditions))

    # --- One query ----------------------------------------------------------------------------------------------

    def _evaluate(self, attempt: QueryAttempt, budget: Budget) -> None:
        query, candidate = attempt.query, attempt.candidate
        _, syntax = attempt.traces
        if not syntax.converged:
            attempt.diagnosis = Diagnosis.BUDGET if syntax.note == 'budget' else Diagnosis.SYNTAX_STUCK
            return

        rewrite = Query(id=query.id, sql=candidate.sql)
        attempt.equivalence = self.evaluator.check_equivalence(query, rewrite, budget=budget)
        if not attempt.equivalence.equivalent:
            attempt.diagnosis = Diagnosis.INEQUIVALENT
            attempt.detail = attempt.equivalence.witness.summary
            return
        if attempt.equivalence.short_circuit:
            attempt.diagnosis = Diagnosis.NO_IMPROVEMENT
            attempt.detail = 'rewrite is the original query'
            return

        attempt.performance = self.evaluator.measure_speedup(query, rewrite, self.config.mode, budget=budget)
        if attempt.performance.classification == Classification.REGRESSION:
            attempt.diagnosis = Diagnosis.REGRESSION
        elif attempt.performance.speedup <= self.config.theta:
            attempt.diagnosis = Diagnosis.NO_IMPROVEMENT
        elif not attempt.explanation.rules:
            attempt.diagnosis = Diagnosis.UNEXPLAINED
        else:
            attempt.accepted = True

    def process_query(self, query: Query, hints: List[Hint], round_index: int, budget: Budget) -> QueryAttempt:
        """
        Suggest, correct and evaluate one query. Never raises: failures end up as the attempt's diagnosis.
        """
        attempt = QueryAttempt(query=query, round_index=round_index, hints=hints)
        try:
            budget.check(f'Query {query.id}')
            attempt.candidate, attempt.explanation = self.suggest_and_explain(
                query, [hint.description for hint in hints], budget=budget)
            attempt.candidate, attempt.traces = self.corrector.correct(query, attempt.candidate, budget=budget)
            self._evaluate(attempt, budget)
        except NoSqlFound:
            attempt.diagnosis = Diagnosis.NO_SUGGESTION
        except BudgetExhausted as e:
            attempt.diagnosis = Diagnosis.BUDGET
            attempt.detail = str(e)
        except RewriteHubError as e:
            logger.error(f'Query {query.id}: {type(e).__name__}: {e}')
            attempt.diagnosis = Diagnosis.ERROR
            attempt.detail = f'{type(e).__name__}: {e}'
        except Exception as e:
            logger.exception(f'Query {query.id}: unexpected failure.')
            attempt.diagnosis = Diagnosis.ERROR
            attempt.detail = f'{type(e).__name__}: {e}'

        if attempt.accepted:
            logger.info(f'Query {query.id}: accepted rewrite with speedup {attempt.speedup:.2f}x.')
        else:
            logger.info(f'Query {query.id}: no accepted rewrite this round ({attempt.diagnosis.value}).')
        return attempt

    # --- Repository updates -------------------------------------------------------------------------------------

    def _record_rules(self, attempt: QueryAttempt, budget: Budget) -> List[str]:
        """
        Book the observed speedup on every rule of an equivalent rewrite, storing rules seen for the first time.
        """
        rule_ids = []
        for index, description in enumerate(attempt.explanation.rules):
            known = self.repository.find_rule(description)
            try:
                if known is not None:
                    self.repository.update_benefit(known.rule_id, attempt.speedup)
                    rule_ids.append(known.rule_id)
                else:
                    rule_id, _ = self.repository.add_rule(description, attempt.explanation.condition_for(index),
                                                          attempt.query.id, attempt.speedup, budget=budget)
                    rule_ids.append(rule_id)
            except (ProviderError, PreconditionError) as e:
                logger.warning(f'Query {attempt.query.id}: rule "{description}" not stored ({e}).')
        return rule_ids

    def _apply(self, state: RunState, attempt: QueryAttempt) -> None:
        query = attempt.query
        state.last_attempts[query.id] = attempt
        if attempt.performance is not None:
            rule_ids = self._record_rules(attempt, state.budget)
        else:
            rule_ids = []
        if attempt.diagnosis == Diagnosis.BUDGET and state.query_budgets[query.id].exhausted():
            state.truncated = True
            state.truncation_reason = state.truncation_reason or 'budget'
            state.pending = [q for q in state.pending if q.id != query.id]
            return
        if not attempt.accepted:
            return

        outcome = RewriteOutcome(query=query,
                                 rewrite=attempt.candidate,
                                 explanation=attempt.explanation,
                                 equivalent=True,
                                 speedup=attempt.speedup,
                                 accepted=True)
        previous = state.results.get(query.id)
        if previous is None or outcome.speedup > previous.speedup:
            state.results[query.id] = outcome
        embedding = state.embeddings.get(query.id)
        if embedding is not None and rule_ids:
            self.repository.record_query(query.id, embedding, rule_ids)
        if not self.config.requeue_accepted:
            state.pending = [q for q in state.pending if q.id != query.id]

    # --- Rounds -------------------------------------------------------------------------------------------------

    def _hints_for(self, state: RunState, query: Query, hinted: bool) -> List[Hint]:
        embedding = state.embeddings.get(query.id)
        if not hinted or embedding is None:
            return []
        return self.repository.select_hints(embedding, self.config.k_neighbors, self.config.k_groups)

    def run_round(self, state: RunState) -> RunState:
        """
        One pass over the pending queries. Accepted queries leave the pending list; the round index advances.
        """
        if not state.pending:
            raise PreconditionError('Round needs pending queries.')
        round_index = state.round_index
        hinted = round_index >= self.config.zero_shot_rounds
        before = state.signature()

        regrouped = self.repository.regroup_parked(budget=state.budget)
        if regrouped:
            logger.info(f'Round {round_index + 1}: {regrouped} parked rules regrouped.')

        pending = list(state.pending)
        hints: Dict[str, List[Hint]] = {}
        hint_failures: Dict[str, str] = {}
        for query in pending:
            try:
                hints[query.id] = self._hints_for(state, query, hinted)
            except RewriteHubError as e:
                logger.error(f'Query {query.id}: hint selection failed, {type(e).__name__}: {e}')
                hint_failures[query.id] = f'hint selection failed ({type(e).__name__}: {e})'

        def work(query: Query) -> Optional[QueryAttempt]:
            if self.stop_event.is_set():
                return None
            if query.id in hint_failures:
                return QueryAttempt(query=query, round_index=round_index, diagnosis=Diagnosis.ERROR,
                                    detail=hint_failures[query.id])
            return self.process_query(query, hints[query.id], round_index, state.query_budgets[query.id])

        with ThreadPoolExecutor(max_workers=self.config.workers, thread_name_prefix='rewrite') as pool:
            futures = [pool.submit(work, query) for query in pending]
            try:
                results = [future.result() for future in futures]
            except KeyboardInterrupt:
                logger.warning(f'Round {round_index + 1}: interrupted, finishing the queries in progress.')
                self.stop()
                results = [future.result() for future in futures]
        attempts = [attempt for attempt in results if attempt is not None]

        accepted = 0
        for attempt in attempts:
            self._apply(state, attempt)
            accepted += attempt.accepted

        changed = state.signature() != before
        state.rounds.append(RoundSummary(round_index=round_index,
                                         hinted=hinted,
                                         pending=len(pending),
                                         accepted=accepted,
                                         changed=changed,
                                         attempts=attempts))
        state.round_index += 1
        if not changed and hinted:
            state.converged = True
        logger.info(f'Round {round_index + 1}: {accepted} of {len(pending)} queries accepted'
                    f'{" with hints" if hinted else ""}.')
        return state

    def start(self, queries: Sequence[Query]) -> RunState:
        """
        Embed the workload and set up budgets.

        :raises PreconditionError: If the workload is empty or query ids repeat.
        """
        if not queries:
            raise PreconditionError('Workload has no queries.')
        if len({query.id for query in queries}) != len(queries):
            raise PreconditionError('Workload query ids must be unique.')
        budget = Budget(seconds=self.config.global_seconds, money=self.config.global_money)
        embeddings = {}
        embedded = []
        for query in queries:
            vector = try_or_default(lambda: embed(query.canonical_sql, self.query_embedder),
                                    log=logger, message=f'Query {query.id}: no hints, embedding failed: ')
            if vector is not None:
                embeddings[query.id] = vector
                query = query.with_embedding(vector.values)
            embedded.append(query)
        return RunState(queries=embedded,
                        pending=list(embedded),
                        budget=budget,
                        query_budgets={query.id: budget.child(seconds=self.config.per_query_seconds,
                                                              money=self.config.per_query_money)
                                       for query in queries},
                        embeddings=embeddings)

    def rewrite_workload(self, queries: Sequence[Query]) -> Tuple[List[RewriteOutcome], RunReport]:
        """
        Run rounds until every query is accepted, a hinted round changes nothing, the global budget is exhausted,
        `max_total_rounds` is reached or `stop` is called.

        :return: One outcome per query (accepted rewrite or fallback to the original) and the run report.
        """
        repository_before = self.repository.stats()
        ledger_before = len(self.llm.ledger)
        state = self.start(queries)
        termination = 'max-rounds'

        try:
            while True:
                if not state.pending:
                    termination = 'all-accepted' if not state.truncated else 'budget'
                    break
                if state.budget.exhausted():
                    state.truncated = True
                    state.truncation_reason = state.truncation_reason or 'budget'
                    termination = 'budget'
                    break
                if self.stop_event.is_set():
                    break
                if state.round_index >= self.config.max_total_rounds:
                    break
                self.run_round(state)
                if state.converged:
                    termination = 'converged'
                    break
        except KeyboardInterrupt:
            self.stop()
            logger.warning('Run interrupted, writing a partial report.')

        if self.stop_event.is_set():
            state.truncated = True
            state.truncation_reason = 'interrupted'
            termination = 'interrupted'

        outcomes = [state.results.get(query.id) or RewriteOutcome.fallback(query) for query in state.queries]
        report = self._report(state, outcomes, termination, repository_before, ledger_before)
        logger.info(f'Run finished ({termination}): {len(state.results)} of {len(state.queries)} queries '
                    f'accepted in {state.round_index} rounds.')
        return outcomes, report

    def _report(self, state: RunState, outcomes: List[RewriteOutcome], termination: str,
                repository_before: dict, ledger_before: int) -> RunReport:
        records = self.llm.ledger.snapshot()[ledger_before:]
        calls_by_template: Dict[str, int] = {}
        for record in records:
            calls_by_template[str(record.template_id)] = calls_by_template.get(str(record.template_id), 0) + 1

        outcome_entries = []
        for outcome in outcomes:
            attempt = state.last_attempts.get(outcome.query.id)
            outcome_entries.append({
                'query_id': outcome.query.id,
                'accepted': outcome.accepted,
                'equivalent': outcome.equivalent,
                'speedup': outcome.speedup,
                'original_sql': outcome.query.sql,
                'rewrite_sql': outcome.rewrite.sql,
                'rules': list(outcome.explanation.rules),
                'conditions': list(outcome.explanation.conditions),
                'rounds_attempted': sum(1 for summary in state.rounds
                                        for a in summary.attempts if a.query.id == outcome.query.id),
                'last_round': attempt.round_index + 1 if attempt else None,
            })

        failures = []
        for query in state.queries:
            if query.id in state.results:
                continue
            attempt = state.last_attempts.get(query.id)
            failures.append({
                'query_id': query.id,
                'diagnosis': attempt.diagnosis.value if attempt and attempt.diagnosis else Diagnosis.BUDGET.value,
                'detail': attempt.detail if attempt else 'never attempted',
                'round': attempt.round_index + 1 if attempt else None,
            })

        repository_after = self.repository.stats()
        return RunReport(
            outcomes=outcome_entries,
            failures=failures,
            rounds=[summary.to_dict() for summary in state.rounds],
            usage={
                'totals': {
                    'calls': len(records),
                    'tokens_in': sum(r.tokens_in for r in records),
                    'tokens_out': sum(r.tokens_out for r in records),
                    'cost': round(sum(r.cost for r in records), 10),
                    'latency': round(sum(r.latency for r in records), 6),
                },
                'calls_by_template': dict(sorted(calls_by_template.items())),
            },
            repository={
                'before': {key: repository_before[key] for key in ('rules', 'groups', 'parked', 'query_records')},
                'after': repository_after,
                'rules_added': repository_after['rules'] - repository_before['rules'],
                'groups_added': repository_after['groups'] - repository_before['groups'],
            },
            config=self.config.to_dict(),
            termination=termination,
            truncated=state.truncated,
            truncation_reason=state.truncation_reason,
        )
