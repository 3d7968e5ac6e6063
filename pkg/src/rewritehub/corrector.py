import enum
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from rewritehub.database import DatabaseGateway, DbTarget
from rewritehub.errors import BudgetExhausted, NoSqlFound, PreconditionError
from rewritehub.llm import Conversation, LlmGateway
from rewritehub.models import Budget, CandidateRewrite, Query, RewriteStage
from rewritehub.prompts import TemplateId, parse_equivalence_verdict, parse_rewrite_response, render, render_text

__all__ = [
    'CorrectionStage',
    'CorrectionStep',
    'CorrectionTrace',
    'Corrector',
    'DEFAULT_MAX_ITERATIONS',
]

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 5


class CorrectionStage(str, enum.Enum):
    SEMANTIC = 'semantic'
    SYNTAX = 'syntax'


@dataclass(frozen=True)
class CorrectionStep:
    candidate_sql: str
    verdict: str
    revised_sql: Optional[str] = None


@dataclass
class CorrectionTrace:
    """
    Audit trail of one correction stage. `note` explains an early stop (budget, unparsable fix) or flags a
    candidate forwarded to the syntax stage without semantic convergence.
    """
    stage: CorrectionStage
    max_iterations: int
    iterations: List[CorrectionStep] = field(default_factory=list)
    converged: bool = False
    llm_calls: int = 0
    note: Optional[str] = None

    @property
    def iterations_used(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            'stage': self.stage.value,
            'converged': self.converged,
            'iterations_used': self.iterations_used,
            'llm_calls': self.llm_calls,
            'note': self.note,
            'iterations': [
                {'candidate': step.candidate_sql, 'verdict': step.verdict, 'revised': step.revised_sql}
                for step in self.iterations
            ],
        }


class Corrector:
    """
    Two-stage counterexample-guided correction. The semantic stage keeps one growing conversation per candidate:
    the model analyses both queries, and while it finds a counterexample it is asked for the modified query. The
    syntax stage checks the candidate with EXPLAIN and feeds the engine's error text back to the model.
    """

    def __init__(self,
                 llm: LlmGateway,
                 database: DatabaseGateway,
                 target: DbTarget,
                 max_iterations: int = DEFAULT_MAX_ITERATIONS,
                 context_limit_tokens: int | None = None):
        """
        :param llm: Gateway for check and fix calls.
        :param database: Gateway for EXPLAIN checks.
        :param target: Database the syntax stage plans against.
        :param max_iterations: Iteration cap of each stage.
        :param context_limit_tokens: Estimated token count at which the semantic conversation is re-seeded with
        only the original query and the latest candidate.
        """
        if max_iterations < 1:
            raise PreconditionError('Correction needs at least one iteration.')
        self.llm = llm
        self.database = database
        self.target = target
        self.max_iterations = max_iterations
        self.context_limit_tokens = context_limit_tokens

    def _check_conversation(self, previous: Conversation | None, reply: str | None, original: Query,
                            candidate: CandidateRewrite) -> Conversation:
        bindings = {'original': original.sql, 'candidate': candidate.sql}
        if previous is None:
            return render(TemplateId.SEMANTIC_CHECK, bindings)
        extended = previous.follow_up(reply, render_text(TemplateId.SEMANTIC_CHECK, bindings),
                                      template_id=TemplateId.SEMANTIC_CHECK.value)
        if self.context_limit_tokens and extended.estimated_tokens() > self.context_limit_tokens:
            logger.debug(f'Query {original.id}: semantic conversation reached the context limit, re-seeding.')
            return render(TemplateId.SEMANTIC_CHECK, bindings)
        return extended

    def correct_semantics(self,
                          original: Query,
                          candidate: CandidateRewrite,
                          max_iterations: int | None = None,
                          budget: Budget | None = None) -> Tuple[CandidateRewrite, CorrectionTrace]:
        """
        Iterate equivalence analysis and fixes until the model calls the queries equivalent.

        Every iteration asks for the analysis; a fix is requested only when another check can follow, so a
        never-converging candidate costs `max_iterations` checks and `max_iterations - 1` fixes.

        :return: The last revision and the trace; the revision is marked semantically corrected only if converged.
        :raises TransportError: If an LLM call fails after retries.
        """
        max_iterations = max_iterations or self.max_iterations
        if not candidate.sql.strip():
            raise PreconditionError(f'Query {original.id}: candidate rewrite is empty.')
        trace = CorrectionTrace(stage=CorrectionStage.SEMANTIC, max_iterations=max_iterations)
        subject = f'Query {original.id}'
        conversation: Conversation | None = None
        reply: str | None = None

        try:
            for iteration in range(1, max_iterations + 1):
                conversation = self._check_conversation(conversation, reply, original, candidate)
                reply, _ = self.llm.complete(conversation, budget=budget, subject=subject)
                trace.llm_calls += 1
                verdict = parse_equivalence_verdict(reply)
                if verdict.equivalent:
                    trace.iterations.append(CorrectionStep(candidate.sql, 'equivalent'))
                    trace.converged = True
                    break
                if iteration == max_iterations:
                    trace.iterations.append(CorrectionStep(candidate.sql, 'not-equivalent'))
                    break

                conversation = conversation.follow_up(reply, render_text(TemplateId.SEMANTIC_FIX),
                                                      template_id=TemplateId.SEMANTIC_FIX.value)
                reply, _ = self.llm.complete(conversation, budget=budget, subject=subject)
                trace.llm_calls += 1
                try:
                    revised = parse_rewrite_response(reply).sql
                except (NoSqlFound, PreconditionError):
                    trace.iterations.append(CorrectionStep(candidate.sql, 'not-equivalent'))
                    trace.note = 'fix reply held no SQL'
                    logger.warning(f'{subject}: semantic fix reply held no SQL, keeping the previous candidate.')
                    break
                trace.iterations.append(CorrectionStep(candidate.sql, 'not-equivalent', revised))
                candidate = candidate.revise(revised)
        except BudgetExhausted:
            trace.note = 'budget'
            logger.warning(f'{subject}: budget exhausted during semantic correction.')

        if trace.converged:
            candidate = candidate.advance(RewriteStage.SEMANTICALLY_CORRECTED)
            logger.info(f'{subject}: semantic correction converged after {trace.iterations_used} iterations.')
        else:
            logger.info(f'{subject}: semantic correction did not converge in {trace.iterations_used} iterations.')
        return candidate, trace

    def correct_syntax(self,
                       original: Query,
                       candidate: CandidateRewrite,
                       max_iterations: int | None = None,
                       budget: Budget | None = None) -> Tuple[CandidateRewrite, CorrectionTrace]:
        """
        Iterate EXPLAIN checks and fixes until the candidate plans. Each fix is a fresh conversation carrying the
        original query, the current candidate and the engine error verbatim.

        :raises DatabaseConnectionError: If the target cannot be reached.
        :raises TransportError: If an LLM call fails after retries.
        """
        max_iterations = max_iterations or self.max_iterations
        trace = CorrectionTrace(stage=CorrectionStage.SYNTAX, max_iterations=max_iterations)
        subject = f'Query {original.id}'

        try:
            for iteration in range(1, max_iterations + 1):
                if budget is not None:
                    budget.check(subject)
                result = self.database.explain(candidate.sql, self.target, budget=budget)
                if result.ok:
                    trace.iterations.append(CorrectionStep(candidate.sql, 'explain-ok'))
                    trace.converged = True
                    break
                if iteration == max_iterations:
                    trace.iterations.append(CorrectionStep(candidate.sql, f'explain-error: {result.error_message}'))
                    break

                conversation = render(TemplateId.SYNTAX_FIX, {'original': original.sql,
                                                              'candidate': candidate.sql,
                                                              'error': result.error_message})
                reply, _ = self.llm.complete(conversation, budget=budget, subject=subject)
                trace.llm_calls += 1
                try:
                    revised = parse_rewrite_response(reply).sql
                except (NoSqlFound, PreconditionError):
                    trace.iterations.append(CorrectionStep(candidate.sql, f'explain-error: {result.error_message}'))
                    trace.note = 'fix reply held no SQL'
                    logger.warning(f'{subject}: syntax fix reply held no SQL, keeping the previous candidate.')
                    break
                trace.iterations.append(CorrectionStep(candidate.sql, f'explain-error: {result.error_message}',
                                                       revised))
                candidate = candidate.revise(revised)
        except BudgetExhausted:
            trace.note = 'budget'
            logger.warning(f'{subject}: budget exhausted during syntax correction.')

        if trace.converged:
            candidate = candidate.advance(RewriteStage.SYNTAX_CORRECTED)
            logger.debug(f'{subject}: candidate plans after {trace.iterations_used} syntax iterations.')
        else:
            logger.info(f'{subject}: syntax correction did not converge in {trace.iterations_used} iterations.')
        return candidate, trace

    def correct(self,
                original: Query,
                candidate: CandidateRewrite,
                budget: Budget | None = None) -> Tuple[CandidateRewrite, Tuple[CorrectionTrace, CorrectionTrace]]:
        """
        Semantic stage, then syntax stage. A semantically unconverged candidate is still forwarded; the equivalence
        tester decides.
        """
        candidate, semantic = self.correct_semantics(original, candidate, budget=budget)
        if semantic.note == 'budget':
            return candidate, (semantic, CorrectionTrace(stage=CorrectionStage.SYNTAX,
                                                         max_iterations=self.max_iterations, note='budget'))
        candidate, syntax = self.correct_syntax(original, candidate, budget=budget)
        if not semantic.converged and syntax.note is None:
            syntax.note = 'forwarded without semantic convergence'
        return candidate, (semantic, syntax)
