import pytest

from conftest import StubDatabase, fenced, record, scripted_gateway
from rewritehub.corrector import CorrectionStage, Corrector
from rewritehub.database import DbTarget, EngineKind
from rewritehub.errors import PreconditionError
from rewritehub.models import Budget, CandidateRewrite, Query, RewriteStage

ORIGINAL = Query(id='q1', sql='select max(a.salary) as xxx from employee as a, employee as b '
                              'where a.salary < b.salary')
FIRST_GUESS = 'select max(salary) as xxx from employee'
CORRECT = 'select max(salary) as xxx from employee where salary < (select max(salary) from employee)'
NOT_EQUIVALENT = ('q1 returns the second highest salary. q2 returns the highest salary. They are not equivalent: '
                  'with salaries 1 and 2, q1 returns 1 and q2 returns 2.')
TARGET = DbTarget(name='bench', engine=EngineKind.SQLITE, path='unused.db')


def candidate(sql: str = FIRST_GUESS) -> CandidateRewrite:
    return CandidateRewrite(source_id=ORIGINAL.id, sql=sql)


def semantic_script(converge_at: int | None, limit: int = 5):
    checks = [NOT_EQUIVALENT] * ((converge_at or limit + 1) - 1)
    if converge_at is not None:
        checks.append('They are equivalent: both return the second highest salary.')
    records = [record('SemanticCheck', reply) for reply in checks]
    records += [record('SemanticFix', fenced(f'{CORRECT} and {index} = {index}')) for index in range(1, limit)]
    return records


@pytest.mark.parametrize('converge_at', [1, 3, 5])
def test_semantic_stage_converges_after_n_checks(converge_at):
    gateway = scripted_gateway(semantic_script(converge_at))
    corrector = Corrector(gateway, StubDatabase(), TARGET)
    revised, trace = corrector.correct_semantics(ORIGINAL, candidate())

    assert trace.converged
    assert trace.iterations_used == converge_at
    assert trace.llm_calls == 2 * converge_at - 1 == len(gateway.ledger)
    assert revised.stage == RewriteStage.SEMANTICALLY_CORRECTED
    assert revised.revision == converge_at - 1
    if converge_at > 1:
        assert revised.sql == f'{CORRECT} and {converge_at - 1} = {converge_at - 1}'
    assert gateway.ledger.calls_by_template() == {'SemanticCheck': converge_at, 'SemanticFix': converge_at - 1}


def test_semantic_stage_that_never_converges_is_capped():
    gateway = scripted_gateway(semantic_script(None))
    revised, trace = Corrector(gateway, StubDatabase(), TARGET).correct_semantics(ORIGINAL, candidate())
    assert not trace.converged
    assert trace.llm_calls == 9
    assert trace.iterations[-1].revised_sql is None
    assert revised.stage == RewriteStage.SUGGESTED
    assert revised.revision == 4


def test_semantic_checks_and_fixes_alternate():
    gateway = scripted_gateway(semantic_script(2))
    Corrector(gateway, StubDatabase(), TARGET).correct_semantics(ORIGINAL, candidate())
    assert [template for template, _ in gateway.backend.calls] == ['SemanticCheck', 'SemanticFix', 'SemanticCheck']
    assert len({digest for _, digest in gateway.backend.calls}) == 3


def test_fix_reply_without_sql_stops_the_stage():
    gateway = scripted_gateway([record('SemanticCheck', NOT_EQUIVALENT),
                                record('SemanticFix', 'I am not sure how to fix it.')])
    revised, trace = Corrector(gateway, StubDatabase(), TARGET).correct_semantics(ORIGINAL, candidate())
    assert not trace.converged
    assert trace.note == 'fix reply held no SQL'
    assert revised.sql == FIRST_GUESS


def test_empty_candidate_is_rejected():
    corrector = Corrector(scripted_gateway([]), StubDatabase(), TARGET)
    with pytest.raises(PreconditionError):
        corrector.correct_semantics(ORIGINAL, CandidateRewrite(source_id='q1', sql=' '))
    with pytest.raises(PreconditionError):
        Corrector(scripted_gateway([]), StubDatabase(), TARGET, max_iterations=0)


def test_syntax_stage_feeds_engine_error_back():
    broken = 'select max(salary) as xxx from employe'
    database = StubDatabase(errors={broken: 'no such table: employe'})
    gateway = scripted_gateway([record('SyntaxFix', fenced(CORRECT), contains='no such table: employe')])
    revised, trace = Corrector(gateway, database, TARGET).correct_syntax(ORIGINAL, candidate(broken))

    assert trace.stage == CorrectionStage.SYNTAX
    assert trace.converged
    assert trace.llm_calls == 1
    assert [step.verdict for step in trace.iterations] == ['explain-error: no such table: employe', 'explain-ok']
    assert revised.sql == CORRECT
    assert revised.stage == RewriteStage.SYNTAX_CORRECTED


def test_syntax_stage_gives_up_after_the_cap():
    database = StubDatabase(errors={FIRST_GUESS: 'syntax error', f'{FIRST_GUESS} limit 1': 'syntax error'})
    gateway = scripted_gateway([record('SyntaxFix', fenced(f'{FIRST_GUESS} limit 1'))])
    revised, trace = Corrector(gateway, database, TARGET, max_iterations=3).correct_syntax(ORIGINAL, candidate())
    assert not trace.converged
    assert len(database.explained) == 3
    assert trace.llm_calls == 2
    assert revised.stage == RewriteStage.SUGGESTED


def test_correct_forwards_unconverged_candidates():
    gateway = scripted_gateway(semantic_script(None, limit=2))
    corrector = Corrector(gateway, StubDatabase(), TARGET, max_iterations=2)
    revised, (semantic, syntax) = corrector.correct(ORIGINAL, candidate())
    assert not semantic.converged
    assert syntax.converged
    assert syntax.note == 'forwarded without semantic convergence'
    assert revised.stage == RewriteStage.SYNTAX_CORRECTED


def test_budget_stops_both_stages():
    gateway = scripted_gateway(semantic_script(None), rate_in_per_1k=1000.0)
    database = StubDatabase()
    revised, (semantic, syntax) = Corrector(gateway, database, TARGET).correct(ORIGINAL, candidate(),
                                                                               budget=Budget(money=1.0))
    assert semantic.note == 'budget'
    assert syntax.note == 'budget'
    assert semantic.llm_calls == 1
    assert database.explained == []
