from typing import Dict, Iterable, Optional

import pytest

from rewritehub.database import DbTarget, EngineKind, ExplainResult, LatencyMeasurement, ResultTable, TargetRole
from rewritehub.embedding import HashingEmbedder
from rewritehub.llm import LlmGateway, ScriptedBackend, ScriptedRecord
from rewritehub.sql_utils import canonicalize_sql

EMPLOYEE_DDL = 'CREATE TABLE employee (id INTEGER, dept TEXT, salary INTEGER);'


def scripted_gateway(records: Iterable[ScriptedRecord], rate_in_per_1k: float = 0.0,
                     rate_out_per_1k: float = 0.0) -> LlmGateway:
    return LlmGateway(ScriptedBackend(list(records)),
                      rate_in_per_1k=rate_in_per_1k,
                      rate_out_per_1k=rate_out_per_1k,
                      retries=0,
                      sleep=lambda seconds: None)


def record(template_id: Optional[str], reply: str, contains: Optional[str] = None) -> ScriptedRecord:
    return ScriptedRecord(template_id=template_id, reply=reply, contains=contains)


def fenced(sql: str, *rules: str) -> str:
    """
    A rewrite reply as a chat model writes it: the SQL in a fence, then the rules as a numbered list.
    """
    reply = f'Here is the rewritten query:\n```sql\n{sql}\n```\n'
    if rules:
        reply += 'Rules used:\n' + '\n'.join(f'{index}. {rule}' for index, rule in enumerate(rules, start=1))
    return reply


class StubDatabase:
    """
    Stands in for DatabaseGateway: EXPLAIN costs, EXPLAIN errors and result tables keyed by canonical SQL.
    Latency runs report the EXPLAIN cost in milliseconds.
    """

    def __init__(self,
                 costs: Dict[str, float] | None = None,
                 errors: Dict[str, str] | None = None,
                 results: Dict[str, ResultTable] | None = None,
                 default_cost: float = 100.0):
        self.costs = {canonicalize_sql(sql): cost for sql, cost in (costs or {}).items()}
        self.errors = {canonicalize_sql(sql): message for sql, message in (errors or {}).items()}
        self.results = {canonicalize_sql(sql): table for sql, table in (results or {}).items()}
        self.default_cost = default_cost
        self.default_result = ResultTable(columns=('x',), rows=(('1',),))
        self.explained = []
        self.timed = []

    def explain(self, sql, target, budget=None):
        key = canonicalize_sql(sql)
        self.explained.append(key)
        if key in self.errors:
            return ExplainResult.failure(self.errors[key])
        return ExplainResult.success(self.costs.get(key, self.default_cost))

    def run_timed(self, sql, target, repetitions=None, timeout=None, budget=None):
        key = canonicalize_sql(sql)
        self.timed.append(key)
        latency = self.costs.get(key, self.default_cost) / 1000.0
        return LatencyMeasurement(runs=(latency,) * (repetitions or 3), cache_reset_between_runs=False)

    def execute_rows(self, sql, target, timeout=None, budget=None):
        return self.results.get(canonicalize_sql(sql), self.default_result)


@pytest.fixture
def embedder():
    return HashingEmbedder(dim=256)


@pytest.fixture
def stub_targets(tmp_path):
    benchmark = DbTarget(name='bench', engine=EngineKind.SQLITE, path=str(tmp_path / 'bench.db'))
    samples = [DbTarget(name=f'sample{seed}', engine=EngineKind.SQLITE, role=TargetRole.EQUIVALENCE_SAMPLE,
                        path=str(tmp_path / f'sample{seed}.db'), seed=seed)
               for seed in (1, 2)]
    return benchmark, samples


@pytest.fixture
def sqlite_target(tmp_path):
    def make(name: str, seed: int | None = None, role: TargetRole = TargetRole.EQUIVALENCE_SAMPLE) -> DbTarget:
        return DbTarget(name=name, engine=EngineKind.SQLITE, role=role, path=str(tmp_path / f'{name}.db'),
                        seed=seed)

    return make
