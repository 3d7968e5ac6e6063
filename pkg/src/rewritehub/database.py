import datetime
import decimal
import enum
import logging
import os
import re
import shlex
import sqlite3
import subprocess
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from contextlib import closing, suppress
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psycopg2
import psycopg2.errors
import psycopg2.extras
from psycopg2 import sql as pgsql
import sqlglot
from sqlglot import exp
from sqlglot.errors import SqlglotError

from rewritehub.errors import DatabaseConnectionError, PreconditionError, QueryFailed, QueryTimeout
from rewritehub.models import Budget
from rewritehub.types import Row

__all__ = [
    'EngineKind',
    'TargetRole',
    'DbTarget',
    'ExplainResult',
    'LatencyMeasurement',
    'ResultTable',
    'EngineAdapter',
    'PostgresAdapter',
    'SqliteAdapter',
    'DatabaseGateway',
    'NULL_SENTINEL',
    'render_cell',
]

logger = logging.getLogger(__name__)

NULL_SENTINEL = '\\N'

# One timed run at a time across every gateway in the process
_TIMED_LOCK = threading.Lock()


class EngineKind(str, enum.Enum):
    POSTGRES = 'postgres'
    SQLITE = 'sqlite'


class TargetRole(str, enum.Enum):
    BENCHMARK = 'benchmark'
    EQUIVALENCE_SAMPLE = 'equivalence-sample'


@dataclass(frozen=True)
class DbTarget:
    """
    Connection descriptor. Credentials are referenced by environment variable name, never stored.
    """
    name: str
    engine: EngineKind = EngineKind.POSTGRES
    role: TargetRole = TargetRole.BENCHMARK
    host: Optional[str] = None
    port: Optional[int] = None
    dbname: Optional[str] = None
    user: Optional[str] = None
    password_env: Optional[str] = None
    path: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.engine == EngineKind.SQLITE and not self.path:
            raise PreconditionError(f'Target {self.name}: a sqlite target needs a path.')
        if self.engine == EngineKind.POSTGRES and not self.dbname:
            raise PreconditionError(f'Target {self.name}: a postgres target needs a database name.')

    @property
    def location(self) -> str:
        if self.engine == EngineKind.SQLITE:
            return str(self.path)
        return f'{self.host or "localhost"}:{self.port or 5432}/{self.dbname}'

    def same_database(self, other: 'DbTarget') -> bool:
        return self.engine == other.engine and self.location == other.location


@dataclass(frozen=True)
class ExplainResult:
    ok: bool
    total_cost: Optional[float] = None
    error_message: Optional[str] = None

    def __post_init__(self):
        if self.ok != (self.error_message is None):
            raise PreconditionError('ExplainResult: ok must hold exactly when there is no error message.')
        if self.ok and (self.total_cost is None or self.total_cost < 0):
            raise PreconditionError('ExplainResult: a successful explain needs a non-negative total cost.')

    @staticmethod
    def success(total_cost: float) -> 'ExplainResult':
        return ExplainResult(ok=True, total_cost=float(total_cost))

    @staticmethod
    def failure(error_message: str) -> 'ExplainResult':
        return ExplainResult(ok=False, error_message=error_message or 'unknown error')


@dataclass(frozen=True)
class LatencyMeasurement:
    runs: Tuple[float, ...]
    cache_reset_between_runs: bool
    timed_out: bool = False

    def __post_init__(self):
        if not self.runs:
            raise PreconditionError('LatencyMeasurement needs at least one run.')

    @property
    def mean(self) -> float:
        return float(np.mean(self.runs))

    @property
    def stdev(self) -> float:
        return float(np.std(self.runs))


@dataclass(frozen=True)
class ResultTable:
    columns: Tuple[str, ...]
    rows: Tuple[Row, ...] = field(repr=False)

    @property
    def normalized_columns(self) -> Tuple[str, ...]:
        return tuple(column.lower() for column in self.columns)

    def multiset(self) -> Counter:
        return Counter(self.rows)


def render_cell(value) -> str:
    """
    Canonical text form of a result cell. NULL renders as a sentinel distinct from the empty string; floats and
    decimals keep 12 significant digits.
    """
    if value is None:
        return NULL_SENTINEL
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, decimal.Decimal)):
        number = float(value)
        if number == 0:
            return '0'
        if number.is_integer() and abs(number) < 1e15:
            return str(int(number))
        return format(number, '.12g')
    if isinstance(value, (datetime.date, datetime.datetime, datetime.time)):
        return value.isoformat()
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value).hex()
    return str(value)


class EngineAdapter(ABC):
    """
    Dialect-specific bits of database access. Every call works on a connection opened by `connect`.
    """

    def __init__(self, target: DbTarget):
        self.target = target

    @abstractmethod
    def connect(self, create: bool = False):
        """
        :raises DatabaseConnectionError: If the database cannot be reached.
        """
        pass

    @abstractmethod
    def explain(self, connection, sql: str) -> ExplainResult:
        pass

    @abstractmethod
    def execute(self, connection, sql: str, timeout: float | None) -> Tuple[Tuple[str, ...], List[tuple]]:
        """
        :return: Column names and raw rows.
        :raises QueryTimeout: If the statement runs longer than `timeout` seconds.
        """
        pass

    @abstractmethod
    def table_row_counts(self, connection) -> Dict[str, int]:
        pass

    @abstractmethod
    def load_tables(self, connection, ddl: str, tables: Dict[str, Tuple[Sequence[str], List[tuple]]]) -> None:
        """
        Drop the given tables, run the schema DDL and insert the rows.
        """
        pass


class PostgresAdapter(EngineAdapter):

    def connect(self, create: bool = False):
        password = os.environ.get(self.target.password_env) if self.target.password_env else None
        try:
            return psycopg2.connect(host=self.target.host,
                                    port=self.target.port,
                                    dbname=self.target.dbname,
                                    user=self.target.user,
                                    password=password)
        except psycopg2.OperationalError as e:
            raise DatabaseConnectionError(f'Target {self.target.name}: cannot connect to '
                                          f'{self.target.location} ({str(e).strip()}).') from e

    @staticmethod
    def _error_text(error: psycopg2.Error) -> str:
        return (error.pgerror or str(error)).strip()

    def explain(self, connection, sql: str) -> ExplainResult:
        try:
            with connection.cursor() as cursor:
                cursor.execute(f'EXPLAIN (FORMAT JSON) {sql}')
                plan = cursor.fetchone()[0]
            return ExplainResult.success(plan[0]['Plan']['Total Cost'])
        except psycopg2.OperationalError as e:
            if connection.closed:
                raise DatabaseConnectionError(f'Target {self.target.name}: connection lost ({e}).') from e
            return ExplainResult.failure(self._error_text(e))
        except psycopg2.Error as e:
            return ExplainResult.failure(self._error_text(e))
        finally:
            with suppress(psycopg2.Error):
                connection.rollback()

    def execute(self, connection, sql: str, timeout: float | None) -> Tuple[Tuple[str, ...], List[tuple]]:
        try:
            with connection.cursor() as cursor:
                cursor.execute('SET statement_timeout = %s', (int(timeout * 1000) if timeout else 0,))
                cursor.execute(sql)
                columns = tuple(description[0] for description in cursor.description or ())
                rows = cursor.fetchall() if cursor.description else []
            return columns, rows
        except psycopg2.errors.QueryCanceled as e:
            raise QueryTimeout(timeout) from e
        except psycopg2.OperationalError as e:
            if connection.closed:
                raise DatabaseConnectionError(f'Target {self.target.name}: connection lost ({e}).') from e
            raise QueryFailed(self._error_text(e)) from e
        except psycopg2.Error as e:
            raise QueryFailed(self._error_text(e)) from e
        finally:
            with suppress(psycopg2.Error):
                connection.rollback()

    def table_row_counts(self, connection) -> Dict[str, int]:
        counts = {}
        with connection.cursor() as cursor:
            cursor.execute("SELECT table_name FROM information_schema.tables "
                           "WHERE table_schema = 'public' AND table_type = 'BASE TABLE' ORDER BY table_name")
            names = [row[0] for row in cursor.fetchall()]
            for name in names:
                cursor.execute(pgsql.SQL('SELECT count(*) FROM {}').format(pgsql.Identifier(name)))
                counts[name] = cursor.fetchone()[0]
        connection.rollback()
        return counts

    def load_tables(self, connection, ddl: str, tables: Dict[str, Tuple[Sequence[str], List[tuple]]]) -> None:
        with connection.cursor() as cursor:
            for name in tables:
                cursor.execute(pgsql.SQL('DROP TABLE IF EXISTS {} CASCADE').format(pgsql.Identifier(name)))
            cursor.execute(ddl)
            for name, (columns, rows) in tables.items():
                if not rows:
                    continue
                statement = pgsql.SQL('INSERT INTO {} ({}) VALUES %s').format(
                    pgsql.Identifier(name), pgsql.SQL(', ').join(pgsql.Identifier(c) for c in columns))
                psycopg2.extras.execute_values(cursor, statement.as_string(connection), rows)
            cursor.execute('ANALYZE')
        connection.commit()


class SqliteAdapter(EngineAdapter):
    """
    SQLite engine. EXPLAIN QUERY PLAN carries no cost, so the cost is a plan-shape estimate: a full scan weighs the
    scanned table's row count, an index search its logarithm, a temporary b-tree a fixed amount. Loops of one query
    block nest, so an inner loop is charged once per row of the loops outside it.
    """
    PLAN_STEP_RE = re.compile(r'^(SCAN|SEARCH)\s+(?:TABLE\s+)?("[^"]+"|\S+)', re.IGNORECASE)
    SUBQUERY_SCAN_COST = 100.0
    SUBQUERY_SEARCH_COST = 10.0
    TEMP_BTREE_COST = 20.0
    PROGRESS_STEPS = 1000

    def connect(self, create: bool = False):
        path = Path(self.target.path)
        if not create and not path.exists():
            raise DatabaseConnectionError(f'Target {self.target.name}: sqlite file {path} does not exist.')
        try:
            return sqlite3.connect(str(path), check_same_thread=False)
        except sqlite3.Error as e:
            raise DatabaseConnectionError(f'Target {self.target.name}: cannot open {path} ({e}).') from e

    def _row_count(self, connection, table: str, cache: Dict[str, Optional[int]]) -> Optional[int]:
        key = table.strip('"').lower()
        if key not in cache:
            exists = connection.execute("SELECT 1 FROM sqlite_master WHERE type = 'table' AND lower(name) = ?",
                                        (key,)).fetchone()
            cache[key] = connection.execute(f'SELECT count(*) FROM "{key}"').fetchone()[0] if exists else None
        return cache[key]

    def _aliases(self, sql: str) -> Dict[str, str]:
        try:
            tree = sqlglot.parse_one(sql, read='sqlite')
        except SqlglotError as e:
            logger.debug(f'Target {self.target.name}: no aliases for the cost estimate ({e}).')
            return {}
        aliases = {}
        for table in tree.find_all(exp.Table):
            if table.alias:
                aliases.setdefault(table.alias.lower(), table.name.lower())
        return aliases

    def _step_cost(self, connection, detail: str, aliases: Dict[str, str],
                   cache: Dict[str, Optional[int]]) -> Tuple[float, Optional[float]]:
        """
        :return: (cost of one pass of the step, rows it feeds into the next loop level); the fan-out is None for
        steps that are not loops.
        """
        match = self.PLAN_STEP_RE.match(detail)
        if match:
            operation, name = match.group(1).upper(), match.group(2).strip('"').lower()
            if name == 'constant':
                return 1.0, 1.0
            rows = self._row_count(connection, name, cache)
            if rows is None and name in aliases:
                rows = self._row_count(connection, aliases[name], cache)
            if operation == 'SCAN':
                if rows is None:
                    return self.SUBQUERY_SCAN_COST, self.SUBQUERY_SCAN_COST
                return float(rows + 1), float(max(rows, 1))
            return (float(np.log2(rows + 2)) if rows is not None else self.SUBQUERY_SEARCH_COST), 1.0
        if 'TEMP B-TREE' in detail.upper():
            return self.TEMP_BTREE_COST, None
        return 1.0, None

    def _block_cost(self, connection, children: Dict[int, List[Tuple[int, str]]], parent: int,
                    aliases: Dict[str, str], cache: Dict[str, Optional[int]]) -> float:
        # Loops of one block nest: each runs once per row of the loops before it
        total, multiplier = 0.0, 1.0
        for step_id, detail in children.get(parent, []):
            cost, fanout = self._step_cost(connection, detail, aliases, cache)
            nested = self._block_cost(connection, children, step_id, aliases, cache)
            if detail.upper().startswith('CORRELATED'):
                nested *= multiplier
            total += (multiplier * cost if fanout is not None else cost) + nested
            if fanout is not None:
                multiplier *= fanout
        return total

    def explain(self, connection, sql: str) -> ExplainResult:
        try:
            steps = connection.execute(f'EXPLAIN QUERY PLAN {sql}').fetchall()
            children: Dict[int, List[Tuple[int, str]]] = {}
            for step_id, parent, _, detail in steps:
                children.setdefault(parent, []).append((step_id, detail))
            cache: Dict[str, Optional[int]] = {}
            return ExplainResult.success(1.0 + self._block_cost(connection, children, 0, self._aliases(sql), cache))
        except sqlite3.Error as e:
            return ExplainResult.failure(str(e))

    def execute(self, connection, sql: str, timeout: float | None) -> Tuple[Tuple[str, ...], List[tuple]]:
        if timeout:
            deadline = time.monotonic() + timeout
            connection.set_progress_handler(lambda: int(time.monotonic() > deadline), self.PROGRESS_STEPS)
        try:
            cursor = connection.execute(sql)
            columns = tuple(description[0] for description in cursor.description or ())
            return columns, cursor.fetchall()
        except sqlite3.Error as e:
            if timeout and 'interrupted' in str(e):
                raise QueryTimeout(timeout) from e
            raise QueryFailed(str(e)) from e
        finally:
            connection.set_progress_handler(None, 0)
            connection.rollback()

    def table_row_counts(self, connection) -> Dict[str, int]:
        names = [row[0] for row in connection.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")]
        return {name: connection.execute(f'SELECT count(*) FROM "{name}"').fetchone()[0] for name in names}

    def load_tables(self, connection, ddl: str, tables: Dict[str, Tuple[Sequence[str], List[tuple]]]) -> None:
        for name in tables:
            connection.execute(f'DROP TABLE IF EXISTS "{name}"')
        connection.executescript(ddl)
        for name, (columns, rows) in tables.items():
            if not rows:
                continue
            column_list = ', '.join(f'"{c}"' for c in columns)
            placeholders = ', '.join('?' for _ in columns)
            connection.executemany(f'INSERT INTO "{name}" ({column_list}) VALUES ({placeholders})', rows)
        connection.commit()


_ADAPTERS = {
    EngineKind.POSTGRES: PostgresAdapter,
    EngineKind.SQLITE: SqliteAdapter,
}


class DatabaseGateway:
    """
    All database interaction of a run: EXPLAIN plans, timed runs with cache hygiene and result materialization.

    Each call opens its own connection, so EXPLAIN and sample-instance executions can run concurrently. Timed runs
    are serialized process-wide.
    """

    def __init__(self,
                 repetitions: int = 3,
                 cache_reset: Callable[[], None] | str | None = None,
                 clock: Callable[[], float] = time.perf_counter):
        """
        :param repetitions: Default number of timed runs per measurement.
        :param cache_reset: Hook run before every timed run: a callable or a shell command.
        :param clock: Wall clock used for timing.
        """
        if repetitions < 1:
            raise PreconditionError('Timed runs need at least one repetition.')
        self.repetitions = repetitions
        self.cache_reset = cache_reset
        self.clock = clock
        self.cache_resets = 0
        self._adapters: Dict[DbTarget, EngineAdapter] = {}
        self._lock = threading.Lock()

    def adapter(self, target: DbTarget) -> EngineAdapter:
        with self._lock:
            if target not in self._adapters:
                self._adapters[target] = _ADAPTERS[target.engine](target)
            return self._adapters[target]

    def reset_cache(self) -> None:
        if self.cache_reset is None:
            return
        self.cache_resets += 1
        if callable(self.cache_reset):
            self.cache_reset()
            return
        try:
            subprocess.run(shlex.split(self.cache_reset), check=True)
        except (OSError, subprocess.CalledProcessError) as e:
            logger.warning(f'Cache reset command "{self.cache_reset}" failed: {e}')

    def check_connection(self, target: DbTarget) -> None:
        """
        :raises DatabaseConnectionError: If the target cannot be reached.
        """
        with closing(self.adapter(target).connect()):
            pass

    def explain(self, sql: str, target: DbTarget, budget: Budget | None = None) -> ExplainResult:
        """
        Plan the statement without executing it.

        :return: ok with the total cost, or not ok with the engine's error text verbatim.
        :raises DatabaseConnectionError: If the target cannot be reached.
        """
        adapter = self.adapter(target)
        start = self.clock()
        with closing(adapter.connect()) as connection:
            result = adapter.explain(connection, sql)
        if budget is not None:
            budget.debit(seconds=self.clock() - start)
        if not result.ok:
            logger.debug(f'Target {target.name}: EXPLAIN failed: {result.error_message}')
        return result

    def run_timed(self,
                  sql: str,
                  target: DbTarget,
                  repetitions: int | None = None,
                  timeout: float | None = None,
                  budget: Budget | None = None) -> LatencyMeasurement:
        """
        Execute the statement `repetitions` times, resetting caches before each run.

        A run exceeding `timeout` is recorded at the timeout value and the measurement is flagged; the remaining runs
        are recorded at the timeout as well without executing.

        :raises DatabaseConnectionError: If the target cannot be reached.
        """
        repetitions = repetitions or self.repetitions
        if repetitions < 1:
            raise PreconditionError('Timed runs need at least one repetition.')
        adapter = self.adapter(target)
        runs: List[float] = []
        timed_out = False
        with _TIMED_LOCK:
            for _ in range(repetitions):
                if timed_out:
                    runs.append(float(timeout))
                    continue
                self.reset_cache()
                with closing(adapter.connect()) as connection:
                    start = self.clock()
                    try:
                        adapter.execute(connection, sql, timeout)
                        elapsed = self.clock() - start
                    except QueryTimeout:
                        elapsed = float(timeout)
                        timed_out = True
                runs.append(elapsed)
                if budget is not None:
                    budget.debit(seconds=elapsed, db_run=True)
        measurement = LatencyMeasurement(runs=tuple(runs),
                                         cache_reset_between_runs=self.cache_reset is not None,
                                         timed_out=timed_out)
        logger.debug(f'Target {target.name}: {repetitions} timed runs, mean {measurement.mean:.4f}s '
                     f'(stdev {measurement.stdev:.4f}s){", timed out" if timed_out else ""}.')
        return measurement

    def execute_rows(self, sql: str, target: DbTarget, timeout: float | None = None,
                     budget: Budget | None = None) -> ResultTable:
        """
        Execute the statement and materialize its result with canonical cell rendering.

        :raises QueryTimeout: If the statement runs longer than `timeout` seconds.
        :raises DatabaseConnectionError: If the target cannot be reached.
        """
        adapter = self.adapter(target)
        start = self.clock()
        try:
            with closing(adapter.connect()) as connection:
                columns, rows = adapter.execute(connection, sql, timeout)
        finally:
            if budget is not None:
                budget.debit(seconds=self.clock() - start, db_run=True)
        return ResultTable(columns=columns, rows=tuple(tuple(render_cell(value) for value in row) for row in rows))

    def table_row_counts(self, target: DbTarget) -> Dict[str, int]:
        adapter = self.adapter(target)
        with closing(adapter.connect()) as connection:
            return adapter.table_row_counts(connection)

    def load_tables(self, target: DbTarget, ddl: str, tables: Dict[str, Tuple[Sequence[str], List[tuple]]]) -> None:
        adapter = self.adapter(target)
        with closing(adapter.connect(create=True)) as connection:
            adapter.load_tables(connection, ddl, tables)
