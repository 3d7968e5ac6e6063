import datetime
import json
import logging
import tomllib
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from rewritehub.database import DatabaseGateway, DbTarget, TargetRole
from rewritehub.errors import ConfigError, PreconditionError
from rewritehub.utils import validation_message

__all__ = [
    'ColumnSpec',
    'TableSpec',
    'SeedSpec',
    'generate_rows',
    'build_instance',
    'build_sample_instances',
]

logger = logging.getLogger(__name__)

DEFAULT_DATE_RANGE = ('2000-01-01', '2004-12-31')


class ColumnSpec(BaseModel):
    """
    Value domain of one generated column. `distinct` bounds the number of different values drawn, which produces
    duplicates (e.g. duplicate join keys) once the table has more rows than that.
    """
    name: str
    type: Literal['int', 'float', 'text', 'date'] = 'int'
    min: Optional[Union[float, str]] = None
    max: Optional[Union[float, str]] = None
    choices: Optional[List[Union[int, float, str]]] = None
    distinct: Optional[int] = Field(default=None, ge=1)
    null_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    nullable: bool = True
    unique: bool = False

    @model_validator(mode='after')
    def _check_domain(self):
        if self.unique and self.distinct is not None:
            raise ValueError(f'column {self.name}: unique and distinct exclude each other')
        if self.unique and self.choices:
            raise ValueError(f'column {self.name}: unique columns cannot draw from choices')
        if self.choices is not None and not self.choices:
            raise ValueError(f'column {self.name}: choices must not be empty')
        return self


class TableSpec(BaseModel):
    name: str
    rows: int = Field(ge=0)
    columns: List[ColumnSpec] = Field(min_length=1)


class SeedSpec(BaseModel):
    tables: List[TableSpec] = Field(min_length=1)

    @staticmethod
    def load(path: Path) -> 'SeedSpec':
        """
        Read a seed spec from TOML or JSON.

        :raises ConfigError: If the file is missing or invalid.
        """
        path = Path(path)
        try:
            text = path.read_text(encoding='utf-8')
            data = json.loads(text) if path.suffix == '.json' else tomllib.loads(text)
            return SeedSpec.model_validate(data)
        except OSError as e:
            raise ConfigError(f'Seed spec {path}: cannot read ({e}).') from e
        except (ValueError, tomllib.TOMLDecodeError) as e:
            # ValidationError is a ValueError
            raise ConfigError(f'Seed spec {path}: {validation_message(e)}') from e


def _numeric_bounds(column: ColumnSpec, default_min: float, default_max: float) -> Tuple[float, float]:
    low = float(column.min) if column.min is not None else default_min
    high = float(column.max) if column.max is not None else default_max
    if high < low:
        raise PreconditionError(f'Column {column.name}: max is below min.')
    return low, high


def _column_values(column: ColumnSpec, rows: int, rng: np.random.Generator) -> List:
    if rows == 0:
        return []
    if column.choices:
        picks = rng.integers(0, len(column.choices), size=rows)
        values = [column.choices[i] for i in picks]
    elif column.type == 'int':
        low, high = _numeric_bounds(column, 0, 1000)
        low, high = int(low), int(high)
        if column.unique:
            span = max(rows, high - low + 1)
            values = [low + int(v) for v in rng.permutation(span)[:rows]]
        elif column.distinct:
            domain = rng.integers(low, high + 1, size=column.distinct)
            values = [int(v) for v in rng.choice(domain, size=rows)]
        else:
            values = [int(v) for v in rng.integers(low, high + 1, size=rows)]
    elif column.type == 'float':
        low, high = _numeric_bounds(column, 0.0, 1000.0)
        if column.unique:
            values = [round(low + (high - low) * (i / max(rows, 1)), 2) + 0.0 for i in rng.permutation(rows)]
        else:
            size = column.distinct or rows
            domain = np.round(rng.uniform(low, high, size=size), 2)
            values = [float(v) for v in (rng.choice(domain, size=rows) if column.distinct else domain)]
    elif column.type == 'text':
        if column.unique:
            values = [f'{column.name}_{int(v)}' for v in rng.permutation(rows)]
        else:
            keys = rng.integers(0, column.distinct or max(rows, 1), size=rows)
            values = [f'{column.name}_{int(v)}' for v in keys]
    else:
        start = datetime.date.fromisoformat(str(column.min or DEFAULT_DATE_RANGE[0]))
        end = datetime.date.fromisoformat(str(column.max or DEFAULT_DATE_RANGE[1]))
        span = (end - start).days + 1
        if span < 1:
            raise PreconditionError(f'Column {column.name}: max is before min.')
        if column.unique:
            offsets = rng.permutation(max(rows, span))[:rows]
        elif column.distinct:
            offsets = rng.choice(rng.integers(0, span, size=column.distinct), size=rows)
        else:
            offsets = rng.integers(0, span, size=rows)
        values = [(start + datetime.timedelta(days=int(v))).isoformat() for v in offsets]

    if column.nullable and not column.unique and column.null_fraction > 0:
        mask = rng.random(rows) < column.null_fraction
        # every nullable column carries at least one NULL once there are two rows
        if rows >= 2 and not mask.any():
            mask[int(rng.integers(0, rows))] = True
        values = [None if null else value for value, null in zip(values, mask)]
    return values


def generate_rows(table: TableSpec, seed: int, empty: bool = False) -> Tuple[List[str], List[tuple]]:
    """
    Rows of one table for one instance seed. Same spec and seed give the same rows in every process.
    """
    rng = np.random.default_rng([seed, *table.name.encode('utf-8')])
    rows = 0 if empty else table.rows
    columns = [column.name for column in table.columns]
    values = [_column_values(column, rows, rng) for column in table.columns]
    return columns, list(zip(*values)) if rows else []


def build_instance(spec: SeedSpec,
                   ddl: str,
                   target: DbTarget,
                   gateway: DatabaseGateway,
                   empty: bool = False) -> Dict[str, int]:
    """
    Materialize one equivalence-sample database: run the schema DDL and insert the generated rows.

    :return: Row count per table.
    :raises PreconditionError: If the target is not a sample target or has no seed.
    """
    if target.role != TargetRole.EQUIVALENCE_SAMPLE:
        raise PreconditionError(f'Target {target.name}: only equivalence-sample targets are seeded.')
    if target.seed is None:
        raise PreconditionError(f'Target {target.name}: a seed is required.')
    tables = {table.name: generate_rows(table, target.seed, empty=empty) for table in spec.tables}
    gateway.load_tables(target, ddl, tables)
    counts = {name: len(rows) for name, (_, rows) in tables.items()}
    logger.info(f'Target {target.name}: seeded with seed {target.seed} '
                f'({", ".join(f"{name}={count}" for name, count in counts.items())}).')
    return counts


def build_sample_instances(spec: SeedSpec,
                           ddl: str,
                           targets: Sequence[DbTarget],
                           gateway: DatabaseGateway,
                           empty_last: bool = True) -> List[DbTarget]:
    """
    Seed every sample target; with `empty_last` the last instance keeps the schema but no rows.
    """
    for position, target in enumerate(targets):
        build_instance(spec, ddl, target, gateway, empty=empty_last and position == len(targets) - 1)
    return list(targets)
