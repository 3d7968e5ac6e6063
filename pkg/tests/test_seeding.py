import pytest

from conftest import EMPLOYEE_DDL
from rewritehub.database import DatabaseGateway, TargetRole
from rewritehub.errors import ConfigError, PreconditionError
from rewritehub.seeding import SeedSpec, TableSpec, build_instance, build_sample_instances, generate_rows

EMPLOYEE_SPEC = {
    'tables': [{
        'name': 'employee',
        'rows': 200,
        'columns': [
            {'name': 'id', 'type': 'int', 'unique': True},
            {'name': 'dept', 'type': 'text', 'choices': ['sales', 'ops', 'research']},
            {'name': 'salary', 'type': 'int', 'min': 1000, 'max': 9000, 'distinct': 20, 'null_fraction': 0.05},
        ],
    }],
}


@pytest.fixture
def spec():
    return SeedSpec.model_validate(EMPLOYEE_SPEC)


def test_same_seed_gives_same_rows(spec):
    table = spec.tables[0]
    assert generate_rows(table, seed=1) == generate_rows(table, seed=1)
    assert generate_rows(table, seed=1) != generate_rows(table, seed=2)


def test_generated_domains(spec):
    columns, rows = generate_rows(spec.tables[0], seed=5)
    assert columns == ['id', 'dept', 'salary']
    assert len(rows) == 200
    ids = [row[0] for row in rows]
    assert len(set(ids)) == 200 and None not in ids
    assert {row[1] for row in rows} <= {'sales', 'ops', 'research', None}
    salaries = [row[2] for row in rows if row[2] is not None]
    assert len(set(salaries)) <= 20
    assert all(1000 <= salary <= 9000 for salary in salaries)


def test_every_nullable_column_has_a_null():
    table = TableSpec.model_validate({'name': 't', 'rows': 2, 'columns': [
        {'name': 'a', 'type': 'float', 'null_fraction': 0.001},
        {'name': 'b', 'type': 'date', 'null_fraction': 0.001},
        {'name': 'c', 'type': 'int', 'nullable': False},
    ]})
    for seed in range(20):
        _, rows = generate_rows(table, seed=seed)
        assert any(row[0] is None for row in rows)
        assert any(row[1] is None for row in rows)
        assert all(row[2] is not None for row in rows)


def test_empty_instance_has_no_rows(spec):
    assert generate_rows(spec.tables[0], seed=1, empty=True) == (['id', 'dept', 'salary'], [])


def test_sample_instances_are_seeded_and_last_is_empty(spec, sqlite_target):
    gateway = DatabaseGateway()
    targets = [sqlite_target('sample1', seed=1), sqlite_target('sample2', seed=2), sqlite_target('sample3', seed=3)]
    build_sample_instances(spec, EMPLOYEE_DDL, targets, gateway)
    assert [gateway.table_row_counts(target)['employee'] for target in targets] == [200, 200, 0]

    first = gateway.execute_rows('select id, dept, salary from employee order by id', targets[0])
    build_instance(spec, EMPLOYEE_DDL, targets[0], gateway)
    assert gateway.execute_rows('select id, dept, salary from employee order by id', targets[0]) == first


def test_only_seeded_sample_targets_are_built(spec, sqlite_target):
    gateway = DatabaseGateway()
    with pytest.raises(PreconditionError):
        build_instance(spec, EMPLOYEE_DDL, sqlite_target('bench', seed=1, role=TargetRole.BENCHMARK), gateway)
    with pytest.raises(PreconditionError):
        build_instance(spec, EMPLOYEE_DDL, sqlite_target('sample'), gateway)


def test_seed_spec_load(tmp_path):
    path = tmp_path / 'seed.toml'
    path.write_text('[[tables]]\nname = "employee"\nrows = 10\n'
                    '[[tables.columns]]\nname = "id"\nunique = true\n', encoding='utf-8')
    assert SeedSpec.load(path).tables[0].columns[0].unique

    path.write_text('[[tables]]\nname = "employee"\nrows = -1\n'
                    '[[tables.columns]]\nname = "id"\n', encoding='utf-8')
    with pytest.raises(ConfigError, match='rows'):
        SeedSpec.load(path)

    path.write_text('[[tables]]\nname = "t"\nrows = 1\n'
                    '[[tables.columns]]\nname = "id"\nunique = true\ndistinct = 3\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        SeedSpec.load(path)

    with pytest.raises(ConfigError):
        SeedSpec.load(tmp_path / 'missing.toml')
