import json

from rewritehub.report import REPORT_VERSION, RunReport


def outcome(query_id, speedup, accepted, rules=()):
    return {'query_id': query_id, 'speedup': speedup, 'accepted': accepted, 'rules': list(rules)}


def sample_report():
    return RunReport(
        outcomes=[outcome('q1', 1.0, False), outcome('q2', 1.2, True, ['Filter early.']),
                  outcome('q3', 3.0, True, ['Use explicit joins.', 'Filter early.']), outcome('q4', 150.0, True)],
        failures=[{'query_id': 'q1', 'diagnosis': 'inequivalent', 'detail': 'row count 3 vs 2', 'round': 2}],
        usage={'totals': {'calls': 7, 'tokens_in': 1200, 'tokens_out': 300, 'cost': 0.054}},
        repository={'after': {'rules': 2, 'groups': 2}},
        termination='converged',
    )


def test_speedup_buckets_count_strictly_above_threshold():
    assert sample_report().speedup_buckets() == {'>10%': 3, '>50%': 2, '>2x': 2, '>10x': 1, '>100x': 1}
    assert RunReport(outcomes=[outcome('q1', 1.1, True)]).speedup_buckets()['>10%'] == 0


def test_json_is_sorted_and_versioned():
    text = sample_report().to_json()
    data = json.loads(text)
    assert data['report_version'] == REPORT_VERSION
    assert data['query_count'] == 4
    assert list(data) == sorted(data)
    assert text == sample_report().to_json()


def test_markdown_summarizes_queries_and_rules():
    markdown = sample_report().to_markdown()
    assert '3 of 4 queries accepted.' in markdown
    assert '| q1 | original | 1.00x | 0 | inequivalent |' in markdown
    assert '| 3 (75.0%) | 2 (50.0%) | 2 (50.0%) | 1 (25.0%) | 1 (25.0%) |' in markdown
    assert '- q3: Use explicit joins.' in markdown
    assert '- LLM calls: 7' in markdown
    assert '- Repository: 2 rules in 2 groups' in markdown


def test_truncation_shows_in_the_status_line():
    report = RunReport(termination='budget', truncated=True, truncation_reason='budget')
    assert 'Termination: budget (truncated: budget)' in report.to_markdown()
    assert '0 of 0 queries accepted.' in report.to_markdown()


def test_write_creates_both_files(tmp_path):
    paths = sample_report().write(tmp_path / 'out')
    assert [path.name for path in paths] == ['report.json', 'report.md']
    assert json.loads(paths[0].read_text(encoding='utf-8'))['termination'] == 'converged'
