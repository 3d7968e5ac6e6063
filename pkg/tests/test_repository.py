import json
import threading

import numpy as np
import pytest

from conftest import record, scripted_gateway
from rewritehub.embedding import EmbeddingVector, HashingEmbedder, euclidean
from rewritehub.errors import ConfigError, PreconditionError, RepositoryFormatError, UnknownRule
from rewritehub.repository import RuleRepository, neighbor_weights
from rewritehub.utils import geometric_mean

JOIN_RULES = [
    'Use explicit join syntax instead of comma-separated tables in the FROM clause.',
    'Replace implicit joins with explicit joins.',
    'Use JOIN instead of WHERE for linking tables.',
    'Use JOIN instead of WHERE for combining tables.',
    'Use explicit join conditions.',
    'Move conditions from WHERE clause to ON clause in JOINs.',
]
OTHER_RULES = [
    'Compute both aggregates in a single pass over the fact table.',
    'Replace the correlated subquery with a pre-aggregated derived table.',
]


def group_reply(rule: str, reply: str):
    return record('GroupPredict', reply, contains=f'{rule}\nPlease select')


class RandomChooser:
    """
    Group arbiter that joins the nearest candidate or opens a new group at random.
    """

    def __init__(self, rng):
        self.rng = rng

    def complete(self, conversation, budget=None, subject=None):
        return ('2' if self.rng.random() < 0.5 else '1. Unseen rule'), None


def test_neighbor_weights():
    assert neighbor_weights([]) == []
    assert neighbor_weights([1.0, 1.0]) == [0.5, 0.5]
    assert neighbor_weights([1.0, 3.0]) == pytest.approx([0.75, 0.25])
    assert neighbor_weights([0.0, 2.0, 0.0]) == [0.5, 0.0, 0.5]


def test_join_rules_collapse_into_one_group(embedder):
    records = [group_reply(rule, JOIN_RULES[0]) for rule in JOIN_RULES[1:]]
    records += [group_reply(rule, '1. Unseen rule') for rule in OTHER_RULES]
    gateway = scripted_gateway(records)
    repository = RuleRepository(embedder, llm=gateway)

    for rule in JOIN_RULES + OTHER_RULES:
        repository.add_rule(rule, None, 'q1', speedup=2.0)

    assert sorted((len(group.members) for group in repository.groups.values()), reverse=True) == [6, 1, 1]
    assert repository.groups['g0001'].representative == 'r0001'
    assert len(gateway.ledger) == len(JOIN_RULES) + len(OTHER_RULES) - 1


def test_duplicate_rule_only_adds_an_observation(embedder):
    gateway = scripted_gateway([])
    repository = RuleRepository(embedder, llm=gateway)
    rule_id, group_id = repository.add_rule('Replace implicit joins with explicit joins.', None, 'q1', speedup=2.0)
    again = repository.add_rule('replace implicit JOINS with explicit joins', 'When several tables are listed.',
                                'q2', speedup=8.0)

    assert again == (rule_id, group_id)
    assert len(gateway.ledger) == 0
    assert repository.rules[rule_id].observed_speedups == [2.0, 8.0]
    assert repository.rules[rule_id].condition == 'When several tables are listed.'
    assert repository.groups[group_id].benefit == pytest.approx(4.0)


def test_add_rule_rejects_bad_input(embedder):
    repository = RuleRepository(embedder)
    with pytest.raises(PreconditionError):
        repository.add_rule('  ', None, 'q1', speedup=2.0)
    with pytest.raises(PreconditionError):
        repository.add_rule('Filter early.', None, 'q1', speedup=0.0)
    with pytest.raises(UnknownRule):
        repository.update_benefit('r0099', 2.0)


def test_predict_group_maps_the_reply_to_a_candidate(embedder):
    gateway = scripted_gateway([group_reply(JOIN_RULES[1], '3'),
                                group_reply(OTHER_RULES[0], '1. Unseen rule')])
    repository = RuleRepository(embedder, llm=gateway)
    candidates = [('g0001', OTHER_RULES[1]), ('g0002', JOIN_RULES[0])]

    assert repository.predict_group(JOIN_RULES[1], candidates) == 'g0002'
    assert repository.predict_group(OTHER_RULES[0], candidates) is None
    with pytest.raises(PreconditionError):
        repository.predict_group(JOIN_RULES[1], [])
    with pytest.raises(PreconditionError):
        repository.predict_group(JOIN_RULES[1], [('g0001', OTHER_RULES[1]), ('g0001', JOIN_RULES[0])])
    assert len(gateway.ledger) == 2


def test_benefit_is_pooled_over_the_group(embedder):
    gateway = scripted_gateway([group_reply(JOIN_RULES[1], JOIN_RULES[0])])
    repository = RuleRepository(embedder, llm=gateway)
    first, group_id = repository.add_rule(JOIN_RULES[0], None, 'q1', speedup=4.0)
    second, same_group = repository.add_rule(JOIN_RULES[1], None, 'q2', speedup=1.0)
    assert same_group == group_id
    assert repository.update_benefit(second, 0.25) == pytest.approx(1.0)


def test_failed_arbitration_parks_the_rule_until_regrouped(embedder):
    repository = RuleRepository(embedder, llm=scripted_gateway([]))
    first, group_id = repository.add_rule(JOIN_RULES[0], None, 'q1', speedup=2.0)
    parked, no_group = repository.add_rule(JOIN_RULES[1], None, 'q2', speedup=3.0)

    assert no_group is None
    assert [rule.rule_id for rule in repository.parked_rules()] == [parked]
    assert repository.update_benefit(parked, 3.0) is None

    query_vector = EmbeddingVector.of([1.0, 0.0])
    repository.record_query('q2', query_vector, [parked])
    assert repository.select_hints(query_vector) == []

    repository.llm = scripted_gateway([group_reply(JOIN_RULES[1], JOIN_RULES[0])])
    assert repository.regroup_parked() == 1
    assert repository.rules[parked].group_id == group_id
    assert repository.groups[group_id].benefit == pytest.approx(geometric_mean([2.0, 3.0, 3.0]))
    assert [hint.rule_id for hint in repository.select_hints(query_vector)] == [parked]


def test_hint_takes_rule_of_the_nearest_neighbor(embedder):
    gateway = scripted_gateway([group_reply(JOIN_RULES[1], JOIN_RULES[0])])
    repository = RuleRepository(embedder, llm=gateway)
    far_rule, group_id = repository.add_rule(JOIN_RULES[0], None, 'q1', speedup=2.0)
    near_rule, _ = repository.add_rule(JOIN_RULES[1], None, 'q2', speedup=2.0)
    repository.record_query('q1', EmbeddingVector.of([3.0, 0.0]), [far_rule])
    repository.record_query('q2', EmbeddingVector.of([1.0, 0.0]), [near_rule])

    hints = repository.select_hints(EmbeddingVector.of([0.0, 0.0]), k_neighbors=2, k_groups=3)
    assert len(hints) == 1
    assert hints[0].rule_id == near_rule
    assert hints[0].group_id == group_id
    assert hints[0].score == pytest.approx(2.0)


def test_hint_scores_match_brute_force_on_random_repositories(embedder):
    rng = np.random.default_rng(3)
    for trial in range(200):
        repository = RuleRepository(embedder, llm=RandomChooser(rng), k_candidates=int(rng.integers(1, 5)))
        rule_ids = [repository.add_rule(f'rewrite rule {trial} variant {index}', None, None,
                                        speedup=float(rng.uniform(0.2, 5.0)))[0]
                    for index in range(int(rng.integers(1, 10)))]
        for rule_id in rule_ids:
            if rng.random() < 0.3:
                repository.update_benefit(rule_id, float(rng.uniform(0.2, 5.0)))

        for index in range(int(rng.integers(1, 10))):
            linked = rng.choice(rule_ids, size=int(rng.integers(1, min(3, len(rule_ids)) + 1)), replace=False)
            repository.record_query(f'q{index}', EmbeddingVector.of(rng.normal(size=8)), [str(r) for r in linked])

        target = EmbeddingVector.of(rng.normal(size=8))
        k_neighbors, k_groups = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        hints = repository.select_hints(target, k_neighbors=k_neighbors, k_groups=k_groups)

        records = sorted(repository.query_records.values(), key=lambda r: euclidean(target, r.embedding))
        neighbors = records[:k_neighbors]
        weights = neighbor_weights([euclidean(target, r.embedding) for r in neighbors])
        expected = {}
        for neighbor, weight in zip(neighbors, weights):
            for group_id in {repository.rules[rule_id].group_id for rule_id in neighbor.rules}:
                expected[group_id] = expected.get(group_id, 0.0) + weight * repository.groups[group_id].benefit

        assert len(hints) == min(k_groups, len(expected))
        scores = [hint.score for hint in hints]
        assert scores == sorted(scores, reverse=True)
        for hint in hints:
            assert hint.score == pytest.approx(expected[hint.group_id], rel=1e-9)
            assert repository.rules[hint.rule_id].group_id == hint.group_id
            first_user = next(n for n in neighbors
                              if any(repository.rules[r].group_id == hint.group_id for r in n.rules))
            assert hint.rule_id in first_user.rules
        if hints:
            chosen = {hint.group_id for hint in hints}
            lowest = min(scores)
            assert all(score <= lowest + 1e-9 for group_id, score in expected.items() if group_id not in chosen)


def test_export_and_load_keep_ids_and_partition(embedder, tmp_path):
    gateway = scripted_gateway([group_reply(JOIN_RULES[1], JOIN_RULES[0]),
                                group_reply(OTHER_RULES[0], '1. Unseen rule')])
    repository = RuleRepository(embedder, llm=gateway)
    first, group_id = repository.add_rule(JOIN_RULES[0], 'When tables are listed in FROM.', 'q1', speedup=2.0)
    repository.add_rule(JOIN_RULES[1], None, 'q2', speedup=8.0)
    other, other_group = repository.add_rule(OTHER_RULES[0], None, 'q3', speedup=1.5)
    repository.record_query('q1', EmbeddingVector.of([0.5, 0.5]), [first, other])

    path = tmp_path / 'nested' / 'repo.jsonl'
    repository.export(path)
    loaded = RuleRepository.load(path, embedder)

    assert loaded.stats() == repository.stats()
    assert loaded.rules[first].condition == 'When tables are listed in FROM.'
    assert loaded.group_of(other).group_id == other_group
    assert loaded.groups[group_id].benefit == pytest.approx(4.0)
    assert loaded.add_rule('Push filters below joins.', None, 'q4', speedup=1.1)[0] == 'r0004'


def test_load_reports_the_bad_line(embedder, tmp_path):
    path = tmp_path / 'repo.jsonl'
    path.write_text('{"kind": "group", "group_id": "g0001", "representative": "r0001", "members": ["r0001"]}\n'
                    'not json\n', encoding='utf-8')
    with pytest.raises(RepositoryFormatError) as error:
        RuleRepository.load(path, embedder)
    assert error.value.line == 2

    path.write_text(json.dumps({'kind': 'rule', 'rule_id': 'r0001'}) + '\n', encoding='utf-8')
    with pytest.raises(RepositoryFormatError, match='lacks'):
        RuleRepository.load(path, embedder)

    path.write_text(json.dumps({'kind': 'group', 'group_id': 'g0001', 'representative': 'r0001',
                                'members': ['r0001']}) + '\n', encoding='utf-8')
    with pytest.raises(RepositoryFormatError, match='inconsistent'):
        RuleRepository.load(path, embedder)


def test_merge_into_empty_repository_is_verbatim(embedder, tmp_path):
    source = RuleRepository(embedder)
    source.add_rule(JOIN_RULES[0], None, 'q1', speedup=2.0)
    source.add_rule(OTHER_RULES[0], None, 'q2', speedup=3.0)
    path = tmp_path / 'repo.jsonl'
    source.export(path)

    target = RuleRepository(embedder)
    summary = target.merge(path)
    assert summary == {'groups_merged': 0, 'groups_created': 2, 'rules_added': 2}
    assert target.stats() == source.stats()


def test_merge_arbitrates_against_local_groups(embedder, tmp_path):
    source = RuleRepository(embedder)
    imported, _ = source.add_rule(JOIN_RULES[1], None, 'q9', speedup=8.0)
    source.add_rule(JOIN_RULES[0], None, 'q8', speedup=4.0)
    source.record_query('q9', EmbeddingVector.of([1.0, 1.0]), [imported])
    path = tmp_path / 'repo.jsonl'
    source.export(path)

    gateway = scripted_gateway([group_reply(JOIN_RULES[1], JOIN_RULES[0]),
                                group_reply(JOIN_RULES[0], '1. Unseen rule')])
    local = RuleRepository(embedder, llm=gateway)
    local_rule, local_group = local.add_rule(JOIN_RULES[0], None, 'q1', speedup=2.0)
    summary = local.merge(path)

    assert summary == {'groups_merged': 1, 'groups_created': 1, 'rules_added': 1}
    assert len(local.groups) == 1
    assert local.groups[local_group].members == [local_rule, 'r0002']
    assert local.rules[local_rule].observed_speedups == [2.0, 4.0]
    assert local.query_records['q9'].rules == ['r0002']


def test_load_rejects_embeddings_of_another_dimension(embedder, tmp_path):
    source = RuleRepository(embedder, query_dim=2)
    rule_id, _ = source.add_rule(JOIN_RULES[0], None, 'q1', speedup=2.0)
    source.record_query('q1', EmbeddingVector.of([1.0, 0.0]), [rule_id])
    path = tmp_path / 'repo.jsonl'
    source.export(path)

    with pytest.raises(ConfigError, match='rule embedding has dimension 256'):
        RuleRepository.load(path, HashingEmbedder(dim=128))
    with pytest.raises(ConfigError, match='query embedding has dimension 2'):
        RuleRepository.load(path, embedder, query_dim=3)
    with pytest.raises(ConfigError):
        RuleRepository(embedder, query_dim=3).merge(path)
    assert len(RuleRepository.load(path, embedder, query_dim=2).query_records) == 1


class ConcurrentWriter:
    """
    Group arbiter that checks the repository lock is free during the call and, the first time, lets another
    thread store the very rule being arbitrated.
    """

    def __init__(self, repository, rule):
        self.repository = repository
        self.rule = rule
        self.lock_free = []

    def complete(self, conversation, budget=None, subject=None):
        nested = bool(self.lock_free)

        def write():
            acquired = self.repository._lock.acquire(timeout=1)
            if acquired:
                self.repository._lock.release()
            self.lock_free.append(acquired)
            if acquired and not nested:
                self.repository.add_rule(self.rule, None, 'q3', speedup=3.0)

        worker = threading.Thread(target=write)
        worker.start()
        worker.join()
        return '1. Unseen rule', None


def test_arbitration_runs_outside_the_lock_and_commit_rechecks(embedder):
    repository = RuleRepository(embedder)
    repository.add_rule(JOIN_RULES[0], None, 'q1', speedup=2.0)
    repository.llm = writer = ConcurrentWriter(repository, JOIN_RULES[1])

    rule_id, group_id = repository.add_rule(JOIN_RULES[1], None, 'q2', speedup=5.0)

    assert writer.lock_free == [True, True]
    assert len(repository.rules) == 2
    assert repository.rules[rule_id].observed_speedups == [3.0, 5.0]
    assert repository.rules[rule_id].group_id == group_id
    assert len(repository._rule_index) == 2
