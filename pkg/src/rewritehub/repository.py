import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from rewritehub.embedding import EmbeddingProvider, EmbeddingVector, VectorIndex, embed
from rewritehub.errors import (BudgetExhausted, ConfigError, PreconditionError, RepositoryFormatError,
                               TransportError, UnknownRule)
from rewritehub.llm import LlmGateway
from rewritehub.models import Budget
from rewritehub.prompts import TemplateId, parse_group_selection, render
from rewritehub.sql_utils import normalize_text
from rewritehub.utils import geometric_mean

__all__ = [
    'RuleEntry',
    'RuleGroup',
    'QueryRecord',
    'Hint',
    'RuleRepository',
    'neighbor_weights',
]

logger = logging.getLogger(__name__)

ZERO_DISTANCE = 1e-12


@dataclass
class RuleEntry:
    rule_id: str
    description: str
    condition: Optional[str]
    source_query_id: Optional[str]
    group_id: Optional[str]
    observed_speedups: List[float] = field(default_factory=list)
    embedding: Optional[EmbeddingVector] = field(default=None, repr=False)

    @property
    def parked(self) -> bool:
        return self.group_id is None


@dataclass
class RuleGroup:
    group_id: str
    representative: str
    members: List[str]
    benefit: float = 1.0


@dataclass
class QueryRecord:
    query_id: str
    embedding: EmbeddingVector
    rules: List[str]


@dataclass(frozen=True)
class Hint:
    rule_id: str
    description: str
    group_id: str
    score: float


def neighbor_weights(distances: Sequence[float]) -> List[float]:
    """
    Inverse-distance weights normalized to sum to 1. Neighbors at distance zero take the whole weight mass, split
    evenly between them.
    """
    if not distances:
        return []
    zero = [d <= ZERO_DISTANCE for d in distances]
    if any(zero):
        share = 1.0 / sum(zero)
        return [share if z else 0.0 for z in zero]
    inverse = [1.0 / d for d in distances]
    total = math.fsum(inverse)
    return [value / total for value in inverse]


class RuleRepository:
    """
    The rule knowledge base: rules, their semantic groups with pooled benefit, and the solved queries that link
    rules to query embeddings.

    Grouping proposes up to `k_candidates` nearest groups (one rule per group) and lets the LLM pick the group the
    new rule is strictly the same as; a rule the LLM cannot place because of an LLM failure is parked and retried
    by `regroup_parked`. Writes are serialized by one lock; the LLM call of `add_rule` runs outside it.
    """

    def __init__(self,
                 embedder: EmbeddingProvider,
                 llm: LlmGateway | None = None,
                 k_candidates: int = 4,
                 query_dim: int | None = None):
        """
        :param embedder: Provider used to embed rule descriptions.
        :param llm: Gateway used for group arbitration. Without it every non-duplicate rule opens a new group.
        :param k_candidates: Number of candidate groups proposed to the LLM.
        :param query_dim: Dimension of the query embedder; None lets the first query record fix it.
        """
        self.embedder = embedder
        self.llm = llm
        self.k_candidates = k_candidates
        self.rules: Dict[str, RuleEntry] = {}
        self.groups: Dict[str, RuleGroup] = {}
        self.query_records: Dict[str, QueryRecord] = {}
        self._rule_index = VectorIndex(embedder.dim)
        self._query_index = VectorIndex(query_dim)
        self._by_text: Dict[str, str] = {}
        self._lock = threading.RLock()
        self._next_rule = 1
        self._next_group = 1

    # --- Lookup -------------------------------------------------------------------------------------------------

    def find_rule(self, description: str) -> Optional[RuleEntry]:
        """
        Rule with the same normalized description, if any.
        """
        rule_id = self._by_text.get(normalize_text(description))
        return self.rules.get(rule_id) if rule_id else None

    def is_empty(self) -> bool:
        return not self.rules

    def parked_rules(self) -> List[RuleEntry]:
        with self._lock:
            return [rule for rule in self.rules.values() if rule.parked]

    def group_of(self, rule_id: str) -> Optional[RuleGroup]:
        rule = self.rules.get(rule_id)
        if rule is None:
            raise UnknownRule(rule_id)
        return self.groups.get(rule.group_id) if rule.group_id else None

    # --- Grouping -----------------------------------------------------------------------------------------------

    def _new_rule_id(self) -> str:
        rule_id = f'r{self._next_rule:04d}'
        self._next_rule += 1
        return rule_id

    def _new_group_id(self) -> str:
        group_id = f'g{self._next_group:04d}'
        self._next_group += 1
        return group_id

    def _candidate_groups(self, vector: EmbeddingVector, allowed: Optional[set] = None) -> List[Tuple[str, str]]:
        """
        Nearest groups as (group_id, representative description), one per group.
        """
        candidates = []
        for rule_id, _ in self._rule_index.knn(vector, k=max(1, len(self._rule_index)), dedup=True):
            group_id = self.rules[rule_id].group_id
            if group_id is None or (allowed is not None and group_id not in allowed):
                continue
            representative = self.rules[self.groups[group_id].representative]
            candidates.append((group_id, representative.description))
            if len(candidates) == self.k_candidates:
                break
        return candidates

    def predict_group(self,
                      rule: str,
                      candidates: Sequence[Tuple[str, str]],
                      budget: Budget | None = None) -> Optional[str]:
        """
        Ask the LLM which candidate group the rule is strictly the same as.

        :param rule: Description of the new rule.
        :param candidates: (group_id, representative description) pairs from distinct groups.
        :param budget: Budget debited for the call.
        :return: The chosen group id, or None for a new group ("Unseen rule" or an unmatched reply).
        :raises PreconditionError: If there are no candidates, more than `k_candidates`, or duplicated groups.
        :raises TransportError: If the LLM call fails after retries.
        """
        if not candidates or len(candidates) > self.k_candidates:
            raise PreconditionError(f'Group prediction needs 1..{self.k_candidates} candidates, got {len(candidates)}.')
        if len({group_id for group_id, _ in candidates}) != len(candidates):
            raise PreconditionError('Group prediction candidates must come from distinct groups.')
        if self.llm is None:
            return None

        descriptions = [description for _, description in candidates]
        conversation = render(TemplateId.GROUP_PREDICT, {'rule': rule, 'candidates': descriptions})
        reply, _ = self.llm.complete(conversation, budget=budget, subject='Grouping')
        index = parse_group_selection(reply, descriptions)
        if index is None:
            logger.debug(f'Rule "{rule}": no equivalent group among {len(candidates)} candidates.')
            return None
        return candidates[index][0]

    def _arbitrate(self, description: str, vector: EmbeddingVector, budget: Budget | None,
                   allowed: Optional[set] = None) -> Tuple[bool, Optional[str]]:
        """
        :return: (placed, group_id). `placed` is False when the LLM failed and the rule must be parked;
        group_id None with placed=True means a new group.
        """
        with self._lock:
            candidates = self._candidate_groups(vector, allowed)
        if not candidates:
            return True, None
        try:
            return True, self.predict_group(description, candidates, budget)
        except (TransportError, BudgetExhausted, PreconditionError) as e:
            logger.warning(f'Rule "{description}": group prediction failed ({e}), parking it for the next round.')
            return False, None

    def _attach(self, rule: RuleEntry, group_id: Optional[str]) -> str:
        if group_id is None:
            group_id = self._new_group_id()
            self.groups[group_id] = RuleGroup(group_id=group_id, representative=rule.rule_id, members=[])
        group = self.groups[group_id]
        group.members.append(rule.rule_id)
        rule.group_id = group_id
        self._rule_index.set_dedup_key(rule.rule_id, group_id)
        self._recompute_benefit(group)
        return group_id

    def _recompute_benefit(self, group: RuleGroup) -> float:
        observations = [s for member in group.members for s in self.rules[member].observed_speedups]
        group.benefit = geometric_mean(observations) if observations else 1.0
        return group.benefit

    def _observe_known(self, description: str, condition: str | None,
                       speedup: float) -> Optional[Tuple[str, Optional[str]]]:
        existing = self.find_rule(description)
        if existing is None:
            return None
        self.update_benefit(existing.rule_id, speedup)
        if existing.condition is None and condition:
            existing.condition = condition
        return existing.rule_id, existing.group_id

    def add_rule(self,
                 description: str,
                 condition: str | None,
                 source_query_id: str | None,
                 speedup: float,
                 budget: Budget | None = None) -> Tuple[str, Optional[str]]:
        """
        Store a rule that took part in an equivalent rewrite and place it in a group.

        A rule whose normalized description is already stored is the same rule: it only gains the observation.
        Otherwise the rule is embedded, the nearest groups are proposed to the LLM and the rule joins the chosen
        group or opens a new one. If the LLM call fails the rule is stored parked (no group).

        :return: (rule_id, group_id); group_id is None for a parked rule.
        :raises PreconditionError: If the description is empty or the speedup is not positive.
        :raises ProviderError: If the rule cannot be embedded.
        """
        description = (description or '').strip()
        if not description:
            raise PreconditionError('Rule description is empty.')
        if not speedup > 0:
            raise PreconditionError(f'Rule "{description}": speedup must be positive, got {speedup}.')

        with self._lock:
            known = self._observe_known(description, condition, speedup)
            if known is not None:
                return known

        vector = embed(description, self.embedder)
        placed, group_id = self._arbitrate(description, vector, budget)

        with self._lock:
            # Another writer may have stored the same rule while the LLM was deciding
            known = self._observe_known(description, condition, speedup)
            if known is not None:
                return known
            rule = RuleEntry(rule_id=self._new_rule_id(),
                        description=description,
                        condition=condition,
                        source_query_id=source_query_id,
                        group_id=None,
                        observed_speedups=[float(speedup)],
                        embedding=vector)
            self._rule_index.add(rule.rule_id, vector, None)
            self.rules[rule.rule_id] = rule
            self._by_text[normalize_text(description)] = rule.rule_id
            if placed:
                group_id = self._attach(rule, group_id)
                logger.info(f'Rule {rule.rule_id}: "{description}" -> group {group_id} '
                            f'(benefit {self.groups[group_id].benefit:.3f}).')
                return rule.rule_id, group_id
            return rule.rule_id, None

    def regroup_parked(self, budget: Budget | None = None) -> int:
        """
        Retry group prediction for parked rules.

        :return: Number of rules that found a group.
        """
        placed_count = 0
        with self._lock:
            for rule in [rule for rule in self.rules.values() if rule.parked]:
                placed, group_id = self._arbitrate(rule.description, rule.embedding, budget)
                if not placed:
                    continue
                group_id = self._attach(rule, group_id)
                placed_count += 1
                logger.info(f'Rule {rule.rule_id}: unparked into group {group_id}.')
        return placed_count

    def update_benefit(self, rule_id: str, speedup: float) -> Optional[float]:
        """
        Record one more speedup observation for a rule and recompute its group's benefit.

        :return: The group's new benefit; None while the rule is parked.
        :raises UnknownRule: If the rule does not exist.
        :raises PreconditionError: If the speedup is not positive.
        """
        if not speedup > 0:
            raise PreconditionError(f'Rule {rule_id}: speedup must be positive, got {speedup}.')
        with self._lock:
            rule = self.rules.get(rule_id)
            if rule is None:
                raise UnknownRule(rule_id)
            rule.observed_speedups.append(float(speedup))
            if rule.group_id is None:
                return None
            return self._recompute_benefit(self.groups[rule.group_id])

    # --- Query records and hint selection -----------------------------------------------------------------------

    def record_query(self, query_id: str, embedding: EmbeddingVector, rule_ids: Iterable[str]) -> QueryRecord:
        """
        Link a solved query to the rules of its accepted rewrite. Re-recording a query adds new rule links.
        """
        rule_ids = list(rule_ids)
        with self._lock:
            for rule_id in rule_ids:
                if rule_id not in self.rules:
                    raise UnknownRule(rule_id)
            record = self.query_records.get(query_id)
            if record is None:
                record = QueryRecord(query_id=query_id, embedding=embedding, rules=[])
                self.query_records[query_id] = record
                self._query_index.add(query_id, embedding)
            for rule_id in rule_ids:
                if rule_id not in record.rules:
                    record.rules.append(rule_id)
            return record

    def select_hints(self, embedding: EmbeddingVector, k_neighbors: int = 5, k_groups: int = 3) -> List[Hint]:
        """
        Pick rule hints for a query from its most similar solved queries.

        Each neighbor i gets an inverse-distance weight w_i; a group scores sum_i w_i * [neighbor i used the
        group] * benefit(group). The top `k_groups` groups each contribute one rule: the one linked to the most
        similar neighbor that used the group. Parked rules never become hints.

        :return: Hints ordered by descending score; empty when no solved query is recorded.
        """
        with self._lock:
            neighbors = self._query_index.knn(embedding, k=k_neighbors) if len(self._query_index) else []
            if not neighbors:
                return []
            weights = neighbor_weights([distance for _, distance in neighbors])

            scores: Dict[str, float] = {}
            chosen: Dict[str, str] = {}
            for (query_id, _), weight in zip(neighbors, weights):
                seen_here = set()
                for rule_id in self.query_records[query_id].rules:
                    group_id = self.rules[rule_id].group_id
                    if group_id is None or group_id in seen_here:
                        continue
                    seen_here.add(group_id)
                    scores[group_id] = scores.get(group_id, 0.0) + weight * self.groups[group_id].benefit
                    chosen.setdefault(group_id, rule_id)

            first_seen = {group_id: position for position, group_id in enumerate(chosen)}
            ranked = sorted(scores, key=lambda group_id: (-scores[group_id], first_seen[group_id]))[:k_groups]
            return [Hint(rule_id=chosen[group_id],
                         description=self.rules[chosen[group_id]].description,
                         group_id=group_id,
                         score=scores[group_id])
                    for group_id in ranked]

    # --- Statistics ---------------------------------------------------------------------------------------------

    def stats(self) -> dict:
        """
        Summary used by the run report and `repo inspect`: counts plus groups sorted by descending benefit.
        """
        with self._lock:
            groups = sorted(self.groups.values(), key=lambda group: (-group.benefit, group.group_id))
            return {
                'rules': len(self.rules),
                'groups': len(self.groups),
                'parked': sum(1 for rule in self.rules.values() if rule.parked),
                'query_records': len(self.query_records),
                'observations': sum(len(rule.observed_speedups) for rule in self.rules.values()),
                'group_details': [
                    {
                        'group_id': group.group_id,
                        'representative': self.rules[group.representative].description,
                        'size': len(group.members),
                        'benefit': round(group.benefit, 6),
                    }
                    for group in groups
                ],
            }

    # --- Persistence --------------------------------------------------------------------------------------------

    def export(self, path: Path) -> None:
        """
        Write the repository as line-delimited JSON: rule, group and query_record records, embeddings inline.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            lines = []
            for rule in self.rules.values():
                lines.append({
                    'kind': 'rule',
                    'rule_id': rule.rule_id,
                    'description': rule.description,
                    'condition': rule.condition,
                    'source_query_id': rule.source_query_id,
                    'group_id': rule.group_id,
                    'observed_speedups': rule.observed_speedups,
                    'embedding': list(rule.embedding.values),
                })
            for group in self.groups.values():
                lines.append({
                    'kind': 'group',
                    'group_id': group.group_id,
                    'representative': group.representative,
                    'members': group.members,
                    'benefit': group.benefit,
                })
            for record in self.query_records.values():
                lines.append({
                    'kind': 'query_record',
                    'query_id': record.query_id,
                    'embedding': list(record.embedding.values),
                    'rules': record.rules,
                })
        path.write_text(''.join(json.dumps(line, sort_keys=True) + '\n' for line in lines), encoding='utf-8')
        logger.info(f'Repository: exported {len(self.rules)} rules in {len(self.groups)} groups to {path}.')

    @staticmethod
    def _read_records(path: Path) -> Tuple[List[Tuple[int, dict]], List[Tuple[int, dict]], List[Tuple[int, dict]]]:
        path = Path(path)
        rules, groups, records = [], [], []
        try:
            text = path.read_text(encoding='utf-8')
        except OSError as e:
            raise RepositoryFormatError(path, 0, f'cannot read file ({e})') from e
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except ValueError as e:
                raise RepositoryFormatError(path, number, f'invalid JSON ({e})') from e
            if not isinstance(data, dict):
                raise RepositoryFormatError(path, number, 'record is not an object')
            kind = data.get('kind')
            required = {
                'rule': ('rule_id', 'description', 'group_id', 'observed_speedups', 'embedding'),
                'group': ('group_id', 'representative', 'members'),
                'query_record': ('query_id', 'embedding', 'rules'),
            }.get(kind)
            if required is None:
                raise RepositoryFormatError(path, number, f'unknown record kind {kind!r}')
            missing = [key for key in required if key not in data]
            if missing:
                raise RepositoryFormatError(path, number, f'{kind} record lacks {", ".join(missing)}')
            {'rule': rules, 'group': groups, 'query_record': records}[kind].append((number, data))
        return rules, groups, records

    def _load_verbatim(self, path: Path) -> None:
        rule_lines, group_lines, record_lines = self._read_records(path)
        for number, data in rule_lines:
            try:
                rule = RuleEntry(rule_id=data['rule_id'],
                            description=data['description'],
                            condition=data.get('condition'),
                            source_query_id=data.get('source_query_id'),
                            group_id=data['group_id'],
                            observed_speedups=[float(s) for s in data['observed_speedups']],
                            embedding=EmbeddingVector.of(data['embedding']))
                if any(s <= 0 for s in rule.observed_speedups):
                    raise ValueError('non-positive speedup observation')
                if rule.embedding.dim != self.embedder.dim:
                    raise ConfigError(f'Repository {path} line {number}: rule embedding has dimension '
                                      f'{rule.embedding.dim}, the rule embedder produces {self.embedder.dim}.')
                self.rules[rule.rule_id] = rule
                self._by_text[normalize_text(rule.description)] = rule.rule_id
                self._rule_index.add(rule.rule_id, rule.embedding, rule.group_id)
            except (ValueError, TypeError, PreconditionError) as e:
                raise RepositoryFormatError(path, number, f'bad rule record ({e})') from e
        for number, data in group_lines:
            members = list(data['members'])
            if not members or data['representative'] not in members:
                raise RepositoryFormatError(path, number, 'group has no members or a foreign representative')
            for member in members:
                if member not in self.rules or self.rules[member].group_id != data['group_id']:
                    raise RepositoryFormatError(path, number, f'group member {member} is inconsistent')
            group = RuleGroup(group_id=data['group_id'], representative=data['representative'], members=members)
            self.groups[group.group_id] = group
            self._recompute_benefit(group)
        for rule in self.rules.values():
            if rule.group_id is not None and rule.group_id not in self.groups:
                raise RepositoryFormatError(path, 0, f'rule {rule.rule_id} points to missing group {rule.group_id}')
        for number, data in record_lines:
            try:
                vector = EmbeddingVector.of(data['embedding'])
                if self._query_index.dim is not None and vector.dim != self._query_index.dim:
                    raise ConfigError(f'Repository {path} line {number}: query embedding has dimension '
                                      f'{vector.dim}, the query embedder produces {self._query_index.dim}.')
                self.record_query(data['query_id'], vector, data['rules'])
            except (UnknownRule, PreconditionError, ValueError, TypeError) as e:
                raise RepositoryFormatError(path, number, f'bad query record ({e})') from e
        self._next_rule = 1 + max((_numeric_suffix(rule_id) for rule_id in self.rules), default=0)
        self._next_group = 1 + max((_numeric_suffix(group_id) for group_id in self.groups), default=0)

    @classmethod
    def load(cls, path: Path, embedder: EmbeddingProvider, llm: LlmGateway | None = None,
             k_candidates: int = 4, query_dim: int | None = None) -> 'RuleRepository':
        """
        Read a repository file as-is (same ids, same partition).

        :raises RepositoryFormatError: If a line is malformed or the records are inconsistent.
        :raises ConfigError: If stored embeddings do not match the configured embedder dimensions.
        """
        repository = cls(embedder=embedder, llm=llm, k_candidates=k_candidates, query_dim=query_dim)
        repository._load_verbatim(path)
        logger.info(f'Repository: loaded {len(repository.rules)} rules in {len(repository.groups)} groups '
                    f'from {path}.')
        return repository

    def merge(self, path: Path, budget: Budget | None = None) -> dict:
        """
        Import another repository. Into an empty repository the file is loaded verbatim. Otherwise every imported
        group is arbitrated, by its representative, against the groups that existed before the import, and its
        rules join the chosen group or a new one. Rules with an already-known description merge observations.

        :return: Counts of merged and created groups and of added rules.
        :raises RepositoryFormatError: If the file is malformed.
        """
        with self._lock:
            if self.is_empty():
                self._load_verbatim(path)
                return {'groups_merged': 0, 'groups_created': len(self.groups), 'rules_added': len(self.rules)}

            incoming = RuleRepository(embedder=self.embedder, query_dim=self._query_index.dim)
            incoming._load_verbatim(path)
            local_groups = set(self.groups)
            summary = {'groups_merged': 0, 'groups_created': 0, 'rules_added': 0}
            id_map: Dict[str, str] = {}

            for group in incoming.groups.values():
                representative = incoming.rules[group.representative]
                vector = embed(representative.description, self.embedder)
                placed, target = self._arbitrate(representative.description, vector, budget, allowed=local_groups)
                target = target if placed else None
                summary['groups_merged' if target else 'groups_created'] += 1
                for member in group.members:
                    rule = incoming.rules[member]
                    target = self._merge_rule(rule, target, id_map, summary)

            for rule in incoming.rules.values():
                if rule.parked:
                    self._merge_rule(rule, None, id_map, summary, parked=True)

            for record in incoming.query_records.values():
                self.record_query(record.query_id, record.embedding, [id_map[r] for r in record.rules if r in id_map])

            logger.info(f'Repository: merged {path}: {summary["groups_merged"]} groups merged, '
                        f'{summary["groups_created"]} created, {summary["rules_added"]} rules added.')
            return summary

    def _merge_rule(self, rule: RuleEntry, target: Optional[str], id_map: Dict[str, str], summary: dict,
                    parked: bool = False) -> Optional[str]:
        """
        Bring one imported rule in. Returns the group the next rule of the same imported group should join.
        """
        existing = self.find_rule(rule.description)
        if existing is not None:
            existing.observed_speedups.extend(rule.observed_speedups)
            if existing.group_id is not None:
                self._recompute_benefit(self.groups[existing.group_id])
            id_map[rule.rule_id] = existing.rule_id
            return target if target is not None else existing.group_id

        vector = embed(rule.description, self.embedder)
        local = RuleEntry(rule_id=self._new_rule_id(),
                     description=rule.description,
                     condition=rule.condition,
                     source_query_id=rule.source_query_id,
                     group_id=None,
                     observed_speedups=list(rule.observed_speedups),
                     embedding=vector)
        self._rule_index.add(local.rule_id, vector, None)
        self.rules[local.rule_id] = local
        self._by_text[normalize_text(local.description)] = local.rule_id
        id_map[rule.rule_id] = local.rule_id
        summary['rules_added'] += 1
        if parked:
            return None
        return self._attach(local, target)


def _numeric_suffix(identifier: str) -> int:
    digits = ''.join(ch for ch in identifier if ch.isdigit())
    return int(digits) if digits else 0
