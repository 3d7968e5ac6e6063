import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

__all__ = [
    'REPORT_VERSION',
    'SPEEDUP_BUCKETS',
    'RunReport',
]

logger = logging.getLogger(__name__)

REPORT_VERSION = 1

SPEEDUP_BUCKETS = (
    ('>10%', 1.1),
    ('>50%', 1.5),
    ('>2x', 2.0),
    ('>10x', 10.0),
    ('>100x', 100.0),
)


@dataclass
class RunReport:
    """
    Everything a run produced, in a form that serializes deterministically: no timestamps, sorted keys.

    `outcomes` holds one entry per workload query (accepted rewrite or fallback to the original), `failures` the
    last diagnosis of every query left without an accepted rewrite.
    """
    outcomes: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)
    rounds: List[dict] = field(default_factory=list)
    usage: dict = field(default_factory=dict)
    repository: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    termination: str = 'completed'
    truncated: bool = False
    truncation_reason: Optional[str] = None

    @property
    def accepted(self) -> List[dict]:
        return [outcome for outcome in self.outcomes if outcome['accepted']]

    def speedup_buckets(self) -> Dict[str, int]:
        speedups = [outcome['speedup'] for outcome in self.outcomes]
        return {label: sum(1 for s in speedups if s > threshold) for label, threshold in SPEEDUP_BUCKETS}

    def to_dict(self) -> dict:
        return {
            'report_version': REPORT_VERSION,
            'termination': self.termination,
            'truncated': self.truncated,
            'truncation_reason': self.truncation_reason,
            'config': self.config,
            'outcomes': self.outcomes,
            'failures': self.failures,
            'rounds': self.rounds,
            'usage': self.usage,
            'repository': self.repository,
            'speedup_buckets': self.speedup_buckets(),
            'query_count': len(self.outcomes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    def to_markdown(self) -> str:
        total = len(self.outcomes)
        buckets = self.speedup_buckets()
        lines = ['# Rewrite report', '']
        status = f'Termination: {self.termination}'
        if self.truncated:
            status += f' (truncated: {self.truncation_reason})'
        lines += [status, '', f'{len(self.accepted)} of {total} queries accepted.', '']

        lines += ['## Speedup', '']
        lines.append('| ' + ' | '.join(label for label, _ in SPEEDUP_BUCKETS) + ' |')
        lines.append('|' + '---|' * len(SPEEDUP_BUCKETS))
        cells = []
        for label, _ in SPEEDUP_BUCKETS:
            share = 100.0 * buckets[label] / total if total else 0.0
            cells.append(f'{buckets[label]} ({share:.1f}%)')
        lines += ['| ' + ' | '.join(cells) + ' |', '']

        lines += ['## Queries', '', '| Query | Status | Speedup | Rules | Diagnosis |', '|---|---|---|---|---|']
        diagnoses = {failure['query_id']: failure['diagnosis'] for failure in self.failures}
        for outcome in self.outcomes:
            status = 'accepted' if outcome['accepted'] else 'original'
            lines.append(f'| {outcome["query_id"]} | {status} | {outcome["speedup"]:.2f}x | '
                         f'{len(outcome["rules"])} | {diagnoses.get(outcome["query_id"], "")} |')
        lines.append('')

        rules = [(outcome['query_id'], rule) for outcome in self.accepted for rule in outcome['rules']]
        if rules:
            lines += ['## Rules applied', '']
            lines += [f'- {query_id}: {rule}' for query_id, rule in rules]
            lines.append('')

        usage = self.usage.get('totals', {})
        repository = self.repository.get('after', {})
        lines += ['## Usage', '',
                  f'- LLM calls: {usage.get("calls", 0)}',
                  f'- Tokens: {usage.get("tokens_in", 0)} in, {usage.get("tokens_out", 0)} out',
                  f'- Cost: {usage.get("cost", 0.0):.4f}',
                  f'- Repository: {repository.get("rules", 0)} rules in {repository.get("groups", 0)} groups',
                  '']
        return '\n'.join(lines)

    def write(self, out_dir: Path) -> List[Path]:
        """
        Write report.json and report.md into `out_dir`.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, markdown_path = out_dir / 'report.json', out_dir / 'report.md'
        json_path.write_text(self.to_json(), encoding='utf-8')
        markdown_path.write_text(self.to_markdown(), encoding='utf-8')
        logger.info(f'Report written to {json_path} and {markdown_path}.')
        return [json_path, markdown_path]
