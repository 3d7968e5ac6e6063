import argparse
import json
import logging
import signal
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from rewritehub.config import Settings, WorkloadManifest, build_database, build_embedders, build_llm
from rewritehub.corrector import Corrector
from rewritehub.errors import (ConfigError, DatabaseConnectionError, RepositoryFormatError, RewriteHubError)
from rewritehub.evaluator import Evaluator
from rewritehub.models import RewriteOutcome
from rewritehub.orchestrator import Orchestrator
from rewritehub.repository import RuleRepository
from rewritehub.seeding import SeedSpec, build_sample_instances
from rewritehub.utils import setup_logger

__all__ = ['build_parser', 'cmd_rewrite', 'cmd_repo', 'main']

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CONNECTION = 3
EXIT_FORMAT = 4


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f'{value} is not a positive integer')
    return number


def _non_negative_float(value: str) -> float:
    number = float(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f'{value} is not a non-negative number')
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='rewritehub',
                                     description='LLM-driven SQL rewriting with a growing repository of '
                                                 'natural-language rewrite rules.')
    parser.add_argument('--verbose', '-v', action='store_true', help='Log at DEBUG level.')
    commands = parser.add_subparsers(dest='command', required=True)

    rewrite = commands.add_parser('rewrite', help='Rewrite the queries of a workload.')
    rewrite.add_argument('--manifest', type=Path, required=True, help='Workload manifest (TOML).')
    rewrite.add_argument('--config', type=Path, default=None, help='Settings file (TOML).')
    rewrite.add_argument('--mode', choices=['latency', 'explain-cost'], default=None)
    rewrite.add_argument('--llm', choices=['live', 'scripted'], default=None, help='LLM backend.')
    rewrite.add_argument('--transcript', type=Path, default=None, help='Transcript for the scripted backend.')
    rewrite.add_argument('--rounds', type=_positive_int, default=None, help='Maximum number of rounds.')
    rewrite.add_argument('--zero-shot-rounds', type=int, default=None, help='Rounds before hints are used.')
    rewrite.add_argument('--theta', type=float, default=None, help='Minimum speedup for acceptance.')
    rewrite.add_argument('--budget-seconds', type=_non_negative_float, default=None,
                         help='Time budget per query, in seconds.')
    rewrite.add_argument('--budget-money', type=_non_negative_float, default=None,
                         help='Money budget of the whole run.')
    rewrite.add_argument('--repo', type=Path, default=None, help='Repository file, loaded if present and saved '
                                                                  'after the run.')
    rewrite.add_argument('--out-dir', type=Path, default=None, help='Directory for report.json and report.md.')
    rewrite.add_argument('--workers', type=_positive_int, default=None, help='Queries processed in parallel.')

    repo = commands.add_parser('repo', help='Export, import or inspect a rule repository.')
    repo.add_argument('action', choices=['export', 'import', 'inspect'])
    repo.add_argument('path', type=Path, help='File to write (export) or read (import, inspect).')
    repo.add_argument('--repo', type=Path, default=None, help='Working repository (defaults to run.repository).')
    repo.add_argument('--config', type=Path, default=None, help='Settings file (TOML).')
    return parser


def _settings(args: argparse.Namespace) -> Settings:
    settings = Settings.load(args.config)
    overrides = {'run.repository': args.repo}
    if args.command == 'rewrite':
        overrides.update({
            'run.mode': args.mode,
            'llm.backend': args.llm,
            'llm.transcript': args.transcript,
            'run.max_total_rounds': args.rounds,
            'run.zero_shot_rounds': args.zero_shot_rounds,
            'run.theta': args.theta,
            'run.per_query_seconds': args.budget_seconds,
            'run.global_money': args.budget_money,
            'run.out_dir': args.out_dir,
            'run.workers': args.workers,
        })
    return settings.with_overrides(overrides)


def _write_rewrites(manifest: WorkloadManifest, outcomes: Sequence[RewriteOutcome]) -> List[Path]:
    paths = {entry.id: entry.path for entry in manifest.queries}
    written = []
    for outcome in outcomes:
        if not outcome.accepted:
            continue
        source = paths[outcome.query.id]
        target = source.with_name(f'{outcome.query.id}.rewritten.sql')
        target.write_text(outcome.rewrite.sql.rstrip() + '\n', encoding='utf-8')
        written.append(target)
    return written


def cmd_rewrite(args: argparse.Namespace) -> int:
    """
    Load the workload, seed the sample instances, run the rewrite loop and write the report, the accepted rewrites
    and the repository.
    """
    manifest = WorkloadManifest.load(args.manifest)
    settings = _settings(args)
    if settings.database is None:
        raise ConfigError('The settings have no [database] section.')
    queries = manifest.load_queries()

    llm = build_llm(settings.llm)
    rule_embedder, query_embedder = build_embedders(settings.embedding)
    database, benchmark, samples = build_database(settings.database)
    database.check_connection(benchmark)
    if settings.database.seed_samples:
        if manifest.seed_spec is None:
            raise ConfigError(f'Manifest {manifest.source}: seed_samples is on but no seed_spec is given.')
        build_sample_instances(SeedSpec.load(manifest.seed_spec), manifest.schema_ddl(), samples, database,
                               empty_last=settings.database.empty_last_sample)
    for sample in samples:
        database.check_connection(sample)

    repository_path = settings.run.repository
    if repository_path is not None and repository_path.is_file():
        repository = RuleRepository.load(repository_path, rule_embedder, llm, settings.run.k_candidates,
                                          query_dim=query_embedder.dim)
    else:
        repository = RuleRepository(rule_embedder, llm, settings.run.k_candidates, query_dim=query_embedder.dim)

    config = settings.run.to_run_config()
    corrector = Corrector(llm, database, benchmark, max_iterations=config.max_iterations,
                          context_limit_tokens=settings.llm.context_limit_tokens)
    evaluator = Evaluator(database, benchmark, samples,
                          theta=config.theta,
                          repetitions=settings.database.repetitions,
                          timeout_multiplier=settings.database.timeout_multiplier,
                          timeout_cap=settings.database.timeout_cap,
                          sample_timeout=settings.database.sample_timeout)
    orchestrator = Orchestrator(llm, repository, corrector, evaluator, query_embedder, config)

    previous_handler = signal.getsignal(signal.SIGTERM)
    signal.signal(signal.SIGTERM, lambda signum, frame: orchestrator.stop())
    try:
        outcomes, report = orchestrator.rewrite_workload(queries)
    finally:
        signal.signal(signal.SIGTERM, previous_handler)

    report.write(settings.run.out_dir)
    for path in _write_rewrites(manifest, outcomes):
        logger.debug(f'Rewrite written to {path}.')
    if repository_path is not None:
        repository.export(repository_path)
    print(f'{len(report.accepted)} of {len(outcomes)} queries accepted ({report.termination}); '
          f'report in {settings.run.out_dir}.')
    return EXIT_OK


def _print_inspect(repository: RuleRepository) -> None:
    stats = repository.stats()
    print(f'{stats["rules"]} rules in {stats["groups"]} groups, {stats["parked"]} parked, '
          f'{stats["query_records"]} solved queries.')
    for group in stats['group_details']:
        print(f'{group["group_id"]}  benefit {group["benefit"]:.3f}  size {group["size"]}  '
              f'{group["representative"]}')


def cmd_repo(args: argparse.Namespace) -> int:
    """
    `export` writes the working repository to `path`, `import` merges `path` into the working repository and saves
    it, `inspect` prints the groups of `path` sorted by benefit.
    """
    settings = _settings(args)
    rule_embedder, query_embedder = build_embedders(settings.embedding)
    if args.action == 'inspect':
        _print_inspect(RuleRepository.load(args.path, rule_embedder, query_dim=query_embedder.dim))
        return EXIT_OK

    working = settings.run.repository
    if working is None:
        raise ConfigError('No working repository: pass --repo or set run.repository.')
    if args.action == 'export':
        if not working.is_file():
            raise ConfigError(f'Repository {working} does not exist.')
        RuleRepository.load(working, rule_embedder, query_dim=query_embedder.dim).export(args.path)
        return EXIT_OK

    if working.is_file():
        repository = RuleRepository.load(working, rule_embedder, k_candidates=settings.run.k_candidates,
                                          query_dim=query_embedder.dim)
    else:
        repository = RuleRepository(rule_embedder, k_candidates=settings.run.k_candidates,
                                    query_dim=query_embedder.dim)
    if not repository.is_empty():
        repository.llm = build_llm(settings.llm)
    summary = repository.merge(args.path)
    repository.export(working)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        setup_logger('rewritehub', logging.DEBUG)
    handler = cmd_rewrite if args.command == 'rewrite' else cmd_repo
    try:
        return handler(args)
    except ConfigError as e:
        logger.error(f'Configuration error: {e}')
        return EXIT_CONFIG
    except DatabaseConnectionError as e:
        logger.error(f'Connection error: {e}')
        return EXIT_CONNECTION
    except RepositoryFormatError as e:
        logger.error(f'Malformed repository: {e}')
        return EXIT_FORMAT
    except RewriteHubError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
