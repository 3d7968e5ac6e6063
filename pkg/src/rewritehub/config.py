import logging
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rewritehub.database import DatabaseGateway, DbTarget, EngineKind, TargetRole
from rewritehub.embedding import EmbeddingProvider, HashingEmbedder, RemoteEmbedder
from rewritehub.errors import ConfigError
from rewritehub.evaluator import EvaluationMode
from rewritehub.llm import LiveBackend, LlmGateway, ScriptedBackend
from rewritehub.models import Query
from rewritehub.orchestrator import RunConfig
from rewritehub.utils import validation_message

__all__ = [
    'LlmSettings',
    'EmbeddingSettings',
    'TargetSettings',
    'DatabaseSettings',
    'RunSettings',
    'Settings',
    'QueryEntry',
    'WorkloadManifest',
    'build_llm',
    'build_embedders',
    'build_database',
]

logger = logging.getLogger(__name__)


def _read_toml(path: Path, what: str) -> dict:
    try:
        return tomllib.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigError(f'{what} {path}: cannot read ({e.strerror or e}).') from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f'{what} {path}: invalid TOML ({e}).') from e


def _resolve(base: Path, path: Optional[Path]) -> Optional[Path]:
    if path is None or path.is_absolute():
        return path
    return base / path


class LlmSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    backend: Literal['live', 'scripted'] = 'live'
    model: str = 'gpt-4'
    endpoint: str = 'https://api.openai.com/v1/chat/completions'
    api_key_env: str = 'LLM_API_KEY'
    transcript: Optional[Path] = None
    record_transcript: Optional[Path] = None
    rate_in_per_1k: float = Field(default=0.03, ge=0)
    rate_out_per_1k: float = Field(default=0.06, ge=0)
    temperature: Optional[float] = Field(default=None, ge=0, le=2)
    retries: int = Field(default=2, ge=0)
    backoff_seconds: float = Field(default=1.0, ge=0)
    timeout: float = Field(default=120.0, gt=0)
    context_limit_tokens: Optional[int] = Field(default=8000, gt=0)


class EmbeddingSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    provider: Literal['hashing', 'remote'] = 'hashing'
    endpoint: Optional[str] = None
    dim: int = Field(default=256, ge=1)
    rule_model: Optional[str] = 'bert-base-uncased'
    query_model: Optional[str] = 'allenai/longformer-base-4096'

    @model_validator(mode='after')
    def _remote_needs_endpoint(self):
        if self.provider == 'remote' and not self.endpoint:
            raise ValueError('a remote embedding provider needs an endpoint')
        return self


class TargetSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    engine: Literal['postgres', 'sqlite'] = 'postgres'
    host: Optional[str] = None
    port: Optional[int] = None
    dbname: Optional[str] = None
    user: Optional[str] = None
    password_env: Optional[str] = None
    path: Optional[Path] = None

    @model_validator(mode='after')
    def _check_location(self):
        if self.engine == 'sqlite' and self.path is None:
            raise ValueError(f'target {self.name}: sqlite targets need a path')
        if self.engine == 'postgres' and not self.dbname:
            raise ValueError(f'target {self.name}: postgres targets need a dbname')
        return self

    def to_target(self, role: TargetRole, seed: int | None = None) -> DbTarget:
        return DbTarget(name=self.name,
                        engine=EngineKind(self.engine),
                        role=role,
                        host=self.host,
                        port=self.port,
                        dbname=self.dbname,
                        user=self.user,
                        password_env=self.password_env,
                        path=str(self.path) if self.path else None,
                        seed=seed)


class DatabaseSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    benchmark: TargetSettings
    samples: List[TargetSettings] = Field(default_factory=list)
    sample_seeds: List[int] = Field(default_factory=lambda: [1, 2, 3])
    empty_last_sample: bool = True
    seed_samples: bool = True
    cache_reset_command: Optional[str] = None
    repetitions: int = Field(default=3, ge=1)
    timeout_multiplier: float = Field(default=10.0, gt=0)
    timeout_cap: Optional[float] = Field(default=300.0, gt=0)
    sample_timeout: Optional[float] = Field(default=60.0, gt=0)

    @model_validator(mode='after')
    def _check_samples(self):
        if not self.samples:
            raise ValueError('at least one equivalence sample target is required')
        if len(self.samples) != len(self.sample_seeds):
            raise ValueError(f'{len(self.samples)} sample targets but {len(self.sample_seeds)} sample seeds')
        benchmark = self.benchmark.to_target(TargetRole.BENCHMARK)
        for sample in self.samples:
            if sample.to_target(TargetRole.EQUIVALENCE_SAMPLE).same_database(benchmark):
                raise ValueError(f'sample target {sample.name} is the benchmark database')
        return self


class RunSettings(BaseModel):
    model_config = ConfigDict(extra='forbid')

    zero_shot_rounds: int = Field(default=4, ge=0)
    max_total_rounds: int = Field(default=5, ge=1)
    theta: float = Field(default=1.05, ge=1.0)
    mode: Literal['latency', 'explain-cost'] = 'latency'
    k_neighbors: int = Field(default=5, ge=1)
    k_groups: int = Field(default=3, ge=1)
    k_candidates: int = Field(default=4, ge=1)
    max_iterations: int = Field(default=5, ge=1)
    per_query_seconds: Optional[float] = Field(default=30.0, ge=0)
    per_query_money: Optional[float] = Field(default=None, ge=0)
    global_seconds: Optional[float] = Field(default=None, ge=0)
    global_money: Optional[float] = Field(default=None, ge=0)
    workers: int = Field(default=1, ge=1)
    requeue_accepted: bool = False
    repository: Optional[Path] = None
    out_dir: Path = Path('rewrite-out')

    @model_validator(mode='after')
    def _check_rounds(self):
        if self.zero_shot_rounds > self.max_total_rounds:
            raise ValueError('zero_shot_rounds cannot exceed max_total_rounds')
        return self

    def to_run_config(self) -> RunConfig:
        return RunConfig(zero_shot_rounds=self.zero_shot_rounds,
                         max_total_rounds=self.max_total_rounds,
                         theta=self.theta,
                         mode=EvaluationMode(self.mode),
                         k_neighbors=self.k_neighbors,
                         k_groups=self.k_groups,
                         max_iterations=self.max_iterations,
                         per_query_seconds=self.per_query_seconds,
                         per_query_money=self.per_query_money,
                         global_seconds=self.global_seconds,
                         global_money=self.global_money,
                         workers=self.workers,
                         requeue_accepted=self.requeue_accepted)


class Settings(BaseModel):
    """
    The settings file: [llm], [embedding], [database] and [run] tables. Relative paths resolve against the file's
    directory. Secrets are never part of it, only the names of the environment variables holding them.
    """
    model_config = ConfigDict(extra='forbid')

    llm: LlmSettings = Field(default_factory=LlmSettings)
    embedding: EmbeddingSettings = Field(default_factory=EmbeddingSettings)
    database: Optional[DatabaseSettings] = None
    run: RunSettings = Field(default_factory=RunSettings)

    @staticmethod
    def from_dict(data: Dict[str, Any], base: Path | None = None) -> 'Settings':
        """
        :raises ConfigError: If validation fails; the message names the offending field.
        """
        try:
            settings = Settings.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f'Invalid settings: {validation_message(e)}') from e
        if base is not None:
            settings.llm.transcript = _resolve(base, settings.llm.transcript)
            settings.llm.record_transcript = _resolve(base, settings.llm.record_transcript)
            settings.run.repository = _resolve(base, settings.run.repository)
            settings.run.out_dir = _resolve(base, settings.run.out_dir)
            if settings.database is not None:
                for target in [settings.database.benchmark, *settings.database.samples]:
                    target.path = _resolve(base, target.path)
        return settings

    @staticmethod
    def load(path: Path | None) -> 'Settings':
        if path is None:
            return Settings()
        path = Path(path)
        return Settings.from_dict(_read_toml(path, 'Settings file'), base=path.parent)

    def with_overrides(self, overrides: Dict[str, Any]) -> 'Settings':
        """
        Apply dotted-key overrides (e.g. {'run.theta': 1.2}); None values are ignored. The result is re-validated.

        :raises ConfigError: If an override is invalid.
        """
        data = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.partition('.')
            data.setdefault(section, {})[name] = value
        return Settings.from_dict(data)


class QueryEntry(BaseModel):
    model_config = ConfigDict(extra='forbid')

    id: str = Field(min_length=1)
    path: Path


class WorkloadManifest(BaseModel):
    """
    Workload file: the schema DDL, the seed spec for sample instances and the query files.
    """
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    schema_path: Path = Field(alias='schema')
    seed_spec: Optional[Path] = None
    queries: List[QueryEntry] = Field(min_length=1)
    source: Optional[Path] = Field(default=None, exclude=True)

    @model_validator(mode='after')
    def _unique_ids(self):
        ids = [entry.id for entry in self.queries]
        duplicates = sorted({query_id for query_id in ids if ids.count(query_id) > 1})
        if duplicates:
            raise ValueError(f'duplicate query ids: {", ".join(duplicates)}')
        return self

    @staticmethod
    def load(path: Path) -> 'WorkloadManifest':
        """
        Read a manifest and resolve its paths against the manifest's directory.

        :raises ConfigError: If the manifest is invalid or a referenced file does not exist.
        """
        path = Path(path)
        data = _read_toml(path, 'Manifest')
        try:
            manifest = WorkloadManifest.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f'Manifest {path}: {validation_message(e)}') from e
        base = path.parent
        manifest.source = path
        manifest.schema_path = _resolve(base, manifest.schema_path)
        manifest.seed_spec = _resolve(base, manifest.seed_spec)
        for entry in manifest.queries:
            entry.path = _resolve(base, entry.path)
        for required in [manifest.schema_path, manifest.seed_spec, *(entry.path for entry in manifest.queries)]:
            if required is not None and not required.is_file():
                raise ConfigError(f'Manifest {path}: {required} does not exist.')
        return manifest

    def schema_ddl(self) -> str:
        return self.schema_path.read_text(encoding='utf-8')

    def load_queries(self) -> List[Query]:
        """
        :raises ConfigError: If a query file is empty.
        """
        queries = []
        for entry in self.queries:
            sql = entry.path.read_text(encoding='utf-8').strip()
            if not sql:
                raise ConfigError(f'Query {entry.id}: {entry.path} is empty.')
            queries.append(Query(id=entry.id, sql=sql))
        return queries


def build_llm(settings: LlmSettings) -> LlmGateway:
    """
    :raises ConfigError: If the scripted backend has no transcript or the live backend no API key.
    """
    if settings.backend == 'scripted':
        if settings.transcript is None:
            raise ConfigError('The scripted LLM backend needs a transcript (llm.transcript or --transcript).')
        backend = ScriptedBackend.from_transcript(settings.transcript)
    else:
        backend = LiveBackend(endpoint=settings.endpoint,
                              model=settings.model,
                              api_key_env=settings.api_key_env,
                              temperature=settings.temperature,
                              timeout=settings.timeout,
                              record_path=settings.record_transcript)
    return LlmGateway(backend,
                      rate_in_per_1k=settings.rate_in_per_1k,
                      rate_out_per_1k=settings.rate_out_per_1k,
                      retries=settings.retries,
                      backoff_seconds=settings.backoff_seconds)


def build_embedders(settings: EmbeddingSettings) -> Tuple[EmbeddingProvider, EmbeddingProvider]:
    """
    :return: (rule embedder, query embedder).
    """
    if settings.provider == 'hashing':
        embedder = HashingEmbedder(settings.dim)
        return embedder, embedder
    return (RemoteEmbedder(settings.endpoint, settings.dim, model=settings.rule_model),
            RemoteEmbedder(settings.endpoint, settings.dim, model=settings.query_model))


def build_database(settings: DatabaseSettings) -> Tuple[DatabaseGateway, DbTarget, List[DbTarget]]:
    """
    :return: (gateway, benchmark target, sample targets with their seeds).
    """
    gateway = DatabaseGateway(repetitions=settings.repetitions, cache_reset=settings.cache_reset_command)
    benchmark = settings.benchmark.to_target(TargetRole.BENCHMARK)
    samples = [sample.to_target(TargetRole.EQUIVALENCE_SAMPLE, seed)
               for sample, seed in zip(settings.samples, settings.sample_seeds)]
    return gateway, benchmark, samples
