import enum
import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Tuple

import requests

from rewritehub.errors import BudgetExhausted, ConfigError, PreconditionError, TransportError
from rewritehub.models import Budget
from rewritehub.utils import estimate_tokens

__all__ = [
    'Role',
    'Turn',
    'Conversation',
    'BackendReply',
    'LlmBackend',
    'LiveBackend',
    'ScriptedRecord',
    'ScriptedBackend',
    'UsageRecord',
    'UsageLedger',
    'LlmGateway',
]

logger = logging.getLogger(__name__)


class Role(str, enum.Enum):
    SYSTEM = 'system'
    USER = 'user'
    ASSISTANT = 'assistant'


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str


@dataclass(frozen=True)
class Conversation:
    """
    An immutable, role-tagged chat exchange. `template_id` names the template that produced the latest user turn,
    which is what the usage ledger and the scripted backend key on.
    """
    turns: Tuple[Turn, ...] = ()
    template_id: Optional[str] = None

    @staticmethod
    def single(text: str, template_id: Optional[str] = None, system: Optional[str] = None) -> 'Conversation':
        turns = (Turn(Role.SYSTEM, system),) if system else ()
        return Conversation(turns=turns + (Turn(Role.USER, text),), template_id=template_id)

    def validate(self) -> None:
        """
        :raises PreconditionError: If the conversation is empty, if roles do not alternate user/assistant after an
        optional leading system turn, or if it does not end with a user turn.
        """
        if not self.turns:
            raise PreconditionError('Conversation is empty.')
        turns = self.turns[1:] if self.turns[0].role == Role.SYSTEM else self.turns
        if not turns:
            raise PreconditionError('Conversation holds only a system turn.')
        for index, turn in enumerate(turns):
            expected = Role.USER if index % 2 == 0 else Role.ASSISTANT
            if turn.role != expected:
                raise PreconditionError(f'Conversation turn {index}: expected {expected.value}, got {turn.role.value}.')
        if turns[-1].role != Role.USER:
            raise PreconditionError('Conversation must end with a user turn.')

    def follow_up(self, assistant_text: str, user_text: str, template_id: Optional[str] = None) -> 'Conversation':
        """
        Extend the exchange with the assistant's reply and the next user turn. History is never rewritten.
        """
        return Conversation(turns=self.turns + (Turn(Role.ASSISTANT, assistant_text), Turn(Role.USER, user_text)),
                            template_id=template_id or self.template_id)

    def append_to_last_turn(self, text: str) -> 'Conversation':
        last = self.turns[-1]
        return replace(self, turns=self.turns[:-1] + (Turn(last.role, f'{last.text}\n{text}'),))

    @property
    def last_user_text(self) -> str:
        for turn in reversed(self.turns):
            if turn.role == Role.USER:
                return turn.text
        return ''

    def digest(self) -> str:
        """
        Stable digest of the rendered conversation (roles and texts), independent of how the text was assembled.
        """
        payload = json.dumps([[turn.role.value, turn.text] for turn in self.turns], ensure_ascii=False)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:32]

    def estimated_tokens(self) -> int:
        return sum(estimate_tokens(turn.text) for turn in self.turns)


@dataclass(frozen=True)
class BackendReply:
    text: str
    tokens_in: Optional[int] = None
    tokens_out: Optional[int] = None
    latency: Optional[float] = None


class LlmBackend(ABC):
    """
    A chat model. Implementations must be safe for concurrent `send` calls.
    """

    @abstractmethod
    def send(self, conversation: Conversation) -> BackendReply:
        """
        Send the conversation and return the assistant reply.

        :raises TransportError: On network failure or a server-side error.
        """
        pass


class LiveBackend(LlmBackend):
    """
    Chat-completion HTTP backend (OpenAI-compatible JSON protocol). The API key is read from the environment.
    """

    def __init__(self,
                 endpoint: str,
                 model: str,
                 api_key_env: str = 'LLM_API_KEY',
                 temperature: float | None = None,
                 timeout: float = 120.0,
                 record_path: Path | None = None,
                 session: requests.Session | None = None):
        """
        :param endpoint: Full URL of the chat-completions endpoint.
        :param model: Model name sent with every request.
        :param api_key_env: Name of the environment variable holding the API key.
        :param temperature: Sampling temperature. None leaves the provider default in place.
        :param timeout: Per-request timeout in seconds.
        :param record_path: If set, every exchange is appended there in the scripted transcript format.
        :param session: Optional requests session (connection pooling, tests).
        """
        api_key = os.environ.get(api_key_env)
        if not api_key:
            raise ConfigError(f'Environment variable {api_key_env} with the LLM API key is not set.')
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.record_path = Path(record_path) if record_path else None
        self._headers = {'Authorization': f'Bearer {api_key}', 'Content-Type': 'application/json'}
        self._session = session or requests.Session()
        self._record_lock = threading.Lock()

    def send(self, conversation: Conversation) -> BackendReply:
        payload = {
            'model': self.model,
            'messages': [{'role': turn.role.value, 'content': turn.text} for turn in conversation.turns],
        }
        if self.temperature is not None:
            payload['temperature'] = self.temperature

        start = time.monotonic()
        try:
            response = self._session.post(self.endpoint, headers=self._headers, json=payload, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(f'LLM request failed: {e}') from e
        latency = time.monotonic() - start

        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f'LLM endpoint answered {response.status_code}: {response.text[:200]}')
        if response.status_code >= 400:
            raise TransportError(f'LLM endpoint rejected the request ({response.status_code}): {response.text[:200]}',
                                 retryable=False)

        try:
            data = response.json()
            text = data['choices'][0]['message']['content'] or ''
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransportError(f'LLM endpoint returned an unexpected body: {e}') from e
        usage = data.get('usage') or {}
        reply = BackendReply(text=text,
                             tokens_in=usage.get('prompt_tokens'),
                             tokens_out=usage.get('completion_tokens'),
                             latency=latency)
        self._record(conversation, text)
        return reply

    def _record(self, conversation: Conversation, text: str) -> None:
        if self.record_path is None:
            return
        record = {'template_id': conversation.template_id, 'prompt_digest': conversation.digest(), 'reply': text}
        with self._record_lock:
            with self.record_path.open('a', encoding='utf-8') as f:
                f.write(json.dumps(record, ensure_ascii=False) + '\n')


@dataclass(frozen=True)
class ScriptedRecord:
    """
    One transcript line. A record matches by exact `prompt_digest` if given, otherwise by `contains` (substring of
    the last user turn), otherwise by `template_id` alone.
    """
    template_id: Optional[str]
    reply: str
    prompt_digest: Optional[str] = None
    contains: Optional[str] = None

    def key(self) -> Tuple[Optional[str], str, Optional[str]]:
        if self.prompt_digest:
            return self.template_id, 'digest', self.prompt_digest
        if self.contains:
            return self.template_id, 'contains', self.contains
        return self.template_id, 'template', None


class ScriptedBackend(LlmBackend):
    """
    Deterministic replay backend. Records sharing a key form a queue consumed in file order; the last reply of a
    queue repeats once the queue is drained. Lookup order: exact digest, first matching `contains` key (file order),
    template-only.
    """

    def __init__(self, records: List[ScriptedRecord]):
        self._lock = threading.Lock()
        self._queues: 'OrderedDict[tuple, Deque[str]]' = OrderedDict()
        for record in records:
            self._queues.setdefault(record.key(), deque()).append(record.reply)
        self.calls: List[Tuple[Optional[str], str]] = []

    @staticmethod
    def from_transcript(path: Path) -> 'ScriptedBackend':
        """
        Load a line-delimited JSON transcript of {template_id, prompt_digest | contains, reply} records.

        :raises ConfigError: If the file is missing or a line is malformed.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f'Transcript {path} does not exist.')
        records = []
        for number, line in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                records.append(ScriptedRecord(template_id=data.get('template_id'),
                                              reply=data['reply'],
                                              prompt_digest=data.get('prompt_digest'),
                                              contains=data.get('contains')))
            except (ValueError, KeyError, TypeError) as e:
                raise ConfigError(f'{path}:{number}: malformed transcript record ({e}).') from e
        return ScriptedBackend(records)

    def send(self, conversation: Conversation) -> BackendReply:
        template_id = conversation.template_id
        digest = conversation.digest()
        with self._lock:
            queue = self._lookup(template_id, digest, conversation.last_user_text)
            if queue is None:
                raise PreconditionError(f'No scripted reply for {template_id} (digest {digest}).')
            text = queue.popleft() if len(queue) > 1 else queue[0]
            self.calls.append((template_id, digest))
        logger.debug(f'Scripted reply for {template_id} ({digest}).')
        prompt_text = ''.join(turn.text for turn in conversation.turns)
        return BackendReply(text=text, tokens_in=estimate_tokens(prompt_text), tokens_out=estimate_tokens(text),
                            latency=0.0)

    def _lookup(self, template_id, digest: str, last_user_text: str) -> Optional[Deque[str]]:
        for tid in (template_id, None):
            queue = self._queues.get((tid, 'digest', digest))
            if queue:
                return queue
        for (tid, kind, value), queue in self._queues.items():
            if kind == 'contains' and tid in (template_id, None) and value in last_user_text:
                return queue
        for tid in (template_id, None):
            queue = self._queues.get((tid, 'template', None))
            if queue:
                return queue
        return None


@dataclass(frozen=True)
class UsageRecord:
    tokens_in: int
    tokens_out: int
    cost: float
    latency: float
    template_id: Optional[str]
    subject: Optional[str] = None


@dataclass
class UsageLedger:
    """
    Run-wide record of every completed LLM call. Appends are serialized.
    """
    records: List[UsageRecord] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def append(self, record: UsageRecord) -> None:
        with self._lock:
            self.records.append(record)

    def __len__(self) -> int:
        with self._lock:
            return len(self.records)

    def snapshot(self) -> List[UsageRecord]:
        with self._lock:
            return list(self.records)

    def totals(self) -> Dict[str, float]:
        records = self.snapshot()
        return {
            'calls': len(records),
            'tokens_in': sum(r.tokens_in for r in records),
            'tokens_out': sum(r.tokens_out for r in records),
            'cost': sum(r.cost for r in records),
            'latency': sum(r.latency for r in records),
        }

    def calls_by_template(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for record in self.snapshot():
            key = str(record.template_id)
            counts[key] = counts.get(key, 0) + 1
        return dict(sorted(counts.items()))


class LlmGateway:
    """
    The single carrier of LLM calls: validates the conversation, checks and debits the budget, retries transport
    failures with exponential backoff and books every completed call in the usage ledger.
    """

    def __init__(self,
                 backend: LlmBackend,
                 rate_in_per_1k: float = 0.0,
                 rate_out_per_1k: float = 0.0,
                 retries: int = 2,
                 backoff_seconds: float = 1.0,
                 ledger: UsageLedger | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if rate_in_per_1k < 0 or rate_out_per_1k < 0:
            raise ConfigError('Token rates must be non-negative.')
        self.backend = backend
        self.rate_in_per_1k = rate_in_per_1k
        self.rate_out_per_1k = rate_out_per_1k
        self.retries = retries
        self.backoff_seconds = backoff_seconds
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._sleep = sleep

    def cost(self, tokens_in: int, tokens_out: int) -> float:
        return tokens_in * self.rate_in_per_1k / 1000.0 + tokens_out * self.rate_out_per_1k / 1000.0

    def complete(self,
                 conversation: Conversation,
                 budget: Budget | None = None,
                 subject: str | None = None) -> Tuple[str, UsageRecord]:
        """
        Send a conversation and return the assistant text with its usage record.

        :param conversation: Conversation ending with a user turn.
        :param budget: Budget to check before and debit after the call.
        :param subject: Free-form label (usually the query id) stored with the usage record.
        :raises PreconditionError: If the conversation is invalid.
        :raises BudgetExhausted: If the budget is exhausted before the call or while waiting to retry.
        :raises TransportError: If the backend still fails after all retries.
        """
        conversation.validate()
        label = subject or 'LLM'
        attempt = 0
        while True:
            if budget is not None and budget.exhausted():
                raise BudgetExhausted(f'{label}: budget exhausted before {conversation.template_id} call.')
            start = time.monotonic()
            try:
                reply = self.backend.send(conversation)
                break
            except TransportError as e:
                if attempt >= self.retries or not e.retryable:
                    logger.error(f'{label}: {conversation.template_id} call failed after {attempt + 1} attempts: {e}')
                    raise
                delay = self.backoff_seconds * (2 ** attempt)
                if budget is not None:
                    # The failed attempt and the backoff wait are both wall time of this call
                    budget.debit(seconds=time.monotonic() - start + delay)
                    if budget.exhausted():
                        logger.error(f'{label}: {conversation.template_id} call failed ({e}), budget exhausted '
                                     f'after {attempt + 1} attempts.')
                        raise BudgetExhausted(f'{label}: budget exhausted while retrying '
                                              f'{conversation.template_id} call ({e}).') from e
                logger.warning(f'{label}: {conversation.template_id} call failed ({e}), retrying in {delay:.1f}s.')
                self._sleep(delay)
                attempt += 1

        latency = reply.latency if reply.latency is not None else time.monotonic() - start
        tokens_in = reply.tokens_in if reply.tokens_in is not None else conversation.estimated_tokens()
        tokens_out = reply.tokens_out if reply.tokens_out is not None else estimate_tokens(reply.text)
        record = UsageRecord(tokens_in=tokens_in,
                             tokens_out=tokens_out,
                             cost=self.cost(tokens_in, tokens_out),
                             latency=latency,
                             template_id=conversation.template_id,
                             subject=subject)
        self.ledger.append(record)
        if budget is not None:
            budget.debit(seconds=latency, money=record.cost, llm_call=True)
        logger.debug(f'{label}: {conversation.template_id} completed, {tokens_in}+{tokens_out} tokens, '
                     f'cost {record.cost:.4f}.')
        return reply.text, record
