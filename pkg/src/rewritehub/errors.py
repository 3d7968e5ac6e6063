__all__ = [
    'RewriteHubError',
    'ConfigError',
    'PreconditionError',
    'TransportError',
    'BudgetExhausted',
    'MissingSlot',
    'NoSqlFound',
    'ProviderError',
    'UnknownRule',
    'RepositoryFormatError',
    'DatabaseConnectionError',
    'QueryTimeout',
    'QueryFailed',
]


class RewriteHubError(Exception):
    """
    Base class for every error raised by rewritehub.
    """


class ConfigError(RewriteHubError):
    """
    Settings, manifest or seed spec could not be loaded or failed validation.
    """


class PreconditionError(RewriteHubError, ValueError):
    """
    An operation was called with input that violates its contract (empty text, empty conversation, ...).
    """


class TransportError(RewriteHubError):
    """
    A remote endpoint (LLM or embedding provider) could not be reached or answered with an error.
    `retryable` is False for client-side rejections (bad key, bad request).
    """

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class BudgetExhausted(RewriteHubError):
    """
    The time or money allowance of a query or of the whole run is used up.
    """


class MissingSlot(RewriteHubError, KeyError):
    """
    A prompt template was rendered without binding one of its slots.
    """

    def __init__(self, template_id, slot: str):
        super().__init__(f'{template_id}: slot "{slot}" is not bound.')
        self.template_id = template_id
        self.slot = slot

    def __str__(self) -> str:
        return self.args[0]


class NoSqlFound(RewriteHubError):
    """
    An LLM reply did not contain anything that looks like a SQL query.
    """


class ProviderError(RewriteHubError):
    """
    The embedding provider failed or returned vectors of the wrong shape.
    """


class UnknownRule(RewriteHubError, KeyError):
    """
    A rule id is not present in the repository.
    """

    def __str__(self) -> str:
        return f'Unknown rule {self.args[0]}.'


class RepositoryFormatError(RewriteHubError):
    """
    A repository file is malformed. `line` is the 1-based line number of the offending record.
    """

    def __init__(self, path, line: int, reason: str):
        super().__init__(f'{path}:{line}: {reason}')
        self.path = path
        self.line = line
        self.reason = reason


class DatabaseConnectionError(RewriteHubError):
    """
    The database target could not be reached.
    """


class QueryTimeout(RewriteHubError):
    """
    A statement ran longer than its timeout and was cancelled.
    """

    def __init__(self, timeout: float):
        super().__init__(f'Statement cancelled after {timeout:.3f}s.')
        self.timeout = timeout


class QueryFailed(RewriteHubError):
    """
    The engine rejected a statement at execution time. Carries the engine's error text.
    """
