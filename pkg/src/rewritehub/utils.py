import logging
import math
from typing import Iterable

import numpy as np
from pydantic import ValidationError

__all__ = ['setup_logger', 'try_or_default', 'geometric_mean', 'estimate_tokens', 'validation_message']


def setup_logger(name: str, level: int | str = logging.INFO):
    """
    Initializes a logger with the given name and level.

    :param name: Logger name.
    :param level: Either a string or an integer. If a string, it must be one of the following: 'DEBUG', 'INFO',
    'WARNING', 'ERROR', 'CRITICAL'. If an integer, it must be one of the following: log.DEBUG, log.INFO, log.WARNING,
    log.ERROR, log.CRITICAL.
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.propagate = False

    # One handler per logger, however often this is called
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    handler = logging.StreamHandler()
    handler.setLevel(level)
    format_str = '%(levelname)s | %(name)s | %(message)s' if level == logging.DEBUG else '%(levelname)s | %(message)s'
    formatter = logging.Formatter(format_str)
    handler.setFormatter(formatter)
    logger.addHandler(handler)


def try_or_default(func, default=None, log: logging.Logger | None = None, message: str = ''):
    """
    Tries to call the given function and returns its result. If an exception is raised, returns the default value.

    :param func: Zero-argument callable.
    :param default: Value returned when `func` raises.
    :param log: Optional logger; when given, the swallowed exception is logged as an error.
    :param message: Prefix for the logged error.
    """
    try:
        return func()
    except Exception as e:
        if log is not None:
            log.error(f'{message}{e}')
        return default


def geometric_mean(values: Iterable[float]) -> float:
    """
    Geometric mean of strictly positive values, computed as exp(mean(log(v))) so that long observation lists
    neither overflow nor underflow.

    :raises ValueError: If `values` is empty or contains a non-positive entry.
    """
    array = np.asarray(list(values), dtype=np.float64)
    if array.size == 0:
        raise ValueError('Geometric mean of an empty sequence is undefined.')
    if np.any(array <= 0) or not np.all(np.isfinite(array)):
        raise ValueError('Geometric mean requires finite, strictly positive values.')
    return float(np.exp(np.mean(np.log(array))))


def estimate_tokens(text: str) -> int:
    """
    Rough token count (four characters per token) used where the provider does not report usage.
    """
    return math.ceil(len(text) / 4)


def validation_message(error: Exception) -> str:
    """
    One-line description of a pydantic validation error: dotted field path and message of the first problem.
    """
    if isinstance(error, ValidationError):
        first = error.errors()[0]
        location = '.'.join(str(part) for part in first['loc'])
        return f'{location}: {first["msg"]}' if location else first['msg']
    return str(error)
