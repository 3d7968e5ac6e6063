import logging
import math

import numpy as np
import pytest
from pydantic import BaseModel, ValidationError

from rewritehub.utils import estimate_tokens, geometric_mean, try_or_default, validation_message


def test_geometric_mean_matches_direct_product():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        values = rng.uniform(0.01, 100.0, size=int(rng.integers(1, 20)))
        expected = math.prod(values) ** (1.0 / len(values))
        assert geometric_mean(values) == pytest.approx(expected, rel=1e-12)


def test_geometric_mean_of_reciprocal_speedups_is_one():
    assert geometric_mean([4.0, 1.0, 0.25]) == pytest.approx(1.0)


def test_geometric_mean_does_not_overflow():
    assert geometric_mean([1e300] * 50) == pytest.approx(1e300)


@pytest.mark.parametrize('values', [[], [1.0, 0.0], [2.0, -1.0], [float('inf')]])
def test_geometric_mean_rejects_invalid_input(values):
    with pytest.raises(ValueError):
        geometric_mean(values)


def test_try_or_default_logs_and_falls_back(caplog):
    log = logging.getLogger('tests.utils')
    with caplog.at_level(logging.ERROR, logger='tests.utils'):
        assert try_or_default(lambda: 1 / 0, default=-1, log=log, message='Division: ') == -1
    assert 'Division: division by zero' in caplog.text
    assert try_or_default(lambda: 5) == 5


def test_estimate_tokens():
    assert estimate_tokens('') == 0
    assert estimate_tokens('abcde') == 2


def test_validation_message_names_the_field():
    class Section(BaseModel):
        rounds: int

    try:
        Section(rounds='many')
    except ValidationError as e:
        assert validation_message(e).startswith('rounds: ')
    assert validation_message(ValueError('plain')) == 'plain'
