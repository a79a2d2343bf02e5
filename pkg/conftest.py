import logging

import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='roda os testes marcados como slow')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: treino/avaliação completos (use --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='precisa de --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_matplotlib():
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
