import logging
import os

import numpy as np
import pytest
from hypothesis import settings, HealthCheck

from iusseg.tissue.tss import bind_tissue_map, default_property_table
from iusseg.volume.vol import Volume3D

settings.register_profile('ci', max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile('dev', max_examples=20, deadline=None)
settings.load_profile(os.getenv('IUSSEG_HYPOTHESIS_PROFILE', 'dev'))


@pytest.fixture(autouse=True)
def quiet_logging():
    logging.getLogger('iusseg').setLevel(logging.WARNING)
    yield


@pytest.fixture
def defaults():
    return default_property_table()


@pytest.fixture
def bind(defaults):
    table, background = defaults

    def _bind(labels, id='test'):
        return bind_tissue_map(labels, table, background, id=id)
    return _bind


def cube_mask(dims, lo, hi, spacing=1.0):
    data = np.zeros(dims, dtype=np.uint8)
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return Volume3D(data, (spacing,) * 3)
