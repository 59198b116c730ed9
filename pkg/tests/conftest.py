import warnings
from pathlib import Path

import pytest

from errors import ScheduleWarning
from netmdp import make_rng
from validation_suite import isolated_user, path_fixture

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'


@pytest.fixture
def path3():
    """3-agent synthetic path with a fixed random beta=0 policy"""
    return path_fixture()


@pytest.fixture
def path2_beta1():
    return path_fixture(2, beta=1)


@pytest.fixture
def lone_user():
    return isolated_user()


@pytest.fixture
def rng():
    return make_rng(1234, 'tests')


@pytest.fixture
def config_dir():
    return CONFIG_DIR


@pytest.fixture
def quiet_schedule():
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ScheduleWarning)
        yield


@pytest.fixture
def write_config(tmp_path):
    def write(text, name='experiment.yaml'):
        path = tmp_path / name
        path.write_text(text, encoding='utf-8')
        return path
    return write
