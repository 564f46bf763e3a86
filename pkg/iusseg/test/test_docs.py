import importlib
import pkgutil

import pytest

import iusseg

MODULES = sorted(m.name for m in pkgutil.walk_packages(iusseg.__path__, 'iusseg.')
                 if not m.ispkg and not m.name.startswith('iusseg.test'))


def test_modules_found():
    assert {'iusseg.cli', 'iusseg.learn.lrn_net', 'iusseg.simulate.sim_physics'} <= set(MODULES)


@pytest.mark.parametrize('name', MODULES)
def test_module_docstring(name):
    module = importlib.import_module(name)
    assert module.__doc__ and module.__doc__.strip()
