import pytest

from edgeff import autodiff as ad


@pytest.fixture(autouse=True)
def _default_precision():
    ad.set_default_precision(64)
    yield
    ad.set_default_precision(64)
