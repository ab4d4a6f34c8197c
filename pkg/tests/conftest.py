import pytest

from nlrenewal.parallel import set_threads


@pytest.fixture(autouse=True)
def single_thread():
    """Unit tests run single-threaded unless a test asks otherwise."""
    set_threads(1)
    yield
    set_threads(None)
