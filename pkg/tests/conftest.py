import pytest

from semistatic.branch import Runtime
from semistatic.memory import host_supported

requires_host = pytest.mark.skipif(
    not host_supported(), reason="needs x86-64 Linux")


@pytest.fixture(scope="module")
def rt():
    if not host_supported():
        pytest.skip("needs x86-64 Linux")
    runtime = Runtime()
    yield runtime
    runtime.close()


@pytest.fixture()
def fresh_rt():
    if not host_supported():
        pytest.skip("needs x86-64 Linux")
    runtime = Runtime()
    yield runtime
    runtime.close()
