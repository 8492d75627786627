import time

import pytest

from pasco.client.transport import LocalTransport
from pasco.errors import TransportError
from pasco.sss.service import SssService


class FakeClock:
    """Injectable time source; starts at the real clock and only moves on demand."""

    def __init__(self, start: float | None = None):
        self.now = float(start if start is not None else time.time())

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class FlakyTransport:
    """Wraps a transport with a kill switch to simulate an unreachable endpoint."""

    def __init__(self, inner):
        self.inner = inner
        self.down = False

    @property
    def url(self):
        return self.inner.url

    @property
    def pinned_key(self):
        return self.inner.pinned_key

    @pinned_key.setter
    def pinned_key(self, value):
        self.inner.pinned_key = value

    def request(self, method, path, headers, body):
        if self.down:
            raise TransportError(f"{self.url} is down")
        return self.inner.request(method, path, headers, body)

    def close(self):
        self.inner.close()


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def service(clock):
    return SssService(clock=clock)


@pytest.fixture
def transport(service):
    return LocalTransport(service, "http://one.sss.example")


@pytest.fixture
def pair(clock):
    """Two independent services with transports, for mirrored deployments."""
    svc1 = SssService(clock=clock)
    svc2 = SssService(clock=clock)
    t1 = FlakyTransport(LocalTransport(svc1, "http://one.sss.example"))
    t2 = FlakyTransport(LocalTransport(svc2, "http://two.sss.example"))
    return (svc1, svc2), (t1, t2)


# PBKDF2 hardening is pointless against a test suite's wall clock.
FAST_PIN_ITERATIONS = 1000
