"""Shared fixtures: a loopback reference broker per test."""

import pytest

from mqttprobe import refbroker
from mqttprobe.runner import Endpoint


@pytest.fixture()
def broker():
    srv = refbroker.serve(host="127.0.0.1", port=0)
    yield srv
    srv.stop()


@pytest.fixture()
def endpoint(broker):
    return Endpoint(host="127.0.0.1", port=broker.port)
