"""Suite-wide fixtures.

The whole suite runs inside a network-denying harness: any socket connect
or DNS resolution that leaves loopback raises immediately. Tests that need
a server bind 127.0.0.1, which stays allowed.
"""

from __future__ import annotations

import socket

import pytest

_LOOPBACK_HOSTS = {"127.0.0.1", "::1", "localhost", ""}
_real_connect = socket.socket.connect
_real_connect_ex = socket.socket.connect_ex
_real_getaddrinfo = socket.getaddrinfo


class NetworkBlocked(RuntimeError):
    pass


def _host_of(address) -> str | None:
    if isinstance(address, tuple) and address:
        return str(address[0])
    return None


def _guard(sock: socket.socket, address) -> None:
    if sock.family in (socket.AF_INET, socket.AF_INET6):
        host = _host_of(address)
        if host is not None and host not in _LOOPBACK_HOSTS and not host.startswith("127."):
            raise NetworkBlocked(f"test harness blocked connect to {address!r}")


def _guarded_connect(self, address):
    _guard(self, address)
    return _real_connect(self, address)


def _guarded_connect_ex(self, address):
    _guard(self, address)
    return _real_connect_ex(self, address)


def _guarded_getaddrinfo(host, *args, **kwargs):
    name = str(host or "")
    if name not in _LOOPBACK_HOSTS and not name.startswith("127."):
        raise NetworkBlocked(f"test harness blocked DNS for {host!r}")
    return _real_getaddrinfo(host, *args, **kwargs)


@pytest.fixture(scope="session", autouse=True)
def deny_network():
    socket.socket.connect = _guarded_connect
    socket.socket.connect_ex = _guarded_connect_ex
    socket.getaddrinfo = _guarded_getaddrinfo
    yield
    socket.socket.connect = _real_connect
    socket.socket.connect_ex = _real_connect_ex
    socket.getaddrinfo = _real_getaddrinfo


@pytest.fixture()
def workdirs(tmp_path):
    """Conventional layout for one test: sandboxes, state, repo dirs."""
    return {
        "sandbox_root": tmp_path / "sandboxes",
        "state_dir": tmp_path / "state",
        "repo_path": tmp_path / "repo",
        "tmp": tmp_path,
    }
