from __future__ import annotations

import socket
import sys
from pathlib import Path

import pytest

from octopus.agentport import StubAgent
from octopus.daemon import Daemon, SimClock
from octopus.deploy import Deployer
from octopus.pipeline import Orchestrator
from octopus.simbus import SimBus
from octopus.specs import default_spec_dir, load_spec_set

SERVO = "usb:1a2b:3c4d:0"
CAMERA = "usb:0c45:6366:0"
GPIO = "usb:1a2b:4e5f:0"
FIXTURES = Path(__file__).parent / "fixtures"
PKG_FIXTURES = Path(default_spec_dir()).parent / "fixtures"


@pytest.fixture(autouse=True)
def loopback_only(monkeypatch):
    """Refuse any outbound connection that is not to the loopback interface."""
    real = socket.socket.connect

    def guarded(self, address):
        host = address[0] if isinstance(address, tuple) else address
        if isinstance(host, str) and host not in ("127.0.0.1", "localhost", "::1"):
            raise AssertionError(f"test attempted a non-loopback connection to {address!r}")
        return real(self, address)

    monkeypatch.setattr(socket.socket, "connect", guarded)


@pytest.fixture(scope="session")
def specs():
    return load_spec_set(default_spec_dir())


@pytest.fixture
def bus():
    return SimBus.default()


def make_orchestrator(state_dir, bus, specs, **kw) -> Orchestrator:
    kw.setdefault("agent", StubAgent())
    if "deployer" not in kw:
        kw["deployer"] = Deployer(state_dir, port=0)
    return Orchestrator(state_dir, specs, bus, port=0, **kw)


@pytest.fixture
def orchestrator(tmp_path, bus, specs):
    orch = make_orchestrator(tmp_path / "state", bus, specs)
    yield orch
    orch.deployer.stop()


@pytest.fixture
def deployed(orchestrator):
    """A bootstrapped default rig served in-process."""
    report = orchestrator.up()
    assert report.ok, report.to_dict()
    return orchestrator


@pytest.fixture
def daemon_factory():
    made = []

    def make(orch, **kw):
        kw.setdefault("clock", SimClock(speedup=20))
        kw.setdefault("perceive_interval_s", None)
        d = Daemon(orch, **kw).start()
        made.append(d)
        return d

    yield make
    for d in made:
        d.stop()


def pump(daemon, max_steps: int = 200):
    """Step the daemon until a new healing action settles or degraded mode."""
    before = len(daemon.history)
    for _ in range(max_steps):
        daemon.step()
        if len(daemon.history) > before and daemon.history[-1].outcome != "pending" and daemon.mode in ("watching", "degraded"):
            return daemon.history[-1]
        if daemon.mode == "degraded":
            return None
        daemon.clock.sleep(0.25)
    raise AssertionError(f"daemon did not settle; mode={daemon.mode}")


def octopus_cmd(*args: str) -> list[str]:
    return [sys.executable, "-m", "octopus", *args]


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
