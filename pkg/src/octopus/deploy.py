"""Deploy stage: dependency checks, installation, endpoint launch and health.

Two launchers share one contract. :class:`Deployer` runs the server on a
thread in this process (tests, daemon-driven heals, ``up --foreground``);
:class:`ProcessDeployer` runs it as a detached ``octopus serve`` process so
that ``octopus up`` can return while the endpoint stays live.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from filelock import FileLock

from octopus.bus import STEP_DEPENDENCIES, DeviceBus
from octopus.canonical import write_pretty
from octopus.client import probe_health
from octopus.events import EventLog
from octopus.mcpserve import PortInUse, RunningEndpoint, start_server
from octopus.toolgen import ServerManifest

HEALTH_TIMEOUT_S = 10.0
PROBE_INTERVAL_S = 0.25
HEALTH_STATES = ("starting", "healthy", "degraded", "down")


class DeployError(Exception):
    pass


class LaunchTimeout(DeployError):
    pass


class DependencyNotSatisfied(DeployError):
    def __init__(self, missing: list[str]):
        super().__init__(f"missing dependencies: {', '.join(missing)}")
        self.missing = missing


class InstallFailed(DeployError):
    def __init__(self, dep: str, output: str):
        super().__init__(f"installing {dep} failed: {output.strip()[:500]}")
        self.dep = dep
        self.output = output


@dataclass
class DependencyReport:
    required: list[tuple[str, str]]
    missing: list[tuple[str, str]]
    checked_at: float = field(default_factory=time.time)

    def __post_init__(self) -> None:
        if not set(self.missing) <= set(self.required):
            raise ValueError("missing must be a subset of required")

    @property
    def missing_names(self) -> list[str]:
        return [n for n, _ in self.missing]

    def to_dict(self) -> dict:
        return {
            "required": [list(r) for r in self.required],
            "missing": [list(m) for m in self.missing],
            "checked_at": self.checked_at,
        }


def required_dependencies(manifest: ServerManifest) -> list[tuple[str, str]]:
    req: dict[tuple[str, str], None] = {}
    for _, plan in manifest.tools:
        for step in plan.steps:
            dep = STEP_DEPENDENCIES.get(step.op)
            if dep is not None:
                req.setdefault(dep)
    return sorted(req)


def check_dependencies(manifest: ServerManifest, bus: DeviceBus) -> DependencyReport:
    """Derive requirements from plan step kinds and probe each on the bus host."""
    required = required_dependencies(manifest)
    missing = [d for d in required if not bus.dependency_present(*d)]
    return DependencyReport(required, missing)


class InstallerPort(Protocol):
    def install(self, name: str, kind: str) -> str: ...


class StubInstaller:
    """Flips the simulated presence flag on a SimBus."""

    def __init__(self, bus):
        self.bus = bus
        self.installed: list[str] = []

    def install(self, name: str, kind: str) -> str:
        self.bus.set_dependency(name, True)
        self.installed.append(name)
        return f"stub-installed {name}"


class CommandInstaller:
    """Runs a configured command per dependency, e.g. {"cv2": ["pip", "install", "opencv-python"]}."""

    def __init__(self, table: dict[str, list[str]], timeout_s: float = 600.0):
        self.table = table
        self.timeout_s = timeout_s

    def install(self, name: str, kind: str) -> str:
        argv = self.table.get(name)
        if not argv:
            raise InstallFailed(name, "no install command configured")
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s)
        except (OSError, subprocess.SubprocessError) as exc:
            raise InstallFailed(name, str(exc)) from exc
        output = proc.stdout + proc.stderr
        if proc.returncode != 0:
            raise InstallFailed(name, output)
        return output


def install_missing(report: DependencyReport, installer: InstallerPort, bus: DeviceBus) -> DependencyReport:
    if not report.missing:
        return report
    for name, kind in report.missing:
        installer.install(name, kind)
    missing = [d for d in report.required if not bus.dependency_present(*d)]
    return DependencyReport(report.required, missing)


@dataclass
class DeploymentRecord:
    manifest_hash: str
    endpoint: tuple[str, int]
    started_at: float
    health: str = "starting"
    pid: int | None = None
    last_probe_at: float | None = None

    @property
    def url(self) -> str:
        return f"http://{self.endpoint[0]}:{self.endpoint[1]}"

    def to_dict(self) -> dict:
        return {
            "manifest_hash": self.manifest_hash,
            "endpoint": {"host": self.endpoint[0], "port": self.endpoint[1]},
            "started_at": self.started_at,
            "health": self.health,
            "pid": self.pid,
            "last_probe_at": self.last_probe_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentRecord":
        return cls(
            d["manifest_hash"],
            (d["endpoint"]["host"], int(d["endpoint"]["port"])),
            float(d["started_at"]),
            d.get("health", "starting"),
            d.get("pid"),
            d.get("last_probe_at"),
        )

    def save(self, path: Path) -> None:
        write_pretty(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "DeploymentRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def wait_healthy(url: str, manifest_hash: str, timeout_s: float = HEALTH_TIMEOUT_S, interval_s: float = PROBE_INTERVAL_S) -> dict | None:
    deadline = time.monotonic() + timeout_s
    while True:
        body = probe_health(url, timeout_s=max(interval_s, 0.5))
        if body is not None and body.get("status") == "ok" and body.get("manifest_hash") == manifest_hash:
            return body
        if time.monotonic() >= deadline:
            return None
        time.sleep(interval_s)


def refresh_health(record: DeploymentRecord) -> DeploymentRecord:
    body = probe_health(record.url)
    record.last_probe_at = time.time()
    if body is None:
        record.health = "down"
    elif body.get("manifest_hash") != record.manifest_hash:
        record.health = "degraded"
    else:
        record.health = "healthy" if body.get("status") == "ok" else "degraded"
    return record


class Deployer:
    """In-process launcher. Holds the running endpoint so heals can restart it."""

    def __init__(
        self,
        state_dir: Path,
        host: str = "127.0.0.1",
        port: int = 0,
        events: EventLog | None = None,
        heartbeat_s: float = 15.0,
        health_timeout_s: float = HEALTH_TIMEOUT_S,
    ):
        self.state_dir = Path(state_dir)
        self.host = host
        self.port = port
        self.events = events
        self.heartbeat_s = heartbeat_s
        self.health_timeout_s = health_timeout_s
        self.endpoint: RunningEndpoint | None = None
        self.record: DeploymentRecord | None = None
        self.server_events: EventLog | None = None

    @property
    def record_path(self) -> Path:
        return self.state_dir / "deployment.json"

    @property
    def manifest_path(self) -> Path:
        return self.state_dir / "manifest.json"

    def _lock(self) -> FileLock:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.state_dir / ".deploy.lock"), timeout=30)

    def launch(self, manifest: ServerManifest, bus: DeviceBus, skip_deps: bool = False, force: bool = False) -> DeploymentRecord:
        with self._lock():
            if (
                not force
                and self.endpoint is not None
                and self.endpoint.running
                and self.record is not None
                and self.record.manifest_hash == manifest.manifest_hash
                and refresh_health(self.record).health == "healthy"
            ):
                return self.record
            if not skip_deps:
                report = check_dependencies(manifest, bus)
                if report.missing:
                    raise DependencyNotSatisfied(report.missing_names)
            port = self.port
            if self.endpoint is not None:
                port = self.endpoint.port
                self.endpoint.stop()
                self.endpoint = None
            self.server_events = EventLog(self.state_dir / "server.log", logger_name="octopus.server")
            endpoint = start_server(
                manifest,
                bus,
                host=self.host,
                port=port,
                manifest_path=self.manifest_path if self.manifest_path.exists() else None,
                events=self.server_events,
                heartbeat_s=self.heartbeat_s,
            )
            record = DeploymentRecord(manifest.manifest_hash, (endpoint.host, endpoint.port), time.time())
            if wait_healthy(endpoint.url, manifest.manifest_hash, self.health_timeout_s) is None:
                endpoint.stop()
                raise LaunchTimeout(f"{endpoint.url} not healthy within {self.health_timeout_s} s")
            record.health = "healthy"
            record.last_probe_at = time.time()
            record.save(self.record_path)
            self.endpoint, self.record = endpoint, record
            if self.events is not None:
                self.events.info("pipeline", f"deployed {manifest.manifest_hash[:12]} at {endpoint.url}")
            return record

    def stop(self) -> None:
        if self.endpoint is not None:
            self.endpoint.stop()
            self.endpoint = None
        if self.record is not None:
            self.record.health = "down"
            self.record.save(self.record_path)


class ProcessDeployer:
    """Launches ``python -m octopus serve`` detached and tracks it by pid."""

    def __init__(
        self,
        state_dir: Path,
        host: str = "127.0.0.1",
        port: int = 8300,
        serve_args: list[str] | None = None,
        events: EventLog | None = None,
        health_timeout_s: float = HEALTH_TIMEOUT_S,
    ):
        self.state_dir = Path(state_dir)
        self.host = host
        self.port = port
        self.serve_args = list(serve_args or [])
        self.events = events
        self.health_timeout_s = health_timeout_s
        self.record: DeploymentRecord | None = None

    @property
    def record_path(self) -> Path:
        return self.state_dir / "deployment.json"

    def _existing(self) -> DeploymentRecord | None:
        if not self.record_path.exists():
            return None
        try:
            return DeploymentRecord.load(self.record_path)
        except (OSError, ValueError, KeyError):
            return None

    def _port_free(self, port: int) -> bool:
        import socket

        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            try:
                s.bind((self.host, port))
            except OSError:
                return False
        return True

    def launch(self, manifest: ServerManifest, bus: DeviceBus, skip_deps: bool = False, force: bool = False) -> DeploymentRecord:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.state_dir / ".deploy.lock"), timeout=30):
            old = self._existing()
            if not force and old is not None and old.manifest_hash == manifest.manifest_hash and refresh_health(old).health == "healthy":
                self.record = old
                return old
            if not skip_deps:
                report = check_dependencies(manifest, bus)
                if report.missing:
                    raise DependencyNotSatisfied(report.missing_names)
            if old is not None and old.pid:
                stop_pid(old.pid)
            port = old.endpoint[1] if old is not None and old.pid and self.port == 0 else self.port
            if not self._port_free(port):
                raise PortInUse(f"{self.host}:{port} is already in use")
            argv = [
                sys.executable, "-m", "octopus", "serve",
                "--state-dir", str(self.state_dir), "--host", self.host, "--port", str(port),
                *self.serve_args,
            ]
            logf = open(self.state_dir / "server.out", "ab")
            proc = subprocess.Popen(argv, stdout=logf, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL, start_new_session=True)
            logf.close()
            record = DeploymentRecord(manifest.manifest_hash, (self.host, port), time.time(), pid=proc.pid)
            if wait_healthy(record.url, manifest.manifest_hash, self.health_timeout_s) is None:
                stop_pid(proc.pid)
                raise LaunchTimeout(f"{record.url} not healthy within {self.health_timeout_s} s")
            record.health = "healthy"
            record.last_probe_at = time.time()
            record.save(self.record_path)
            self.record = record
            return record

    def stop(self) -> None:
        rec = self.record or self._existing()
        if rec is None:
            return
        if rec.pid:
            stop_pid(rec.pid)
        rec.health = "down"
        rec.save(self.record_path)


def stop_pid(pid: int, timeout_s: float = 5.0) -> None:
    try:
        os.kill(pid, signal.SIGTERM)
    except (ProcessLookupError, PermissionError):
        return
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        try:
            done, _ = os.waitpid(pid, os.WNOHANG)
            if done == pid:
                return
        except ChildProcessError:
            # not our child: poll for existence instead
            try:
                os.kill(pid, 0)
            except ProcessLookupError:
                return
        time.sleep(0.05)
    try:
        os.kill(pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
