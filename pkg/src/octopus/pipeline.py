"""The orchestrator: probe -> identify -> interface -> serve -> deploy.

Every stage persists its output under ``state_dir`` so later stages (and
the daemon's heal playbooks) can resume from files rather than memory.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from octopus.agentport import AgentPort, StubAgent
from octopus.bus import DeviceBus
from octopus.canonical import write_pretty
from octopus.deploy import Deployer, DeploymentRecord, InstallerPort, StubInstaller
from octopus.events import EventLog
from octopus.identify import (
    DEFAULT_CAP,
    DEFAULT_THRESHOLD,
    DeviceDatabase,
    IdentifiedDevice,
    identify_all,
    load_identified,
    ranked_capabilities,
    save_identified,
    score_and_cap,
)
from octopus.plan import HandlerPlan
from octopus.platform import (
    DeviceRecord,
    HardwareInventory,
    InventoryDiff,
    PlatformDescriptor,
    detect_platform,
    diff_inventory,
    merge_inventory,
    probe,
)
from octopus.specs import SpecSet
from octopus.toolgen import (
    PlanInvalid,
    ServerManifest,
    ToolSchema,
    assemble_manifest,
    draft_handler_plan,
    emit_tool_schema,
)

PIPELINE_STAGES = ("probe", "identify", "interface", "serve", "deploy")
STAGE_STATUS = ("ok", "skipped", "failed")


@dataclass
class StageOutcome:
    status: str = "skipped"
    duration_ms: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        d: dict = {"status": self.status, "duration_ms": self.duration_ms}
        if self.error:
            d["error"] = self.error
        return d


@dataclass
class RunReport:
    stages: dict[str, StageOutcome] = field(default_factory=lambda: {s: StageOutcome() for s in PIPELINE_STAGES})
    tool_count: int = 0
    endpoint: tuple[str, int] | None = None
    manifest_hash: str = ""
    dropped_tools: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.stages.values())

    @property
    def failed_stage(self) -> str | None:
        return next((n for n, s in self.stages.items() if s.status == "failed"), None)

    def to_dict(self) -> dict:
        return {
            "stages": {n: s.to_dict() for n, s in self.stages.items()},
            "tool_count": self.tool_count,
            "endpoint": {"host": self.endpoint[0], "port": self.endpoint[1]} if self.endpoint else None,
            "manifest_hash": self.manifest_hash,
            "dropped_tools": list(self.dropped_tools),
            "ok": self.ok,
        }

    def render(self) -> str:
        lines = []
        for name, s in self.stages.items():
            extra = f"  ({s.error})" if s.error else ""
            lines.append(f"  {name:<10} {s.status:<8} {s.duration_ms:>6} ms{extra}")
        lines.append(f"  tools      {self.tool_count}")
        if self.endpoint:
            lines.append(f"  endpoint   http://{self.endpoint[0]}:{self.endpoint[1]}/mcp")
        if self.manifest_hash:
            lines.append(f"  manifest   {self.manifest_hash}")
        return "\n".join(lines)

    def save(self, path: Path) -> None:
        write_pretty(path, self.to_dict())


@dataclass
class Orchestrator:
    """Holds the collaborators for one installation and runs stages on demand."""

    state_dir: Path
    specs: SpecSet
    bus: DeviceBus
    agent: AgentPort = field(default_factory=StubAgent)
    db: DeviceDatabase = field(default_factory=DeviceDatabase.load)
    cap: int = DEFAULT_CAP
    threshold: float = DEFAULT_THRESHOLD
    host: str = "127.0.0.1"
    port: int = 8300
    skip_deps: bool = False
    simulate: bool = True
    replay: Mapping[str, Any] | None = None
    installer: InstallerPort | None = None
    deployer: Any = None
    max_workers: int = 4
    platform: PlatformDescriptor | None = None
    events: EventLog | None = None

    def __post_init__(self) -> None:
        self.state_dir = Path(self.state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        if self.events is None:
            self.events = EventLog(self.state_dir / "pipeline.log", logger_name="octopus.pipeline")
        if self.installer is None and hasattr(self.bus, "set_dependency"):
            self.installer = StubInstaller(self.bus)
        if self.deployer is None:
            self.deployer = Deployer(self.state_dir, self.host, self.port)

    # -- paths

    @property
    def inventory_path(self) -> Path:
        return self.state_dir / "inventory.json"

    @property
    def identified_path(self) -> Path:
        return self.state_dir / "identified.json"

    @property
    def manifest_path(self) -> Path:
        return self.state_dir / "manifest.json"

    @property
    def report_path(self) -> Path:
        return self.state_dir / "report.json"

    # -- stages

    def run_probe(self) -> HardwareInventory:
        if self.platform is None:
            self.platform = detect_platform(self.simulate, self.events)
        inv = probe(self.platform, bus=self.bus, replay=self.replay, events=self.events)
        inv.save(self.inventory_path)
        self.events.info("pipeline", f"probe: {len(inv.devices)} devices, inventory {inv.inventory_hash[:12]}")
        return inv

    def identify_records(self, records: list[DeviceRecord]) -> list[IdentifiedDevice]:
        return identify_all(records, self.db, self.specs["identify"], self.agent, self.events, self.max_workers)

    def select(self, identified: list[IdentifiedDevice]) -> list[IdentifiedDevice]:
        save_identified(self.identified_path, identified)
        selected = score_and_cap(identified, self.cap, self.threshold)
        n = sum(len(d.capabilities) for d in selected)
        self.events.info("pipeline", f"identify: {n} capabilities selected (cap {self.cap}, threshold {self.threshold})")
        return selected

    def run_identify(self, inventory: HardwareInventory) -> list[IdentifiedDevice]:
        return self.select(self.identify_records(list(inventory.devices)))

    def run_interface(self, selected: list[IdentifiedDevice]) -> list[tuple[ToolSchema, IdentifiedDevice]]:
        taken: set[str] = set()
        out = []
        for dev, capability in ranked_capabilities(selected):
            out.append((emit_tool_schema(capability, dev.record, dev.identity_note, taken), dev))
        return out

    def run_serve(
        self,
        tools: list[tuple[ToolSchema, IdentifiedDevice]],
        inventory: HardwareInventory,
        reuse: Mapping[tuple[str, str], HandlerPlan] | None = None,
        report: RunReport | None = None,
    ) -> ServerManifest:
        """Draft a plan per tool (reusing cached plans where given), then assemble.

        A tool whose plan is still invalid after the re-prompt is dropped
        from the manifest and logged rather than failing the whole stage.
        """
        reuse = reuse or {}

        def draft(item: tuple[ToolSchema, IdentifiedDevice]) -> tuple[ToolSchema, HandlerPlan | None, str]:
            schema, dev = item
            cached = reuse.get((schema.name, schema.device_key))
            if cached is not None:
                return schema, cached, ""
            try:
                return schema, draft_handler_plan(schema, dev.record, self.specs["serve"], self.agent), ""
            except PlanInvalid as exc:
                return schema, None, str(exc)

        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            drafted = list(pool.map(draft, tools))
        pairs = []
        for schema, plan, err in drafted:
            if plan is None:
                self.events.error("pipeline", f"serve: dropped {schema.name}: {err}", tool=schema.name, device_key=schema.device_key)
                if report is not None:
                    report.dropped_tools.append(schema.name)
                continue
            pairs.append((schema, plan))
        manifest = assemble_manifest(
            pairs, inventory, self.specs, (self.host, self.port), self.agent.agent_id, self.cap
        )
        manifest.save(self.manifest_path)
        self.events.info("pipeline", f"serve: manifest {manifest.manifest_hash[:12]} with {len(pairs)} tools")
        return manifest

    def run_deploy(self, manifest: ServerManifest) -> DeploymentRecord:
        return self.deployer.launch(manifest, self.bus, skip_deps=self.skip_deps)

    # -- whole pipeline

    def up(self) -> RunReport:
        report = RunReport()
        carry: dict[str, Any] = {}
        steps: list[tuple[str, Callable[[], Any]]] = [
            ("probe", lambda: carry.__setitem__("inventory", self.run_probe())),
            ("identify", lambda: carry.__setitem__("selected", self.run_identify(carry["inventory"]))),
            ("interface", lambda: carry.__setitem__("tools", self.run_interface(carry["selected"]))),
            ("serve", lambda: carry.__setitem__("manifest", self.run_serve(carry["tools"], carry["inventory"], report=report))),
            ("deploy", lambda: carry.__setitem__("record", self.run_deploy(carry["manifest"]))),
        ]
        for name, fn in steps:
            started = time.monotonic()
            try:
                fn()
            except Exception as exc:  # stage boundary: record and stop
                report.stages[name] = StageOutcome("failed", _ms(started), f"{type(exc).__name__}: {exc}")
                self.events.error("pipeline", f"{name} failed: {exc}", stage=name)
                break
            report.stages[name] = StageOutcome("ok", _ms(started))
        if "manifest" in carry:
            report.tool_count = len(carry["manifest"].tools)
            report.manifest_hash = carry["manifest"].manifest_hash
        if "record" in carry:
            report.endpoint = carry["record"].endpoint
        report.save(self.report_path)
        return report

    # -- regeneration (used by heal playbooks)

    def current_plans(self, manifest: ServerManifest | None) -> dict[tuple[str, str], HandlerPlan]:
        if manifest is None:
            return {}
        return {(s.name, s.device_key): p for s, p in manifest.tools}

    def reprobe(self) -> tuple[HardwareInventory, InventoryDiff]:
        old = HardwareInventory.load(self.inventory_path) if self.inventory_path.exists() else None
        new = self.run_probe()
        if old is None:
            old = merge_inventory(new.platform, [])
        return new, diff_inventory(old, new)

    def regenerate(
        self,
        inventory: HardwareInventory,
        changed: set[str] | None = None,
        previous: ServerManifest | None = None,
    ) -> ServerManifest:
        """Rebuild the manifest from ``inventory``.

        Devices in ``changed`` (or all devices, when ``changed`` is None) are
        re-identified and get freshly drafted plans; the others reuse their
        persisted identification and the plans from ``previous``.
        """
        cached: dict[str, IdentifiedDevice] = {}
        if changed is not None and self.identified_path.exists():
            cached = {d.record.stable_key: d for d in load_identified(self.identified_path)}
        fresh_records = [r for r in inventory.devices if changed is None or r.stable_key in changed or r.stable_key not in cached]
        fresh = {d.record.stable_key: d for d in self.identify_records(fresh_records)}
        identified = []
        for r in inventory.devices:
            if r.stable_key in fresh:
                identified.append(fresh[r.stable_key])
            else:
                identified.append(IdentifiedDevice(r, cached[r.stable_key].capabilities, cached[r.stable_key].identity_note, cached[r.stable_key].name))
        selected = self.select(identified)
        tools = self.run_interface(selected)
        reuse = {k: v for k, v in self.current_plans(previous).items() if changed is not None and k[1] not in changed}
        return self.run_serve(tools, inventory, reuse=reuse)


def _ms(started: float) -> int:
    return int((time.monotonic() - started) * 1000)


def read_report(state_dir: Path) -> dict | None:
    path = Path(state_dir) / "report.json"
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))

