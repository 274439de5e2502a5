"""Interface and serve stages: tool schemas, agent-drafted handler plans, and
the server manifest that ties them to their provenance."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from octopus import __version__
from octopus.agentport import AgentPort, AgentRequest
from octopus.canonical import canonical_bytes, sha256_hex, write_canonical
from octopus.identify import Capability, ParamHint
from octopus.platform import DeviceRecord, HardwareInventory
from octopus.plan import HandlerPlan, PlanFormatError, plan_from_dict, validate_plan
from octopus.specs import SpecDocument, SpecSet, render_prompt

PTYPES = ("integer", "number", "string", "boolean", "enumerated")
_HINT_TYPES = {
    "int": "integer",
    "integer": "integer",
    "float": "number",
    "number": "number",
    "str": "string",
    "string": "string",
    "bool": "boolean",
    "boolean": "boolean",
    "enum": "enumerated",
    "enumerated": "enumerated",
}


class PlanInvalid(Exception):
    def __init__(self, reasons: list[str]):
        super().__init__("; ".join(reasons))
        self.reasons = list(reasons)


class DuplicateToolName(Exception):
    pass


class ManifestTampered(Exception):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    ptype: str
    units: str | None = None
    min: float | None = None
    max: float | None = None
    choices: tuple = ()
    required: bool = True

    def __post_init__(self) -> None:
        if self.ptype not in PTYPES:
            raise ValueError(f"unknown parameter type {self.ptype!r}")
        if self.min is not None and self.max is not None and self.min > self.max:
            raise ValueError(f"{self.name}: min > max")
        if self.ptype == "enumerated" and not self.choices:
            raise ValueError(f"{self.name}: enumerated parameter needs choices")
        if self.ptype not in ("integer", "number") and (self.min is not None or self.max is not None):
            raise ValueError(f"{self.name}: bounds only apply to numeric parameters")

    def json_schema(self) -> dict:
        if self.ptype == "enumerated":
            s: dict = {"enum": list(self.choices)}
        else:
            s = {"type": self.ptype}
            if self.min is not None:
                s["minimum"] = self.min
            if self.max is not None:
                s["maximum"] = self.max
        if self.units:
            s["description"] = f"{self.name} in {self.units}"
        return s

    def check(self, value: Any) -> str | None:
        """Return a violation message for ``value`` or None."""
        if self.ptype == "boolean":
            return None if isinstance(value, bool) else f"{self.name} must be a boolean"
        if self.ptype == "string":
            return None if isinstance(value, str) else f"{self.name} must be a string"
        if self.ptype == "enumerated":
            return None if value in self.choices else f"{self.name} must be one of {list(self.choices)}"
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return f"{self.name} must be a{'n integer' if self.ptype == 'integer' else ' number'}"
        if self.ptype == "integer" and not (isinstance(value, int) or float(value).is_integer()):
            return f"{self.name} must be an integer"
        if not math.isfinite(value):
            return f"{self.name} must be finite"
        if (self.min is not None and value < self.min) or (self.max is not None and value > self.max):
            return f"{self.name} out of range [{self.min}, {self.max}]"
        return None

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "ptype": self.ptype, "required": self.required}
        for k in ("units", "min", "max"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.choices:
            d["choices"] = list(self.choices)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParamSpec":
        return cls(
            d["name"], d["ptype"], d.get("units"), d.get("min"), d.get("max"),
            tuple(d.get("choices") or ()), bool(d.get("required", True)),
        )

    @classmethod
    def from_hint(cls, hint: ParamHint) -> "ParamSpec":
        ptype = _HINT_TYPES.get(hint.type.lower(), "string")
        numeric = ptype in ("integer", "number")
        return cls(
            name=hint.name,
            ptype=ptype,
            units=hint.units,
            min=hint.min if numeric else None,
            max=hint.max if numeric else None,
            choices=tuple(hint.choices) if ptype == "enumerated" else (),
            required=hint.required,
        )


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    params: tuple[ParamSpec, ...]
    device_key: str
    kind: str = "meta"

    def __post_init__(self) -> None:
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.name}: duplicate parameter names")

    def input_schema(self) -> dict:
        return {
            "type": "object",
            "properties": {p.name: p.json_schema() for p in self.params},
            "required": [p.name for p in self.params if p.required],
            "additionalProperties": False,
        }

    def check_arguments(self, args: Any) -> list[str]:
        if not isinstance(args, Mapping):
            return ["arguments must be an object"]
        known = {p.name: p for p in self.params}
        problems = [f"unexpected argument {k}" for k in args if k not in known]
        for p in self.params:
            if p.name not in args:
                if p.required:
                    problems.append(f"missing required argument {p.name}")
                continue
            msg = p.check(args[p.name])
            if msg:
                problems.append(msg)
        return problems

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "params": [p.to_dict() for p in self.params],
            "device_key": self.device_key,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToolSchema":
        return cls(d["name"], d["description"], tuple(ParamSpec.from_dict(p) for p in d["params"]), d["device_key"], d.get("kind", "meta"))


def unique_name(verb: str, taken: set[str]) -> str:
    name, n = verb, 2
    while name in taken:
        name = f"{verb}_{n}"
        n += 1
    return name


def emit_tool_schema(
    capability: Capability,
    device: DeviceRecord,
    identity_note: str = "",
    taken: set[str] | None = None,
) -> ToolSchema:
    """One typed tool per capability. ``taken`` collects names already used in
    this manifest; clashes get ``_2``, ``_3`` ... and the new name is added."""
    taken = taken if taken is not None else set()
    name = unique_name(capability.verb, taken)
    taken.add(name)
    head = capability.description or capability.verb.replace("_", " ").capitalize()
    desc = f"{head}. Device: {device.description or device.stable_key} [{device.stable_key}]."
    if identity_note:
        desc += f" Identification: {identity_note}"
    params = tuple(ParamSpec.from_hint(h) for h in capability.param_hints)
    return ToolSchema(name, desc, params, device.stable_key, capability.kind)


def plan_context(tool: ToolSchema, device: DeviceRecord, errors: list[str]) -> dict[str, str]:
    return {
        "tool_name": tool.name,
        "device_key": tool.device_key,
        "device_description": device.description,
        "tool_schema_json": json.dumps(tool.input_schema(), sort_keys=True, indent=2),
        "validation_errors": "\n".join(f"- {e}" for e in errors) if errors else "(none)",
    }


def request_plan(agent: AgentPort, purpose: str, spec: SpecDocument, context: Mapping[str, str], tool: ToolSchema) -> tuple[HandlerPlan | None, list[str]]:
    """One agent round trip: returns (plan, []) or (None/plan, violations)."""
    resp = agent.call(AgentRequest(purpose, render_prompt(spec, context)))
    if not resp.ok:
        return None, list(resp.diagnostics)
    try:
        plan = plan_from_dict(resp.parsed)
    except PlanFormatError as exc:
        return None, [str(exc)]
    problems = validate_plan(plan, tool)
    return (plan, problems)


def draft_handler_plan(tool: ToolSchema, device: DeviceRecord, spec: SpecDocument, agent: AgentPort) -> HandlerPlan:
    """Ask the agent for a plan; on validation failure re-prompt once with the
    problems appended. Raises PlanInvalid after the second failure."""
    errors: list[str] = []
    for _attempt in range(2):
        plan, errors = request_plan(agent, "draft_plan", spec, plan_context(tool, device, errors), tool)
        if plan is not None and not errors:
            return plan
    raise PlanInvalid(errors)


@dataclass(frozen=True)
class Provenance:
    inventory_hash: str
    spec_hashes: Mapping[str, str]
    agent_id: str
    created_at: float

    def to_dict(self) -> dict:
        return {
            "inventory_hash": self.inventory_hash,
            "spec_hashes": dict(sorted(self.spec_hashes.items())),
            "agent_id": self.agent_id,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class ServerManifest:
    name: str
    version: str
    endpoint: tuple[str, int]
    cap: int
    tools: tuple[tuple[ToolSchema, HandlerPlan], ...]
    provenance: Provenance
    manifest_hash: str = ""

    def body(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "endpoint": {"host": self.endpoint[0], "port": self.endpoint[1]},
            "cap": self.cap,
            "tools": [{"schema": s.to_dict(), "plan": p.to_dict()} for s, p in self.tools],
            "provenance": self.provenance.to_dict(),
            "manifest_hash": self.manifest_hash,
        }

    def compute_hash(self) -> str:
        d = self.body()
        d["manifest_hash"] = ""
        return sha256_hex(canonical_bytes(d))

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.body())

    def tool(self, name: str) -> tuple[ToolSchema, HandlerPlan]:
        for s, p in self.tools:
            if s.name == name:
                return s, p
        raise KeyError(name)

    @property
    def tool_names(self) -> list[str]:
        return [s.name for s, _ in self.tools]

    def save(self, path: Path) -> bytes:
        return write_canonical(path, self.body())


def manifest_from_dict(d: Mapping) -> ServerManifest:
    pv = d["provenance"]
    tools = []
    for t in d["tools"]:
        tools.append((ToolSchema.from_dict(t["schema"]), plan_from_dict(t["plan"])))
    return ServerManifest(
        name=d["name"],
        version=d["version"],
        endpoint=(d["endpoint"]["host"], int(d["endpoint"]["port"])),
        cap=int(d["cap"]),
        tools=tuple(tools),
        provenance=Provenance(pv["inventory_hash"], dict(pv["spec_hashes"]), pv["agent_id"], pv["created_at"]),
        manifest_hash=d["manifest_hash"],
    )


def load_manifest(path: str | Path) -> ServerManifest:
    """Parse and verify; any corruption surfaces as ManifestTampered."""
    try:
        data = json.loads(Path(path).read_bytes().decode("utf-8"))
        manifest = manifest_from_dict(data)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestTampered(f"manifest hash mismatch: cannot parse {path}: {exc}") from exc
    verify_manifest(manifest)
    return manifest


def verify_manifest(manifest: ServerManifest) -> None:
    if manifest.compute_hash() != manifest.manifest_hash:
        raise ManifestTampered("manifest hash mismatch")


def assemble_manifest(
    tools: Iterable[tuple[ToolSchema, HandlerPlan]],
    inventory: HardwareInventory,
    specs: SpecSet,
    endpoint: tuple[str, int],
    agent_id: str = "stub",
    cap: int = 30,
    name: str = "octopus",
    created_at: float | None = None,
) -> ServerManifest:
    tools = tuple(tools)
    seen: set[str] = set()
    for schema, plan in tools:
        if schema.name in seen:
            raise DuplicateToolName(schema.name)
        seen.add(schema.name)
        problems = validate_plan(plan, schema)
        if problems:
            raise PlanInvalid(problems)
    if len(tools) > cap:
        raise ValueError(f"{len(tools)} tools exceed the cap of {cap}")
    provenance = Provenance(inventory.inventory_hash, specs.hashes(), agent_id, time.time() if created_at is None else created_at)
    manifest = ServerManifest(name, __version__, (endpoint[0], int(endpoint[1])), cap, tools, provenance)
    return replace(manifest, manifest_hash=manifest.compute_hash())
