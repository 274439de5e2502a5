"""Identify stage: map device records to scored capability verbs.

Local database hits carry a fixed prior of 0.95; agent-derived capabilities
default to 0.8; anything under the exposure threshold (0.5) is never served.
The installation-wide cap (30 by default) is applied across all devices.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from octopus.agentport import AgentPort, AgentRequest, AgentUnavailable
from octopus.canonical import write_pretty
from octopus.platform import DeviceRecord
from octopus.specs import SpecDocument, render_prompt

LOCAL_DB_CONFIDENCE = 0.95
AGENT_CONFIDENCE = 0.8
DEFAULT_THRESHOLD = 0.5
DEFAULT_CAP = 30

KINDS = ("actuator", "sensor", "comm", "meta")
KIND_ORDER = {k: i for i, k in enumerate(KINDS)}
VERB = re.compile(r"^[a-z][a-z0-9_]*$")
_DB_KEY = re.compile(r"^[0-9A-Fa-f]{4}:[0-9A-Fa-f]{4}$")


@dataclass(frozen=True)
class ParamHint:
    name: str
    type: str
    units: str | None = None
    min: float | None = None
    max: float | None = None
    choices: tuple = ()
    required: bool = True

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "type": self.type, "required": self.required}
        if self.units is not None:
            d["units"] = self.units
        if self.min is not None:
            d["min"] = self.min
        if self.max is not None:
            d["max"] = self.max
        if self.choices:
            d["choices"] = list(self.choices)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParamHint":
        return cls(
            name=d["name"],
            type=d.get("type", "string"),
            units=d.get("units"),
            min=d.get("min"),
            max=d.get("max"),
            choices=tuple(d.get("choices") or ()),
            required=bool(d.get("required", True)),
        )


@dataclass(frozen=True)
class Capability:
    verb: str
    kind: str
    param_hints: tuple[ParamHint, ...] = ()
    source: str = "local_db"
    confidence: float = LOCAL_DB_CONFIDENCE
    description: str = ""

    def __post_init__(self) -> None:
        if not VERB.match(self.verb):
            raise ValueError(f"capability verb {self.verb!r} is not snake_case")
        if self.kind not in KIND_ORDER:
            raise ValueError(f"unknown capability kind {self.kind!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "verb": self.verb,
            "kind": self.kind,
            "params": [p.to_dict() for p in self.param_hints],
            "source": self.source,
            "confidence": self.confidence,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d: Mapping, source: str | None = None, confidence: float | None = None) -> "Capability":
        return cls(
            verb=d["verb"],
            kind=d["kind"],
            param_hints=tuple(ParamHint.from_dict(p) for p in d.get("params") or ()),
            source=source or d.get("source", "local_db"),
            confidence=float(confidence if confidence is not None else d.get("confidence", LOCAL_DB_CONFIDENCE)),
            description=d.get("description", ""),
        )


@dataclass(frozen=True)
class IdentifiedDevice:
    record: DeviceRecord
    capabilities: tuple[Capability, ...]
    identity_note: str = ""
    name: str = ""

    @property
    def device_confidence(self) -> float:
        return max((c.confidence for c in self.capabilities), default=0.0)

    def to_dict(self) -> dict:
        return {
            "record": self.record.to_dict(),
            "capabilities": [c.to_dict() for c in self.capabilities],
            "identity_note": self.identity_note,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IdentifiedDevice":
        return cls(
            record=DeviceRecord.from_dict(d["record"]),
            capabilities=tuple(Capability.from_dict(c) for c in d["capabilities"]),
            identity_note=d.get("identity_note", ""),
            name=d.get("name", ""),
        )


@dataclass
class DeviceDatabase:
    entries: dict[tuple[int, int], tuple[str, tuple[Capability, ...]]] = field(default_factory=dict)
    version: str = "0"

    @classmethod
    def from_dict(cls, data: Mapping) -> "DeviceDatabase":
        # top-level map "vvvv:pppp" -> entry; a "version" string key is allowed
        entries = {}
        for key, entry in data.items():
            if not _DB_KEY.match(key):
                continue
            vid, pid = (int(x, 16) for x in key.split(":"))
            caps = tuple(
                Capability.from_dict(c, source="local_db", confidence=LOCAL_DB_CONFIDENCE)
                for c in entry.get("capabilities", [])
            )
            entries[(vid, pid)] = (entry["name"], caps)
        return cls(entries, str(data.get("version", "0")))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "DeviceDatabase":
        if path is None:
            path = Path(str(resources.files("octopus") / "data" / "db" / "devices.json"))
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def lookup_local(db: DeviceDatabase, record: DeviceRecord) -> IdentifiedDevice | None:
    if record.vendor_id is None or record.product_id is None:
        return None
    hit = db.entries.get((record.vendor_id, record.product_id))
    if hit is None:
        return None
    name, caps = hit
    caps = tuple(replace(c, source="local_db", confidence=LOCAL_DB_CONFIDENCE) for c in caps)
    return IdentifiedDevice(record, caps, f"local database match: {name} ({record.vid_pid})", name)


def identify_context(record: DeviceRecord) -> dict[str, str]:
    return {
        "stable_key": record.stable_key,
        "vid_pid": record.vid_pid,
        "description": record.description or "(none)",
        "source_line": record.source_line,
        "bus": record.bus,
    }


def identify_with_agent(record: DeviceRecord, spec: SpecDocument, agent: AgentPort) -> IdentifiedDevice:
    """Ask the agent; a response that fails schema validation yields no capabilities."""
    prompt = render_prompt(spec, identify_context(record))
    resp = agent.call(AgentRequest("identify_device", prompt))
    if not resp.ok:
        return IdentifiedDevice(record, (), f"agent response rejected by schema check: {'; '.join(resp.diagnostics)}")
    parsed = resp.parsed
    try:
        caps = tuple(
            Capability.from_dict(c, source="agent", confidence=c.get("confidence", AGENT_CONFIDENCE))
            for c in parsed["capabilities"]
        )
    except (ValueError, KeyError, TypeError) as exc:
        return IdentifiedDevice(record, (), f"agent response rejected by schema check: {exc}")
    note = parsed.get("note") or f"identified by {resp.agent_id}"
    return IdentifiedDevice(record, caps, note, parsed.get("name", ""))


def identify_all(
    records: Iterable[DeviceRecord],
    db: DeviceDatabase,
    spec: SpecDocument,
    agent: AgentPort,
    events=None,
    max_workers: int = 4,
) -> list[IdentifiedDevice]:
    """Local lookup first; unresolved devices go to the agent concurrently.

    An unreachable agent leaves that device with zero capabilities.
    """
    records = list(records)
    out: dict[str, IdentifiedDevice] = {}
    pending = []
    for r in records:
        hit = lookup_local(db, r)
        if hit is not None:
            out[r.stable_key] = hit
        else:
            pending.append(r)

    def ask(r: DeviceRecord) -> IdentifiedDevice:
        try:
            return identify_with_agent(r, spec, agent)
        except AgentUnavailable as exc:
            if events is not None:
                events.warn("pipeline", f"identify: agent unavailable for {r.stable_key}: {exc}", device_key=r.stable_key)
            return IdentifiedDevice(r, (), f"agent unavailable: {exc}")

    if pending:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for dev in pool.map(ask, pending):
                out[dev.record.stable_key] = dev
    return [out[r.stable_key] for r in records]


def selection_key(cap: Capability, stable_key: str) -> tuple:
    return (-cap.confidence, KIND_ORDER[cap.kind], cap.verb, stable_key)


def score_and_cap(
    devices: Iterable[IdentifiedDevice],
    cap: int = DEFAULT_CAP,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[IdentifiedDevice]:
    """Drop capabilities below ``threshold``, rank the rest globally, keep ``cap``.

    Ranking: confidence desc, kind (actuator, sensor, comm, meta), verb asc,
    stable key asc. Devices are returned in the order of their best surviving
    capability, each holding its selected capabilities in rank order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    devices = list(devices)
    by_key = {d.record.stable_key: d for d in devices}
    pool = [
        (selection_key(c, d.record.stable_key), d.record.stable_key, c)
        for d in devices
        for c in d.capabilities
        if c.confidence >= threshold
    ]
    pool.sort(key=lambda t: t[0])
    chosen: dict[str, list[Capability]] = {}
    for _, key, c in pool[:cap]:
        chosen.setdefault(key, []).append(c)
    return [replace(by_key[k], capabilities=tuple(caps)) for k, caps in chosen.items()]


def ranked_capabilities(devices: Iterable[IdentifiedDevice]) -> list[tuple[IdentifiedDevice, Capability]]:
    """Flatten selected devices back into global rank order."""
    pairs = [(d, c) for d in devices for c in d.capabilities]
    pairs.sort(key=lambda p: selection_key(p[1], p[0].record.stable_key))
    return pairs


def save_identified(path: Path, devices: Iterable[IdentifiedDevice]) -> None:
    write_pretty(path, [d.to_dict() for d in devices])


def load_identified(path: Path) -> list[IdentifiedDevice]:
    return [IdentifiedDevice.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
