"""Probe stage: host detection, enumerator execution and listing parsers.

Three listing formats are understood: the ``lsusb`` line format, the macOS
``system_profiler SPUSBDataType`` tree, and ``gpiodetect`` chip lines. Every
parser is total: any text (or bytes) yields a possibly-empty record list and
never raises.
"""

from __future__ import annotations

import json
import platform as _host
import re
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from octopus.canonical import sha256_hex, write_pretty
from octopus.events import EventLog

OS_FAMILIES = ("linux", "macos", "windows_wsl", "simulated")
ARCHES = ("x86_64", "aarch64", "other")
ENUMERATORS = ("usb_list", "system_profile", "gpio_detect", "simulated_bus")
BUSES = ("usb", "gpio", "i2c", "virtual")

# Dedup priority when the same device shows up in several listings.
PARSER_PRIORITY = ("usb_list", "system_profile", "gpio_detect", "simulated_bus")

COMMANDS = {
    "usb_list": ["lsusb"],
    "system_profile": ["system_profiler", "SPUSBDataType"],
    "gpio_detect": ["gpiodetect"],
}
ENUMERATOR_TIMEOUT_S = 15.0


@dataclass(frozen=True)
class PlatformDescriptor:
    os_family: str
    arch: str
    available_enumerators: frozenset[str]

    def __post_init__(self) -> None:
        simulated = self.os_family == "simulated"
        if simulated != (self.available_enumerators == frozenset({"simulated_bus"})):
            raise ValueError("simulated os_family requires exactly the simulated_bus enumerator")

    def to_dict(self) -> dict:
        return {
            "os_family": self.os_family,
            "arch": self.arch,
            "available_enumerators": sorted(self.available_enumerators),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlatformDescriptor":
        return cls(d["os_family"], d["arch"], frozenset(d["available_enumerators"]))


@dataclass(frozen=True)
class DeviceRecord:
    bus: str
    vendor_id: int | None
    product_id: int | None
    description: str
    source_line: str
    serial: str | None = None
    index: int = 0
    meta: Mapping[str, str] = field(default_factory=dict)

    @property
    def vid_pid(self) -> str:
        if self.vendor_id is None or self.product_id is None:
            return "-:-"
        return f"{self.vendor_id:04x}:{self.product_id:04x}"

    @property
    def stable_key(self) -> str:
        tail = self.serial if self.serial else str(self.index)
        return f"{self.bus}:{self.vid_pid}:{tail}"

    def to_dict(self) -> dict:
        return {
            "bus": self.bus,
            "vendor_id": self.vendor_id,
            "product_id": self.product_id,
            "serial": self.serial,
            "index": self.index,
            "description": self.description,
            "source_line": self.source_line,
            "meta": dict(self.meta),
            "stable_key": self.stable_key,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceRecord":
        return cls(
            bus=d["bus"],
            vendor_id=d.get("vendor_id"),
            product_id=d.get("product_id"),
            description=d.get("description", ""),
            source_line=d.get("source_line", ""),
            serial=d.get("serial"),
            index=int(d.get("index", 0)),
            meta=dict(d.get("meta") or {}),
        )


def compute_inventory_hash(keys: Iterable[str]) -> str:
    return sha256_hex("\n".join(sorted(keys)))


@dataclass(frozen=True)
class HardwareInventory:
    taken_at: float
    platform: PlatformDescriptor
    devices: tuple[DeviceRecord, ...]
    inventory_hash: str

    def by_key(self) -> dict[str, DeviceRecord]:
        return {d.stable_key: d for d in self.devices}

    def to_dict(self) -> dict:
        return {
            "taken_at": self.taken_at,
            "platform": self.platform.to_dict(),
            "devices": [d.to_dict() for d in self.devices],
            "inventory_hash": self.inventory_hash,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HardwareInventory":
        devices = tuple(DeviceRecord.from_dict(x) for x in d["devices"])
        inv = cls(float(d["taken_at"]), PlatformDescriptor.from_dict(d["platform"]), devices, d["inventory_hash"])
        if compute_inventory_hash(r.stable_key for r in devices) != inv.inventory_hash:
            raise ValueError("inventory_hash does not match device keys")
        return inv

    def save(self, path: Path) -> None:
        write_pretty(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "HardwareInventory":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class InventoryDiff:
    added: tuple[str, ...]
    removed: tuple[str, ...]
    changed: tuple[str, ...]

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.changed)


def diff_inventory(old: HardwareInventory, new: HardwareInventory) -> InventoryDiff:
    """Keys added, removed, or re-enumerated (same key, different raw line)."""
    a, b = old.by_key(), new.by_key()
    return InventoryDiff(
        added=tuple(sorted(set(b) - set(a))),
        removed=tuple(sorted(set(a) - set(b))),
        changed=tuple(sorted(k for k in set(a) & set(b) if a[k].source_line != b[k].source_line)),
    )


# -- host detection -----------------------------------------------------------


def _arch() -> str:
    machine = _host.machine().lower()
    if machine in ("x86_64", "amd64"):
        return "x86_64"
    if machine in ("aarch64", "arm64"):
        return "aarch64"
    return "other"


def _is_wsl() -> bool:
    try:
        return "microsoft" in Path("/proc/version").read_text().lower()
    except OSError:
        return False


def detect_platform(simulate: bool = False, events: EventLog | None = None) -> PlatformDescriptor:
    if simulate:
        return PlatformDescriptor("simulated", _arch(), frozenset({"simulated_bus"}))
    if sys.platform.startswith("linux"):
        family = "windows_wsl" if _is_wsl() else "linux"
    elif sys.platform == "darwin":
        family = "macos"
    elif sys.platform in ("win32", "cygwin"):
        family = "windows_wsl"
    else:
        family = "linux"
        if events is not None:
            events.warn("pipeline", f"unrecognised host platform {sys.platform!r}; enumerators disabled")
        return PlatformDescriptor(family, _arch(), frozenset())
    found = {name for name, argv in COMMANDS.items() if shutil.which(argv[0])}
    return PlatformDescriptor(family, _arch(), frozenset(found))


def run_enumerators(
    platform: PlatformDescriptor,
    replay: Mapping[str, str | Path] | None = None,
    bus=None,
    events: EventLog | None = None,
) -> dict[str, str]:
    """Run (or replay) each available enumerator and return its raw output.

    Replay values may be literal text or a path to a fixture file. In replay
    mode no external command is executed. A failing enumerator contributes
    empty output and a warning event.
    """
    out: dict[str, str] = {}
    if replay is not None:
        for name, src in replay.items():
            out[name] = Path(src).read_text(encoding="utf-8") if isinstance(src, Path) else str(src)
        return out
    for name in sorted(platform.available_enumerators):
        if name == "simulated_bus":
            out[name] = bus.snapshot_listing() if bus is not None else ""
            continue
        argv = COMMANDS[name]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=ENUMERATOR_TIMEOUT_S)
        except (OSError, subprocess.SubprocessError) as exc:
            out[name] = ""
            if events is not None:
                events.warn("pipeline", f"enumerator {name} failed: {exc}", enumerator=name)
            continue
        if proc.returncode != 0:
            out[name] = ""
            if events is not None:
                events.warn(
                    "pipeline",
                    f"enumerator {name} exited {proc.returncode}: {proc.stderr.strip()[:200]}",
                    enumerator=name,
                )
            continue
        out[name] = proc.stdout
    return out


# -- parsers ------------------------------------------------------------------


class Records(list):
    """A list of DeviceRecord that also reports how many lines were skipped."""

    def __init__(self, items=(), skipped: int = 0):
        super().__init__(items)
        self.skipped = skipped


def _as_text(text: str | bytes | None) -> str:
    if text is None:
        return ""
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8", errors="replace")
    return str(text)


def _assign_indices(records: list[DeviceRecord]) -> list[DeviceRecord]:
    counts: dict[tuple, int] = {}
    out = []
    for r in records:
        if r.serial:
            out.append(r)
            continue
        k = (r.bus, r.vendor_id, r.product_id)
        i = counts.get(k, 0)
        counts[k] = i + 1
        out.append(DeviceRecord(r.bus, r.vendor_id, r.product_id, r.description, r.source_line, None, i, r.meta))
    return out


USB_LINE = re.compile(
    r"^Bus (\d{3}) Device (\d{3}): ID ([0-9A-Fa-f]{4}):([0-9A-Fa-f]{4})(?:[ \t]+(.*?))?[ \t]*$"
)


def parse_usb_listing(text: str | bytes) -> Records:
    """Parse ``lsusb`` output; non-matching, non-blank lines are counted as skipped."""
    found, skipped = [], 0
    for line in _as_text(text).splitlines():
        m = USB_LINE.match(line)
        if not m:
            if line.strip():
                skipped += 1
            continue
        bus_no, dev_no, vid, pid, desc = m.groups()
        found.append(
            DeviceRecord(
                bus="usb",
                vendor_id=int(vid, 16),
                product_id=int(pid, 16),
                description=desc or "",
                source_line=line,
                meta={"bus_number": bus_no, "device_number": dev_no},
            )
        )
    return Records(_assign_indices(found), skipped)


_PROFILER_KV = re.compile(r"^(\s*)([^:]+?):\s*(.*?)\s*$")
_HEX = re.compile(r"0x([0-9A-Fa-f]{1,4})\b")


def parse_profiler_listing(text: str | bytes) -> Records:
    """Parse the indented ``system_profiler SPUSBDataType`` tree.

    A device is a header line (``Name:``) whose direct children include both
    ``Product ID`` and ``Vendor ID``. The record's ``source_line`` is the header
    plus its property lines, newline-joined, verbatim.
    """
    lines = _as_text(text).splitlines()
    found, skipped = [], 0
    i = 0
    while i < len(lines):
        line = lines[i]
        m = _PROFILER_KV.match(line)
        if not m or m.group(3) != "":
            i += 1
            continue
        indent = len(m.group(1))
        name = m.group(2).strip()
        props: dict[str, str] = {}
        block = [line]
        j = i + 1
        while j < len(lines):
            nxt = lines[j]
            if not nxt.strip():
                j += 1
                if props:
                    break
                continue
            km = _PROFILER_KV.match(nxt)
            if not km or len(km.group(1)) <= indent or km.group(3) == "":
                break
            props[km.group(2).strip()] = km.group(3)
            block.append(nxt)
            j += 1
        if "Product ID" in props and "Vendor ID" in props:
            pm, vm = _HEX.search(props["Product ID"]), _HEX.search(props["Vendor ID"])
            if pm and vm:
                serial = props.get("Serial Number") or None
                found.append(
                    DeviceRecord(
                        bus="usb",
                        vendor_id=int(vm.group(1), 16),
                        product_id=int(pm.group(1), 16),
                        description=name,
                        source_line="\n".join(block),
                        serial=serial,
                    )
                )
            else:
                skipped += 1
            i = j
            continue
        i += 1
    return Records(_assign_indices(found), skipped)


GPIO_LINE = re.compile(r"^(gpiochip\d+) \[([^\]]*)\] \((\d+) lines?\)\s*$")


def parse_gpio_listing(text: str | bytes) -> Records:
    """Parse ``gpiodetect``: one chip-level record per ``gpiochipN [label] (M lines)``."""
    found, skipped = [], 0
    for line in _as_text(text).splitlines():
        m = GPIO_LINE.match(line)
        if not m:
            if line.strip():
                skipped += 1
            continue
        chip, label, n = m.groups()
        found.append(
            DeviceRecord(
                bus="gpio",
                vendor_id=None,
                product_id=None,
                description=label,
                source_line=line,
                serial=chip,
                meta={"lines": n, "chip": chip},
            )
        )
    return Records(found, skipped)


PARSERS = {
    "usb_list": parse_usb_listing,
    "system_profile": parse_profiler_listing,
    "gpio_detect": parse_gpio_listing,
    "simulated_bus": parse_usb_listing,
}


def parse_outputs(raw: Mapping[str, str]) -> list[list[DeviceRecord]]:
    """Parse raw enumerator output in dedup-priority order."""
    return [list(PARSERS[name](raw[name])) for name in PARSER_PRIORITY if name in raw]


def merge_inventory(
    platform: PlatformDescriptor,
    records: Iterable[Iterable[DeviceRecord]],
    taken_at: float | None = None,
) -> HardwareInventory:
    """Dedup by stable key (first occurrence wins), sort, and hash."""
    kept: dict[str, DeviceRecord] = {}
    for group in records:
        for r in group:
            kept.setdefault(r.stable_key, r)
    devices = tuple(kept[k] for k in sorted(kept))
    return HardwareInventory(
        taken_at=time.time() if taken_at is None else taken_at,
        platform=platform,
        devices=devices,
        inventory_hash=compute_inventory_hash(kept),
    )


def probe(
    platform: PlatformDescriptor,
    bus=None,
    replay: Mapping[str, str | Path] | None = None,
    events: EventLog | None = None,
) -> HardwareInventory:
    raw = run_enumerators(platform, replay=replay, bus=bus, events=events)
    return merge_inventory(platform, parse_outputs(raw))
