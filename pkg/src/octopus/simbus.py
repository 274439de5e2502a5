"""Simulated hardware rig: a 6-joint servo controller, a camera that films it,
and a 16-line GPIO bank, all attached over a virtual USB bus.

The servo protocol is a small original register protocol (not any vendor's):

    write position  FA AF <joint> 01 <lo> <hi> <ck>   ->  FA AF <joint> 00 <lo> <hi>
    read position   FA AF <joint> 02 <ck>             ->  FA AF <joint> 02 <lo> <hi>
    torque on/off   FA AF <joint> 03 <en> <ck>        ->  FA AF <joint> 03 <en> 00
    home all        FA AF FE 04 <ck>                  ->  FA AF FE 04 00 00
    status          FA AF <joint> 05 <ck>             ->  FA AF <joint> 05 <torque> 00
    ping            FA AF FE 06 <ck>                  ->  FA AF FE 06 <count> 00

Angles travel as unsigned 16-bit little endian ``round(angle * 10) + 1800``.
A bad checksum or unknown command answers ``FA AF <joint> FF 00 00`` (NAK).
The checksum byte is the bitwise-not of the sum of all preceding bytes.
"""

from __future__ import annotations

import io
import json
import logging
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
from PIL import Image

from octopus.bus import DeviceNotFound, StepTimeout

log = logging.getLogger(__name__)

FRAME_SIZE = 64
LANE_ROWS = tuple(5 + 10 * j for j in range(6))  # marker row per joint
ANGLE_BIAS = 1800
ANGLE_SCALE = 10


def checksum(data: bytes) -> int:
    return (~sum(data)) & 0xFF


def encode_angle(angle: float) -> int:
    return int(round(angle * ANGLE_SCALE)) + ANGLE_BIAS


def decode_angle(raw: int) -> float:
    return (raw - ANGLE_BIAS) / ANGLE_SCALE


def marker_x(angle: float) -> float:
    """Ground-truth horizontal marker centre for a joint angle (affine)."""
    return 32.0 + angle * (24.0 / 180.0)


def marker_center(joint: int, angle: float) -> tuple[float, float]:
    return marker_x(angle), float(LANE_ROWS[joint - 1])


def render(joints) -> np.ndarray:
    """Pure renderer: gradient background plus a 3x3 white marker per joint."""
    x = np.arange(FRAME_SIZE)
    img = np.tile((40 + x * 100 // (FRAME_SIZE - 1)).astype(np.uint8), (FRAME_SIZE, 1))
    for j, angle in enumerate(joints, start=1):
        cx = int(round(marker_x(angle)))
        cy = LANE_ROWS[j - 1]
        img[cy - 1 : cy + 2, cx - 1 : cx + 2] = 255
    return img


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def estimate_pose(png: bytes) -> list[float]:
    """Invert the renderer: recover joint angles from marker centroids."""
    img = np.asarray(Image.open(io.BytesIO(png)).convert("L"))
    angles = []
    for row in LANE_ROWS:
        band = img[row - 1 : row + 2]
        ys, xs = np.nonzero(band >= 250)
        if len(xs) == 0:
            angles.append(float("nan"))
            continue
        angles.append((xs.mean() - 32.0) * (180.0 / 24.0))
    return angles


class VirtualDevice:
    kind = "generic"

    def __init__(self, vendor_id: int, product_id: int, description: str):
        self.vendor_id = vendor_id
        self.product_id = product_id
        self.description = description
        self._rx = bytearray()

    def reset_rx(self) -> None:
        self._rx.clear()

    def write(self, data: bytes) -> None:
        self._rx.extend(self.respond(bytes(data)))

    def respond(self, data: bytes) -> bytes:
        return b""

    def read(self, length: int) -> bytes | None:
        if len(self._rx) < length:
            return None
        out = bytes(self._rx[:length])
        del self._rx[:length]
        return out

    def power_cycle(self) -> None:
        self.reset_rx()


class VirtualServoController(VirtualDevice):
    kind = "servo_controller"

    def __init__(self, vendor_id: int, product_id: int, description: str, joints: int = 6):
        super().__init__(vendor_id, product_id, description)
        self.joints = [0.0] * joints
        self.torque = [1] * joints

    def _nak(self, joint: int) -> bytes:
        return bytes([0xFA, 0xAF, joint & 0xFF, 0xFF, 0, 0])

    def respond(self, data: bytes) -> bytes:
        if len(data) < 5 or data[:2] != b"\xFA\xAF":
            return self._nak(data[2] if len(data) > 2 else 0)
        joint, cmd = data[2], data[3]
        if checksum(data[:-1]) != data[-1]:
            return self._nak(joint)
        n = len(self.joints)
        single = 1 <= joint <= n
        if cmd == 0x01 and single and len(data) == 7:
            angle = decode_angle(data[4] | (data[5] << 8))
            self.joints[joint - 1] = max(-180.0, min(180.0, angle))
            raw = encode_angle(self.joints[joint - 1])
            return bytes([0xFA, 0xAF, joint, 0x00, raw & 0xFF, raw >> 8])
        if cmd == 0x02 and single and len(data) == 5:
            raw = encode_angle(self.joints[joint - 1])
            return bytes([0xFA, 0xAF, joint, 0x02, raw & 0xFF, raw >> 8])
        if cmd == 0x03 and single and len(data) == 6:
            self.torque[joint - 1] = 1 if data[4] else 0
            return bytes([0xFA, 0xAF, joint, 0x03, self.torque[joint - 1], 0])
        if cmd == 0x04 and joint == 0xFE and len(data) == 5:
            self.joints = [0.0] * n
            return bytes([0xFA, 0xAF, 0xFE, 0x04, 0, 0])
        if cmd == 0x05 and single and len(data) == 5:
            return bytes([0xFA, 0xAF, joint, 0x05, self.torque[joint - 1], 0])
        if cmd == 0x06 and joint == 0xFE and len(data) == 5:
            return bytes([0xFA, 0xAF, 0xFE, 0x06, n, 0])
        return self._nak(joint)

    def power_cycle(self) -> None:
        super().power_cycle()
        self.joints = [0.0] * len(self.joints)


class VirtualCamera(VirtualDevice):
    """64x64 grayscale camera looking at a servo controller.

    Control registers: ``CA 01 <reg> <val> CK`` writes, ``CA 02 <reg> CK``
    reads; 0x10 exposure, 0x11 gain.
    """

    kind = "camera"

    def __init__(self, vendor_id: int, product_id: int, description: str, scene: Callable[[], list] | None = None):
        super().__init__(vendor_id, product_id, description)
        self.scene = scene or (lambda: [0.0] * 6)
        self.registers = {0x10: 128, 0x11: 32}

    def respond(self, data: bytes) -> bytes:
        nak = bytes([0xCA, 0xFF, 0, 0])
        if len(data) < 4 or data[0] != 0xCA or checksum(data[:-1]) != data[-1]:
            return nak
        if data[1] == 0x01 and len(data) == 5 and data[2] in self.registers:
            self.registers[data[2]] = data[3]
            return bytes([0xCA, 0x01, data[2], data[3]])
        if data[1] == 0x02 and len(data) == 4 and data[2] in self.registers:
            return bytes([0xCA, 0x02, data[2], self.registers[data[2]]])
        return nak

    def capture(self) -> bytes:
        return encode_png(render(self.scene()))


class VirtualGpioBank(VirtualDevice):
    """USB GPIO expander. Lines are set through gpio_set steps; frames
    ``6A 02 <line>``, ``6A 03`` (mask), ``6A 04 <lo> <hi>`` (set mask) and
    ``6A 05`` (line count), each followed by CK, answer four bytes."""

    kind = "gpio_bank"

    def __init__(self, vendor_id: int, product_id: int, description: str, lines: int = 16):
        super().__init__(vendor_id, product_id, description)
        self.lines = lines
        self.state = 0

    def set_line(self, line: int, value: int) -> None:
        if not 0 <= line < self.lines:
            raise ValueError(f"gpio line {line} out of range")
        if value:
            self.state |= 1 << line
        else:
            self.state &= ~(1 << line)

    def respond(self, data: bytes) -> bytes:
        nak = bytes([0x6A, 0xFF, 0, 0])
        if len(data) < 3 or data[0] != 0x6A or checksum(data[:-1]) != data[-1]:
            return nak
        cmd = data[1]
        if cmd == 0x02 and len(data) == 4 and data[2] < self.lines:
            return bytes([0x6A, 0x02, data[2], (self.state >> data[2]) & 1])
        if cmd == 0x03 and len(data) == 3:
            return bytes([0x6A, 0x03, self.state & 0xFF, self.state >> 8])
        if cmd == 0x04 and len(data) == 5:
            self.state = (data[2] | (data[3] << 8)) & ((1 << self.lines) - 1)
            return bytes([0x6A, 0x04, self.state & 0xFF, self.state >> 8])
        if cmd == 0x05 and len(data) == 3:
            return bytes([0x6A, 0x05, self.lines & 0xFF, self.lines >> 8])
        return nak

    def power_cycle(self) -> None:
        super().power_cycle()
        self.state = 0


class VirtualRegisterDevice(VirtualDevice):
    """Generic sensor: ``5A <reg> CK`` answers ``5A <reg> <value>``."""

    kind = "register"

    def respond(self, data: bytes) -> bytes:
        if len(data) == 3 and data[0] == 0x5A and checksum(data[:-1]) == data[-1]:
            return bytes([0x5A, data[1], (data[1] * 7) & 0xFF])
        return bytes([0x5A, 0xFF, 0])


@dataclass(frozen=True)
class StepLogEntry:
    seq: int
    device_key: str
    op: str
    call_id: str | None
    at: float

    def to_dict(self) -> dict:
        return {"seq": self.seq, "device_key": self.device_key, "op": self.op, "call_id": self.call_id, "at": self.at}


class _Slot:
    def __init__(self, device: VirtualDevice, device_number: int):
        self.device = device
        self.device_number = device_number
        self.attached = True
        self.timeout_mode = False
        self.lock = threading.Lock()


class SimBus:
    """Virtual USB bus implementing the DeviceBus contract, with fault injection."""

    def __init__(self, dependencies: dict[str, bool] | None = None, sleep: Callable[[float], None] = time.sleep):
        self._slots: dict[str, _Slot] = {}
        self._log: list[StepLogEntry] = []
        self._log_lock = threading.Lock()
        self._next_device_number = 2
        self.dependencies = dict(dependencies or {})
        self.sleep = sleep
        self.warnings: list[str] = []

    # -- construction

    def attach(self, device: VirtualDevice) -> str:
        same = sum(
            1
            for s in self._slots.values()
            if (s.device.vendor_id, s.device.product_id) == (device.vendor_id, device.product_id)
        )
        key = f"usb:{device.vendor_id:04x}:{device.product_id:04x}:{same}"
        self._slots[key] = _Slot(device, self._take_device_number())
        return key

    def _take_device_number(self) -> int:
        n = self._next_device_number
        self._next_device_number += 1
        return n

    @classmethod
    def from_rig(cls, rig: dict, sleep: Callable[[float], None] = time.sleep) -> "SimBus":
        bus = cls(dependencies=rig.get("dependencies", {}), sleep=sleep)
        servo: VirtualServoController | None = None
        for spec in rig.get("devices", []):
            vid, pid = int(spec["vendor_id"], 16), int(spec["product_id"], 16)
            desc = spec["description"]
            kind = spec["kind"]
            if kind == "servo_controller":
                dev = VirtualServoController(vid, pid, desc, joints=int(spec.get("joints", 6)))
                servo = servo or dev
            elif kind == "camera":
                dev = VirtualCamera(vid, pid, desc)
            elif kind == "gpio_bank":
                dev = VirtualGpioBank(vid, pid, desc, lines=int(spec.get("lines", 16)))
            elif kind == "register":
                dev = VirtualRegisterDevice(vid, pid, desc)
            else:
                raise ValueError(f"unknown virtual device kind {kind!r}")
            bus.attach(dev)
        if servo is not None:
            for slot in bus._slots.values():
                if isinstance(slot.device, VirtualCamera):
                    slot.device.scene = lambda s=servo: list(s.joints)
        return bus

    @classmethod
    def default(cls, sleep: Callable[[float], None] = time.sleep) -> "SimBus":
        return cls.from_rig(load_rig(), sleep=sleep)

    # -- inspection

    def keys(self, attached_only: bool = True) -> list[str]:
        return [k for k, s in self._slots.items() if s.attached or not attached_only]

    def device(self, key: str) -> VirtualDevice:
        return self._slots[key].device

    def snapshot_listing(self) -> str:
        lines = []
        for slot in self._slots.values():
            if not slot.attached:
                continue
            d = slot.device
            lines.append(f"Bus 001 Device {slot.device_number:03d}: ID {d.vendor_id:04x}:{d.product_id:04x} {d.description}")
        return "\n".join(lines) + ("\n" if lines else "")

    @property
    def step_log(self) -> list[StepLogEntry]:
        with self._log_lock:
            return list(self._log)

    def dump_log(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for e in self.step_log:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    # -- DeviceBus contract

    def _record(self, key: str, op: str, call_id: str | None) -> None:
        with self._log_lock:
            self._log.append(StepLogEntry(len(self._log), key, op, call_id, time.time()))

    def note(self, device_key: str, op: str, call_id: str | None = None) -> None:
        self._record(device_key, op, call_id)

    def dependency_present(self, name: str, kind: str) -> bool:
        return bool(self.dependencies.get(name, False))

    def io(self, device_key: str, step: dict, call_id: str | None = None) -> Any:
        slot = self._slots.get(device_key)
        if slot is None:
            raise DeviceNotFound(device_key)
        op = step["op"]
        with slot.lock:
            if not slot.attached:
                raise DeviceNotFound(device_key)
            self._record(device_key, op, call_id)
            dev = slot.device
            if op == "open":
                dev.reset_rx()
                return None
            if op == "delay":
                if step.get("ms", 0) > 0:
                    self.sleep(step["ms"] / 1000.0)
                return None
            if op == "write":
                if not slot.timeout_mode:
                    dev.write(step["data"])
                return None
            if op == "read":
                got = None if slot.timeout_mode else dev.read(step["length"])
                if got is None:
                    self.sleep(step["timeout_ms"] / 1000.0)
                    raise StepTimeout(device_key, step.get("index"), step["timeout_ms"])
                return got
            if op == "capture_frame":
                if not isinstance(dev, VirtualCamera):
                    raise ValueError(f"{device_key} is not a camera")
                if slot.timeout_mode:
                    raise StepTimeout(device_key, step.get("index"), 1000)
                return dev.capture()
            if op == "gpio_set":
                if not isinstance(dev, VirtualGpioBank):
                    raise ValueError(f"{device_key} is not a gpio bank")
                if not slot.timeout_mode:
                    dev.set_line(step["line"], step["value"])
                return None
            raise ValueError(f"unsupported bus op {op!r}")

    # -- fault injection

    def _warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    def inject_fault(self, kind: str, target: str | Path | None = None) -> None:
        """Apply one of: unplug, replug, remove_dependency, corrupt_manifest,
        timeout_mode, clear_timeout. Unknown targets are a no-op with a warning."""
        if kind == "remove_dependency":
            self.dependencies[str(target)] = False
            return
        if kind == "corrupt_manifest":
            corrupt_file(Path(target))
            return
        slot = self._slots.get(str(target))
        if slot is None:
            self._warn(f"inject_fault({kind}): unknown device key {target!r}")
            return
        if kind == "unplug":
            slot.attached = False
        elif kind == "replug":
            if not slot.attached:
                slot.attached = True
                slot.timeout_mode = False
                slot.device_number = self._take_device_number()
                slot.device.power_cycle()
        elif kind == "timeout_mode":
            slot.timeout_mode = True
        elif kind == "clear_timeout":
            slot.timeout_mode = False
        else:
            raise ValueError(f"unknown fault kind {kind!r}")

    def set_dependency(self, name: str, present: bool) -> None:
        self.dependencies[name] = present


def corrupt_file(path: Path) -> None:
    """Flip one bit of the byte in the middle of the file."""
    data = bytearray(Path(path).read_bytes())
    if not data:
        Path(path).write_bytes(b"\x00")
        return
    data[len(data) // 2] ^= 0x01
    Path(path).write_bytes(bytes(data))


def load_rig(path: Path | None = None) -> dict:
    if path is None:
        path = Path(str(resources.files("octopus") / "data" / "fixtures" / "rig_default.json"))
    return json.loads(Path(path).read_text(encoding="utf-8"))
