"""Device bus contract shared by the runtime and the simulated rig."""

from __future__ import annotations

import importlib.util
import shutil
from typing import Any, Protocol, runtime_checkable

# plan step kind -> (dependency name, dependency kind)
STEP_DEPENDENCIES = {
    "capture_frame": ("cam_backend", "runtime_library"),
    "gpio_set": ("gpioset", "system_tool"),
}


class BusError(Exception):
    pass


class DeviceNotFound(BusError):
    def __init__(self, key: str):
        super().__init__(f"device not found: {key}")
        self.key = key


class StepTimeout(BusError):
    def __init__(self, key: str, step_index: int | None, timeout_ms: int):
        where = f"step {step_index}" if step_index is not None else "step"
        super().__init__(f"{where} timed out after {timeout_ms} ms on {key}")
        self.key = key
        self.step_index = step_index
        self.timeout_ms = timeout_ms


class DependencyMissing(BusError):
    def __init__(self, name: str):
        # mirrors the python import error so log classifiers recognise it
        super().__init__(f"No module named '{name}'")
        self.name = name


@runtime_checkable
class DeviceBus(Protocol):
    def io(self, device_key: str, step: dict, call_id: str | None = None) -> Any:
        """Execute one device-level step; return bytes, image bytes or None."""

    def note(self, device_key: str, op: str, call_id: str | None = None) -> None:
        """Record a step executed off-device (expect) in the step log."""

    def dependency_present(self, name: str, kind: str) -> bool: ...


class HostBus:
    """Bus for a real host with no I/O backend attached.

    Dependency presence is probed on the host; every device step fails with
    DeviceNotFound because real transports live in separate bus backends.
    """

    def io(self, device_key: str, step: dict, call_id: str | None = None) -> Any:
        raise DeviceNotFound(device_key)

    def note(self, device_key: str, op: str, call_id: str | None = None) -> None:
        pass

    def dependency_present(self, name: str, kind: str) -> bool:
        if kind == "system_tool":
            return shutil.which(name) is not None
        return importlib.util.find_spec(name) is not None
