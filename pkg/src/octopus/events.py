"""Structured log events shared by the pipeline, the server and the daemon."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

SOURCES = ("server", "pipeline", "bus", "daemon")
SEVERITIES = ("info", "warn", "error")

_LEVELS = {"info": logging.INFO, "warn": logging.WARNING, "error": logging.ERROR}


@dataclass
class LogEvent:
    source: str
    severity: str
    text: str
    structured: dict[str, str] | None = None
    at: float = field(default_factory=time.time)

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("LogEvent.text must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown event source {self.source!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")

    def to_dict(self) -> dict:
        d = {"at": self.at, "source": self.source, "severity": self.severity, "text": self.text}
        if self.structured:
            d["structured"] = dict(self.structured)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LogEvent":
        structured = d.get("structured")
        if structured is not None:
            structured = {str(k): str(v) for k, v in structured.items()}
        return cls(
            source=d["source"],
            severity=d["severity"],
            text=d["text"],
            structured=structured,
            at=float(d.get("at", time.time())),
        )


class EventLog:
    """Fan-out sink: python logging, an optional JSONL file, and subscribers."""

    def __init__(self, path: Path | None = None, logger_name: str = "octopus"):
        self.path = Path(path) if path is not None else None
        self._log = logging.getLogger(logger_name)
        self._lock = threading.Lock()
        self._subscribers: list[Callable[[LogEvent], None]] = []
        self.events: list[LogEvent] = []

    def subscribe(self, fn: Callable[[LogEvent], None]) -> None:
        with self._lock:
            self._subscribers.append(fn)

    def emit(self, event: LogEvent) -> LogEvent:
        self._log.log(_LEVELS[event.severity], "[%s] %s", event.source, event.text)
        with self._lock:
            self.events.append(event)
            subs = list(self._subscribers)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
        for fn in subs:
            fn(event)
        return event

    def info(self, source: str, text: str, **structured: str) -> LogEvent:
        return self.emit(LogEvent(source, "info", text, structured or None))

    def warn(self, source: str, text: str, **structured: str) -> LogEvent:
        return self.emit(LogEvent(source, "warn", text, structured or None))

    def error(self, source: str, text: str, **structured: str) -> LogEvent:
        return self.emit(LogEvent(source, "error", text, structured or None))
