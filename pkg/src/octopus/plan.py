"""Declarative handler plans.

A plan is a straight-line list of device I/O steps that implements one tool.
Plans arrive from the agent as JSON and are checked by :func:`validate_plan`
before anything executes them. Byte templates are whitespace-separated
tokens: two-digit hex bytes, ``{param}`` slots (``{param_lo}``/``{param_hi}``
for 16-bit little-endian values) and a trailing ``CK`` checksum directive.
Expect patterns may also use ``??`` wildcards.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Mapping, Union

if TYPE_CHECKING:
    from octopus.toolgen import ParamSpec, ToolSchema

STEP_OPS = ("open", "write", "read", "expect", "capture_frame", "gpio_set", "delay")
DEVICE_OPS = ("write", "read", "capture_frame", "gpio_set")
LOOP_OPS = ("loop", "repeat", "while", "for", "goto", "jump", "branch", "if")
DECODE_FORMATS = {"u8": 1, "i8": 1, "u16le": 2, "i16le": 2}
MAX_READ = 4096
MAX_TIMEOUT_MS = 60_000
MAX_DELAY_MS = 10_000

_HEX = re.compile(r"^[0-9A-Fa-f]{2}$")
_SLOT = re.compile(r"^\{([a-z][a-z0-9_]*)\}$")
_INLINE_SLOT = re.compile(r"\{([^}]*)\}")


@dataclass(frozen=True)
class Encoding:
    scale: float = 1.0
    bias: float = 0.0

    def apply(self, value: float) -> int:
        return int(round(value * self.scale + self.bias))


@dataclass(frozen=True)
class Decode:
    name: str
    at: int
    format: str = "u8"
    scale: float = 1.0
    bias: float = 0.0

    def apply(self, data: bytes) -> float | int:
        size = DECODE_FORMATS[self.format]
        chunk = data[self.at : self.at + size]
        raw = int.from_bytes(chunk, "little", signed=self.format.startswith("i"))
        value = (raw - self.bias) / self.scale
        return int(value) if float(value).is_integer() else value


@dataclass(frozen=True)
class Open:
    bus: str
    address: str
    op: str = field(default="open", init=False)


@dataclass(frozen=True)
class Write:
    template: str
    encode: Mapping[str, Encoding] = field(default_factory=dict)
    op: str = field(default="write", init=False)


@dataclass(frozen=True)
class Read:
    length: int
    timeout_ms: Any = None
    decode: tuple[Decode, ...] = ()
    op: str = field(default="read", init=False)


@dataclass(frozen=True)
class Expect:
    pattern: str
    op: str = field(default="expect", init=False)


@dataclass(frozen=True)
class CaptureFrame:
    camera: str
    op: str = field(default="capture_frame", init=False)


@dataclass(frozen=True)
class GpioSet:
    line: Union[int, str]
    value: Union[int, str]
    op: str = field(default="gpio_set", init=False)


@dataclass(frozen=True)
class Delay:
    ms: Union[int, str]
    op: str = field(default="delay", init=False)


@dataclass(frozen=True)
class UnknownStep:
    op: str
    raw: Mapping[str, Any] = field(default_factory=dict)


Step = Union[Open, Write, Read, Expect, CaptureFrame, GpioSet, Delay, UnknownStep]


@dataclass(frozen=True)
class Postcondition:
    kind: str
    value: str
    param: str | None = None
    tolerance: float = 0.0
    literal: float | None = None

    def holds(self, decoded: Mapping[str, Any], args: Mapping[str, Any]) -> bool:
        got = decoded[self.value]
        want = args[self.param] if self.param is not None else self.literal
        if self.kind == "within":
            return abs(float(got) - float(want)) <= self.tolerance
        return got == want

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "value": self.value}
        if self.param is not None:
            d["param"] = self.param
        if self.kind == "within":
            d["tolerance"] = self.tolerance
        if self.literal is not None:
            d["literal"] = self.literal
        return d


@dataclass(frozen=True)
class HandlerPlan:
    tool_name: str
    steps: tuple[Step, ...]
    postcondition: Postcondition | None = None

    def to_dict(self) -> dict:
        return {
            "tool_name": self.tool_name,
            "steps": [step_to_dict(s) for s in self.steps],
            "postcondition": self.postcondition.to_dict() if self.postcondition else None,
        }

    def uses(self, op: str) -> bool:
        return any(s.op == op for s in self.steps)


class PlanFormatError(ValueError):
    pass


def _num(v: Any) -> Any:
    return int(v) if isinstance(v, float) and v.is_integer() else v


def step_to_dict(s: Step) -> dict:
    if isinstance(s, Open):
        return {"op": "open", "bus": s.bus, "address": s.address}
    if isinstance(s, Write):
        d: dict = {"op": "write", "template": s.template}
        if s.encode:
            d["encode"] = {k: {"scale": _num(e.scale), "bias": _num(e.bias)} for k, e in sorted(s.encode.items())}
        return d
    if isinstance(s, Read):
        d = {"op": "read", "length": s.length, "timeout_ms": s.timeout_ms}
        if s.decode:
            d["decode"] = [
                {"name": x.name, "at": x.at, "format": x.format, "scale": _num(x.scale), "bias": _num(x.bias)}
                for x in s.decode
            ]
        return d
    if isinstance(s, Expect):
        return {"op": "expect", "pattern": s.pattern}
    if isinstance(s, CaptureFrame):
        return {"op": "capture_frame", "camera": s.camera}
    if isinstance(s, GpioSet):
        return {"op": "gpio_set", "line": s.line, "value": s.value}
    if isinstance(s, Delay):
        return {"op": "delay", "ms": s.ms}
    return dict(s.raw) or {"op": s.op}


def step_from_dict(d: Mapping[str, Any]) -> Step:
    try:
        op = d["op"]
        if op == "open":
            return Open(str(d.get("bus", "usb")), str(d["address"]))
        if op == "write":
            enc = {k: Encoding(float(v.get("scale", 1)), float(v.get("bias", 0))) for k, v in (d.get("encode") or {}).items()}
            return Write(str(d["template"]), enc)
        if op == "read":
            dec = tuple(
                Decode(str(x["name"]), int(x["at"]), str(x.get("format", "u8")), float(x.get("scale", 1)), float(x.get("bias", 0)))
                for x in d.get("decode") or ()
            )
            return Read(int(d["length"]), d.get("timeout_ms"), dec)
        if op == "expect":
            return Expect(str(d["pattern"]))
        if op == "capture_frame":
            return CaptureFrame(str(d.get("camera", "")))
        if op == "gpio_set":
            return GpioSet(d["line"], d["value"])
        if op == "delay":
            return Delay(d["ms"])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise PlanFormatError(f"malformed {d.get('op', '?')} step: {exc!r}") from exc
    return UnknownStep(str(op), dict(d))


def plan_from_dict(d: Mapping[str, Any]) -> HandlerPlan:
    if not isinstance(d, Mapping) or not isinstance(d.get("steps"), list):
        raise PlanFormatError("plan must be an object with a steps list")
    steps = tuple(step_from_dict(s) for s in d["steps"])
    pc = d.get("postcondition")
    post = None
    if pc:
        try:
            post = Postcondition(
                kind=str(pc["kind"]),
                value=str(pc["value"]),
                param=pc.get("param"),
                tolerance=float(pc.get("tolerance", 0)),
                literal=pc.get("literal"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanFormatError(f"malformed postcondition: {exc!r}") from exc
    return HandlerPlan(str(d.get("tool_name", "")), steps, post)


# -- byte templates -------------------------------------------------------------


def resolve_slot(name: str, params: Mapping[str, "ParamSpec"]) -> tuple[str, str] | None:
    """Map a slot name to (param, part) where part is "", "lo" or "hi"."""
    if name in params:
        return name, ""
    for part in ("lo", "hi"):
        base = name[: -len(part) - 1]
        if name.endswith("_" + part) and base in params:
            return base, part
    return None


def template_problems(template: str, params: Mapping[str, "ParamSpec"], *, pattern: bool) -> list[str]:
    """Token-level problems in a write template or expect pattern (no step suffix)."""
    problems = []
    tokens = template.split()
    if not tokens:
        return ["empty byte template"]
    for i, tok in enumerate(tokens):
        if _HEX.match(tok):
            continue
        if pattern and tok == "??":
            continue
        if not pattern and tok == "CK":
            if i != len(tokens) - 1:
                problems.append("checksum directive CK must be the last token")
            continue
        m = _SLOT.match(tok)
        if m:
            slot = resolve_slot(m.group(1), params)
            if slot is None:
                problems.append(f"unknown param {m.group(1)}")
            elif params[slot[0]].ptype == "string":
                problems.append(f"param {slot[0]} of type string cannot fill a byte slot")
            continue
        inline = _INLINE_SLOT.findall(tok)
        if inline:
            problems.extend(f"unknown param {n}" for n in inline if resolve_slot(n, params) is None)
        problems.append(f"malformed byte token '{tok}'")
    return problems


def _slot_name(value: Any) -> str | None:
    if isinstance(value, str):
        m = _SLOT.match(value)
        return m.group(1) if m else ""
    return None


def validate_plan(plan: HandlerPlan, tool: "ToolSchema") -> list[str]:
    """Return every violation found; an empty list means the plan may run."""
    params = {p.name: p for p in tool.params}
    out: list[str] = []
    if plan.tool_name != tool.name:
        out.append(f"plan is for tool {plan.tool_name!r}, not {tool.name!r}")
    if not plan.steps:
        out.append("empty plan")
    opened = False
    have_read = False
    decoded: set[str] = set()
    for i, step in enumerate(plan.steps, start=1):
        at = f"@step {i}"
        if isinstance(step, UnknownStep):
            if step.op in LOOP_OPS:
                out.append(f"loop construct '{step.op}' not allowed {at}")
            else:
                out.append(f"unknown step op '{step.op}' {at}")
            continue
        if step.op in DEVICE_OPS and not opened:
            out.append(f"{step.op} before open {at}")
        if isinstance(step, Open):
            opened = True
            if step.address != tool.device_key:
                out.append(f"open address {step.address} is not the bound device {tool.device_key} {at}")
        elif isinstance(step, Write):
            out.extend(p if p.startswith("unknown param") else f"{p} {at}" for p in template_problems(step.template, params, pattern=False))
            for name in step.encode:
                if name not in params:
                    out.append(f"unknown param {name}")
        elif isinstance(step, Read):
            have_read = True
            t = step.timeout_ms
            if t is None:
                out.append(f"read without timeout {at}")
            elif isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t) or not 0 < t <= MAX_TIMEOUT_MS:
                out.append(f"read timeout must be 1..{MAX_TIMEOUT_MS} ms {at}")
            if not 0 < step.length <= MAX_READ:
                out.append(f"read length must be 1..{MAX_READ} {at}")
            for dec in step.decode:
                size = DECODE_FORMATS.get(dec.format)
                if size is None:
                    out.append(f"unknown decode format '{dec.format}' {at}")
                elif dec.at < 0 or dec.at + size > step.length:
                    out.append(f"decode '{dec.name}' reads past the {step.length}-byte frame {at}")
                if dec.scale == 0:
                    out.append(f"decode '{dec.name}' has zero scale {at}")
                if dec.name in decoded:
                    out.append(f"decode name '{dec.name}' reused {at}")
                decoded.add(dec.name)
        elif isinstance(step, Expect):
            if not have_read:
                out.append(f"expect without preceding read {at}")
            out.extend(p if p.startswith("unknown param") else f"{p} {at}" for p in template_problems(step.pattern, params, pattern=True))
        elif isinstance(step, CaptureFrame):
            if step.camera != tool.device_key:
                out.append(f"capture_frame camera {step.camera} is not the bound device {tool.device_key} {at}")
        elif isinstance(step, GpioSet):
            for label, v in (("line", step.line), ("value", step.value)):
                name = _slot_name(v)
                if name:
                    if name not in params:
                        out.append(f"unknown param {name}")
                elif name == "":
                    out.append(f"gpio_set {label} must be an integer or a {{param}} slot {at}")
                elif isinstance(v, bool) or not isinstance(v, int) or v < 0 or (label == "value" and v > 1):
                    out.append(f"gpio_set {label} out of range {at}")
        elif isinstance(step, Delay):
            name = _slot_name(step.ms)
            if name:
                if name not in params:
                    out.append(f"unknown param {name}")
                elif params[name].ptype not in ("integer", "number"):
                    out.append(f"delay slot {name} must be numeric {at}")
            elif name == "" or isinstance(step.ms, bool) or not isinstance(step.ms, (int, float)) or not 0 <= step.ms <= MAX_DELAY_MS:
                out.append(f"delay must be 0..{MAX_DELAY_MS} ms {at}")
    pc = plan.postcondition
    if pc is not None:
        if pc.kind not in ("within", "equals"):
            out.append(f"unknown postcondition kind '{pc.kind}'")
        if pc.value not in decoded:
            out.append(f"postcondition refers to undecoded value '{pc.value}'")
        if pc.param is not None and pc.param not in params:
            out.append(f"unknown param {pc.param}")
        if pc.param is None and pc.literal is None:
            out.append("postcondition needs a param or a literal")
        if pc.tolerance < 0:
            out.append("postcondition tolerance must be >= 0")
    return out


# -- execution helpers ----------------------------------------------------------


class TemplateError(ValueError):
    pass


def slot_value(param: "ParamSpec", value: Any, encoding: Encoding | None) -> int:
    if isinstance(value, bool):
        raw = int(value)
    elif param.ptype == "enumerated":
        raw = list(param.choices).index(value)
    else:
        raw = (encoding or Encoding()).apply(float(value))
    return raw


def render_bytes(
    template: str,
    params: Mapping[str, "ParamSpec"],
    args: Mapping[str, Any],
    encode: Mapping[str, Encoding] | None = None,
    *,
    pattern: bool = False,
) -> list[int | None]:
    """Render a template to byte values; ``None`` marks a ``??`` wildcard."""
    from octopus.simbus import checksum

    encode = encode or {}
    out: list[int | None] = []
    for tok in template.split():
        if _HEX.match(tok):
            out.append(int(tok, 16))
        elif tok == "??" and pattern:
            out.append(None)
        elif tok == "CK" and not pattern:
            out.append(checksum(bytes(b for b in out if b is not None)))
        else:
            m = _SLOT.match(tok)
            slot = resolve_slot(m.group(1), params) if m else None
            if slot is None:
                raise TemplateError(f"bad template token {tok!r}")
            name, part = slot
            raw = slot_value(params[name], args[name], encode.get(name))
            if part == "":
                if not 0 <= raw <= 0xFF:
                    raise TemplateError(f"value for {name} does not fit in one byte ({raw})")
                out.append(raw)
            else:
                if not 0 <= raw <= 0xFFFF:
                    raise TemplateError(f"value for {name} does not fit in 16 bits ({raw})")
                out.append(raw & 0xFF if part == "lo" else raw >> 8)
    return out


def resolve_int(value: Union[int, str], args: Mapping[str, Any]) -> int:
    name = _slot_name(value)
    if name:
        v = args[name]
        return int(round(float(v))) if not isinstance(v, bool) else int(v)
    return int(value)
