"""Markdown stage specifications and prompt rendering.

A spec-set is one markdown document per stage. Documents are immutable once
loaded; reloading produces a new spec-set with a higher version number.
Placeholders use ``{{key}}`` syntax.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping

from octopus.canonical import sha256_hex

PIPELINE_STAGES = ("probe", "identify", "interface", "serve", "deploy")
DAEMON_STAGES = ("watch", "heal", "perceive")
STAGES = PIPELINE_STAGES + DAEMON_STAGES

PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")

_generation = itertools.count(1)


class SpecError(Exception):
    pass


class SpecSetIncomplete(SpecError):
    def __init__(self, stage: str):
        super().__init__(f"spec-set is missing required stage {stage!r}")
        self.stage = stage


class IoFailure(SpecError):
    pass


class MissingContext(SpecError):
    def __init__(self, key: str):
        super().__init__(f"no context value for placeholder {{{{{key}}}}}")
        self.key = key


@dataclass(frozen=True)
class SpecDocument:
    stage_name: str
    body: str
    version: int = 0
    defaulted: bool = False
    content_hash: str = field(default="")

    def __post_init__(self) -> None:
        if self.stage_name not in STAGES:
            raise ValueError(f"unknown stage {self.stage_name!r}")
        computed = sha256_hex(self.body)
        if not self.content_hash:
            object.__setattr__(self, "content_hash", computed)
        elif self.content_hash != computed:
            raise ValueError(f"content_hash mismatch for {self.stage_name}")

    def placeholders(self) -> list[str]:
        seen: dict[str, None] = {}
        for m in PLACEHOLDER.finditer(self.body):
            seen.setdefault(m.group(1))
        return list(seen)


@dataclass(frozen=True)
class RenderedPrompt:
    stage_name: str
    text: str
    context_keys: tuple[str, ...]
    spec_hash: str


class SpecSet(tuple):
    """The eight stage documents in canonical stage order."""

    def __new__(cls, docs):
        docs = tuple(docs)
        by_stage = {d.stage_name: d for d in docs}
        if len(by_stage) != len(docs):
            raise ValueError("duplicate stage in spec-set")
        missing = [s for s in STAGES if s not in by_stage]
        if missing:
            raise SpecSetIncomplete(missing[0])
        return super().__new__(cls, tuple(by_stage[s] for s in STAGES))

    def __getitem__(self, key):
        if isinstance(key, str):
            for doc in tuple.__iter__(self):
                if doc.stage_name == key:
                    return doc
            raise KeyError(key)
        return super().__getitem__(key)

    def __iter__(self) -> Iterator[SpecDocument]:
        return tuple.__iter__(self)

    def hashes(self) -> dict[str, str]:
        return {d.stage_name: d.content_hash for d in self}

    @property
    def defaulted(self) -> list[str]:
        return [d.stage_name for d in self if d.defaulted]

    @property
    def version(self) -> int:
        return self[0].version


def default_spec_dir() -> Path:
    return Path(str(resources.files("octopus") / "data" / "specs"))


def _builtin_body(stage: str) -> str:
    return (default_spec_dir() / f"{stage}.md").read_text(encoding="utf-8")


def load_spec_set(directory_path: str | Path) -> SpecSet:
    """Load ``<stage>.md`` for all eight stages from ``directory_path``.

    The five pipeline stages are mandatory. Missing daemon stages fall back to
    the packaged defaults and are flagged ``defaulted``.
    """
    directory = Path(directory_path)
    if not directory.is_dir():
        raise SpecSetIncomplete(PIPELINE_STAGES[0])
    version = next(_generation)
    docs = []
    for stage in STAGES:
        path = directory / f"{stage}.md"
        if not path.exists():
            if stage in PIPELINE_STAGES:
                raise SpecSetIncomplete(stage)
            docs.append(SpecDocument(stage, _builtin_body(stage), version, defaulted=True))
            continue
        try:
            body = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        docs.append(SpecDocument(stage, body, version))
    return SpecSet(docs)


def render_prompt(spec: SpecDocument, context: Mapping[str, str]) -> RenderedPrompt:
    """Substitute every ``{{key}}`` in the spec body. Unused context keys are ignored."""
    used: list[str] = []
    for key in spec.placeholders():
        if key not in context:
            raise MissingContext(key)
        used.append(key)

    def sub(m: re.Match) -> str:
        return str(context[m.group(1)])

    text = PLACEHOLDER.sub(sub, spec.body)
    return RenderedPrompt(spec.stage_name, text, tuple(used), spec.content_hash)
