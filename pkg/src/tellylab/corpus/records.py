"""Corpus records, JSONL ingestion and hash-based splits."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

CODE_KEYS = ("code", "function")
DOC_KEYS = ("docstring", "doc")


def content_id(code: str, doc: str) -> str:
    return hashlib.sha256(f"{code}\x00{doc}".encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class CorpusRecord:
    code: str
    doc: str
    lang: str
    id: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @classmethod
    def make(cls, code: str, doc: str = "", lang: str = "minipy", meta: dict | None = None) -> "CorpusRecord":
        if not code:
            raise ValueError("record code must be non-empty")
        return cls(code, doc, lang, content_id(code, doc), meta or {})

    def to_json(self) -> dict:
        return {"id": self.id, "code": self.code, "docstring": self.doc, "lang": self.lang}


@dataclass
class ReadResult:
    records: list[CorpusRecord]
    warnings: int


def read_jsonl(path: str | Path, lang: str = "minipy") -> ReadResult:
    """Records from a JSONL file; malformed lines are skipped and counted."""
    records, warnings = [], 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                log.warning("%s:%d: not valid JSON", path, lineno)
                warnings += 1
                continue
            code = next((obj[k] for k in CODE_KEYS if isinstance(obj, dict) and isinstance(obj.get(k), str)), None)
            if not code:
                log.warning("%s:%d: record has no code field", path, lineno)
                warnings += 1
                continue
            doc = next((obj[k] for k in DOC_KEYS if isinstance(obj.get(k), str)), "")
            records.append(CorpusRecord.make(code, doc, obj.get("lang", obj.get("language", lang))))
    return ReadResult(records, warnings)


def write_jsonl(records: Iterable[CorpusRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    buckets: int = 10_000
    names: tuple[str, str, str] = ("train", "valid", "test")

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError("split ratios must be non-negative and sum to 1")


def split_of(record_id: str, spec: SplitSpec) -> str:
    bucket = int(hashlib.sha256(record_id.encode()).hexdigest()[:12], 16) % spec.buckets
    edge = 0.0
    for name, ratio in zip(spec.names, spec.ratios):
        edge += ratio * spec.buckets
        if bucket < edge:
            return name
    return spec.names[-1]


def make_splits(records: Sequence[CorpusRecord], spec: SplitSpec = SplitSpec()) -> dict[str, list[CorpusRecord]]:
    out: dict[str, list[CorpusRecord]] = {n: [] for n in spec.names}
    for r in records:
        out[split_of(r.id, spec)].append(r)
    for name, items in out.items():
        if not items:
            log.warning("split %r is empty", name)
    return out
