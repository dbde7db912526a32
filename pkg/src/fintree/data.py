"""Loading and validation of relation-extraction instances.

The on-disk format is JSON lines with fields
``{id, token, e1_start, e1_end, e1_type, e2_start, e2_end, e2_type, relation}``
(spans are half-open token indices). Field names can be remapped via
``field_map`` for corpora that use different keys. Blank lines are skipped;
any other malformation is a hard error so no instance is silently dropped.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import ParseError, SpanError, UnknownLabel
from .schema import LabelRegistry


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


# Canonical record keys; a field_map may point each at a differently named key.
RECORD_FIELDS = (
    "id", "token", "e1_start", "e1_end", "e1_type",
    "e2_start", "e2_end", "e2_type", "relation",
)


@dataclass(frozen=True)
class REInstance:
    """One labeled example: tokens, two typed entity spans, optional gold label."""

    id: str
    tokens: tuple[str, ...]
    e1_span: tuple[int, int]
    e2_span: tuple[int, int]
    e1_type: str
    e2_type: str
    relation: str | None = None

    def validate(self, registry: LabelRegistry | None = None) -> "REInstance":
        """Check span/type invariants; returns self so loaders can chain."""
        n = len(self.tokens)
        for name, (start, end) in (("e1", self.e1_span), ("e2", self.e2_span)):
            if not (0 <= start < end <= n):
                raise SpanError(self.id, f"{name} span ({start}, {end}) out of range for {n} tokens")
        a, b = sorted((self.e1_span, self.e2_span))
        if a[1] > b[0]:
            raise SpanError(self.id, f"spans {self.e1_span} and {self.e2_span} overlap")
        if not self.e1_type or not self.e2_type:
            raise SpanError(self.id, "entity types must be non-empty")
        if self.relation is not None and registry is not None and self.relation not in registry:
            raise UnknownLabel(self.id, self.relation)
        return self

    def e1_surface(self) -> str:
        return " ".join(self.tokens[self.e1_span[0]:self.e1_span[1]])

    def e2_surface(self) -> str:
        return " ".join(self.tokens[self.e2_span[0]:self.e2_span[1]])

    def pair(self) -> tuple[str, str]:
        return (self.e1_type, self.e2_type)


@dataclass
class Dataset:
    split: Split
    instances: list[REInstance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


def _record_to_instance(rec: dict, line_no: int, field_map: dict[str, str] | None) -> REInstance:
    def get(name: str, required: bool = True):
        key = (field_map or {}).get(name, name)
        if key not in rec:
            if required:
                raise ParseError(line_no, f"missing field {key!r}")
            return None
        return rec[key]

    try:
        tokens = tuple(str(t) for t in get("token"))
        inst = REInstance(
            id=str(get("id")),
            tokens=tokens,
            e1_span=(int(get("e1_start")), int(get("e1_end"))),
            e2_span=(int(get("e2_start")), int(get("e2_end"))),
            e1_type=str(get("e1_type")),
            e2_type=str(get("e2_type")),
            relation=(lambda r: None if r is None else str(r))(get("relation", required=False)),
        )
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(line_no, f"bad record: {exc}") from exc
    return inst


def load_instances(
    path: str | Path,
    registry: LabelRegistry,
    split: Split | str,
    field_map: dict[str, str] | None = None,
) -> Dataset:
    """Load and validate a JSONL split; every surviving instance is valid.

    Raises ParseError (bad line), SpanError (bad spans) or UnknownLabel
    (gold label absent from the registry).
    """
    split = Split(split)
    instances: list[REInstance] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(rec, dict):
                raise ParseError(line_no, "record is not a JSON object")
            inst = _record_to_instance(rec, line_no, field_map).validate(registry)
            if inst.id in seen_ids:
                raise ParseError(line_no, f"duplicate id {inst.id!r} within split")
            seen_ids.add(inst.id)
            instances.append(inst)
    return Dataset(split=split, instances=instances)


def save_instances(path: str | Path, ds: Dataset) -> None:
    """Write a dataset back out in the canonical JSONL record format."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in ds:
            rec = {
                "id": inst.id,
                "token": list(inst.tokens),
                "e1_start": inst.e1_span[0],
                "e1_end": inst.e1_span[1],
                "e1_type": inst.e1_type,
                "e2_start": inst.e2_span[0],
                "e2_end": inst.e2_span[1],
                "e2_type": inst.e2_type,
                "relation": inst.relation,
            }
            fh.write(json.dumps(rec) + "\n")


def split_stats(ds: Dataset, registry: LabelRegistry) -> dict[str, int]:
    """Per-label instance counts over the labeled part of a dataset."""
    counts: Counter[str] = Counter(
        inst.relation for inst in ds if inst.relation is not None
    )
    for raw in counts:
        if raw not in registry:
            raise UnknownLabel("<stats>", raw)
    return dict(counts)
