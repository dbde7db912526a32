"""Relation-label vocabulary and the entity-type compatibility table.

Labels follow the ``head:tail:name`` convention (e.g. ``org:date:formed_on``).
A label without any ``:`` (e.g. ``no_relation``) is untyped and is treated as
admissible for every entity-type pair, so a constrained prediction can always
fall back to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DuplicateLabel, EmptyLabel, MalformedLabel, NoFallbackLabel

TypePair = tuple[str, str]


@dataclass(frozen=True)
class RelationLabel:
    """One relation class: raw string, optional entity types, dense index."""

    raw: str
    head_type: str | None
    tail_type: str | None
    name: str
    index: int = 0

    @property
    def typed(self) -> bool:
        return self.head_type is not None

    def pair(self) -> TypePair | None:
        """Lowercased (head, tail) pair, or None for untyped labels."""
        if self.head_type is None or self.tail_type is None:
            return None
        return (self.head_type.lower(), self.tail_type.lower())


def parse_label(raw: str, index: int = 0) -> RelationLabel:
    """Parse a raw label string into a RelationLabel.

    ``h:t:name`` with three non-empty segments parses as typed; a string
    without any ``:`` parses as untyped with name = raw. Anything else
    containing ``:`` is rejected.
    """
    raw = raw.strip()
    if not raw:
        raise EmptyLabel("label is empty after trimming")
    if ":" not in raw:
        return RelationLabel(raw=raw, head_type=None, tail_type=None, name=raw, index=index)
    parts = raw.split(":")
    if len(parts) != 3 or not all(parts):
        raise MalformedLabel(
            f"label {raw!r} contains ':' but is not head:tail:name with non-empty segments"
        )
    head, tail, name = parts
    return RelationLabel(raw=raw, head_type=head, tail_type=tail, name=name, index=index)


@dataclass
class LabelRegistry:
    """Ordered, immutable-after-construction set of relation labels.

    Class indices are assigned by order of first appearance, which is also
    the serialization order (``labels.txt``).
    """

    labels: list[RelationLabel]
    by_raw: dict[str, int] = field(init=False)

    def __post_init__(self):
        if not self.labels:
            raise EmptyLabel("a registry needs at least one label")
        self.by_raw = {}
        for i, lab in enumerate(self.labels):
            if lab.index != i:
                raise MalformedLabel(f"label {lab.raw!r} has index {lab.index}, expected {i}")
            if lab.raw in self.by_raw:
                raise DuplicateLabel(f"duplicate label {lab.raw!r}")
            self.by_raw[lab.raw] = i

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, raw: str) -> bool:
        return raw in self.by_raw

    def index_of(self, raw: str) -> int:
        return self.by_raw[raw]

    def raw_of(self, index: int) -> str:
        return self.labels[index].raw

    def untyped_indices(self) -> frozenset[int]:
        return frozenset(l.index for l in self.labels if not l.typed)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "LabelRegistry":
        """Build a registry from raw label lines; '#' comments and blanks skipped."""
        labels: list[RelationLabel] = []
        seen: set[str] = set()
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line in seen:
                raise DuplicateLabel(f"duplicate label {line!r}")
            seen.add(line)
            labels.append(parse_label(line, index=len(labels)))
        return cls(labels=labels)

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    def to_lines(self) -> list[str]:
        return [l.raw for l in self.labels]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class CompatibilityTable:
    """Map from lowercased (head_type, tail_type) to admissible class indices.

    Untyped labels belong to every pair, including pairs absent from the
    schema; ``fallback`` holds exactly those indices.
    """

    pairs: frozenset[TypePair]
    allowed: dict[TypePair, frozenset[int]]
    fallback: frozenset[int]
    n_labels: int


def build_compatibility(registry: LabelRegistry) -> CompatibilityTable:
    """Derive the entity-pair -> admissible-label table from a registry.

    Requires at least one untyped label: without it, queries for type pairs
    outside the schema would have an empty candidate set, which makes the
    schema unusable for constrained decoding.
    """
    untyped = registry.untyped_indices()
    if not untyped:
        raise NoFallbackLabel(
            "registry has no untyped label; unseen type pairs would get an empty allowed set"
        )
    allowed: dict[TypePair, set[int]] = {}
    for lab in registry.labels:
        pair = lab.pair()
        if pair is None:
            continue
        allowed.setdefault(pair, set()).add(lab.index)
    frozen = {pair: frozenset(idx | untyped) for pair, idx in allowed.items()}
    return CompatibilityTable(
        pairs=frozenset(frozen),
        allowed=frozen,
        fallback=untyped,
        n_labels=len(registry),
    )


def allowed_labels(table: CompatibilityTable, head_type: str, tail_type: str) -> frozenset[int]:
    """Admissible class indices for an entity-type pair (case-insensitive).

    Pairs absent from the schema fall back to the untyped labels only.
    """
    result = table.allowed.get((head_type.lower(), tail_type.lower()), table.fallback)
    if not result:
        raise NoFallbackLabel(f"no admissible label for pair ({head_type!r}, {tail_type!r})")
    return result
