"""Query-pattern construction, entity position markers, encoder-ready encoding.

Every instance becomes ``[query tokens] [SEP] [marked sentence tokens]``. The
query states the two entities and their types and carries exactly one mask
token whose hidden state the classifier reads. Position information (PI)
markers wrap each entity span inside the sentence.

Special ids (mask, separator, markers) are injected structurally while
encoding, never recovered by string matching, so the "exactly one mask id"
and single-marker invariants hold even when sentence tokens collide with
special-token spellings.
"""

from __future__ import annotations

import hashlib
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

from .data import REInstance
from .errors import QueryTooLong

MASK_PLACEHOLDER = "[MASK]"

DEFAULT_TEMPLATE = (
    "The relation is {mask} between {e1} and {e2}. "
    "The entity of {e1} is {t1} and {e2} is {t2}."
)

# (e1 open, e1 close, e2 open, e2 close)
DEFAULT_MARKERS = ("[E1]", "[/E1]", "[E2]", "[/E2]")

QUERY_FIRST = "query_first"
SENTENCE_FIRST = "sentence_first"

_SLOT = re.compile(r"\{(mask|e1|e2|t1|t2)\}")


class TokenizerInterface(ABC):
    """Minimal tokenizer capability the pipeline depends on.

    ``encode`` maps ordinary text to ids and must never emit a special id;
    special ids enter sequences only through the properties below and
    ``register_special``, which must return a single stable id per token.
    """

    @property
    @abstractmethod
    def vocab_size(self) -> int: ...

    @property
    @abstractmethod
    def mask_token(self) -> str: ...

    @property
    @abstractmethod
    def mask_id(self) -> int: ...

    @property
    @abstractmethod
    def sep_id(self) -> int: ...

    @property
    @abstractmethod
    def pad_id(self) -> int: ...

    @abstractmethod
    def register_special(self, token: str) -> int:
        """Register (idempotently) a special token; returns its single id."""

    @abstractmethod
    def special_id(self, token: str) -> int | None:
        """Id of a registered special token, or None."""

    @abstractmethod
    def encode(self, text: str) -> list[int]:
        """Encode ordinary text (no special tokens added or recognized)."""

    def special_ids(self) -> frozenset[int]:
        """All ids reserved for special tokens (used to shield MLM masking)."""
        return frozenset({self.mask_id, self.sep_id, self.pad_id})


class HashingTokenizer(TokenizerInterface):
    """Deterministic whitespace tokenizer hashing words into a fixed vocab.

    Ids below ``reserved_slots`` belong to special tokens ([PAD]=0, [MASK]=1,
    [SEP]=2, then registration order); ordinary words hash into the remaining
    range, so no word can ever produce a special id. Collisions between rare
    words are acceptable at desk scale.
    """

    def __init__(self, vocab_size: int = 8192, reserved_slots: int = 64):
        if vocab_size <= reserved_slots:
            raise ValueError("vocab_size must exceed reserved_slots")
        self._vocab_size = vocab_size
        self._reserved = reserved_slots
        self._specials: dict[str, int] = {}
        for tok in ("[PAD]", MASK_PLACEHOLDER, "[SEP]"):
            self._specials[tok] = len(self._specials)

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def reserved_slots(self) -> int:
        return self._reserved

    @property
    def mask_token(self) -> str:
        return MASK_PLACEHOLDER

    @property
    def pad_id(self) -> int:
        return self._specials["[PAD]"]

    @property
    def mask_id(self) -> int:
        return self._specials[MASK_PLACEHOLDER]

    @property
    def sep_id(self) -> int:
        return self._specials["[SEP]"]

    def register_special(self, token: str) -> int:
        if token in self._specials:
            return self._specials[token]
        if len(self._specials) >= self._reserved:
            raise ValueError(f"no reserved slot left for special token {token!r}")
        self._specials[token] = len(self._specials)
        return self._specials[token]

    def special_id(self, token: str) -> int | None:
        return self._specials.get(token)

    def special_ids(self) -> frozenset[int]:
        return frozenset(self._specials.values())

    def _word_id(self, word: str) -> int:
        span = self._vocab_size - self._reserved
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return self._reserved + int.from_bytes(digest, "big") % span

    def encode(self, text: str) -> list[int]:
        return [self._word_id(w) for w in text.split()]

    def describe(self) -> dict:
        """Serializable construction recipe (registration order preserved)."""
        ordered = sorted(self._specials, key=self._specials.get)
        return {
            "type": "hashing",
            "vocab_size": self._vocab_size,
            "reserved_slots": self._reserved,
            "specials": ordered,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "HashingTokenizer":
        tok = cls(vocab_size=cfg["vocab_size"], reserved_slots=cfg["reserved_slots"])
        for name in cfg["specials"]:
            tok.register_special(name)
        return tok


class HFTokenizer(TokenizerInterface):
    """Adapter over a Hugging Face tokenizer object.

    ``encode`` delegates with add_special_tokens=False; note that HF added
    tokens are recognized by string match, so sentence words spelled exactly
    like a special token map to its id (a limitation of that backend).
    Callers registering markers must resize backbone embeddings themselves.
    """

    def __init__(self, hf_tokenizer):
        self._tok = hf_tokenizer

    @property
    def vocab_size(self) -> int:
        return len(self._tok)

    @property
    def mask_token(self) -> str:
        return self._tok.mask_token

    @property
    def mask_id(self) -> int:
        return self._tok.mask_token_id

    @property
    def sep_id(self) -> int:
        return self._tok.sep_token_id

    @property
    def pad_id(self) -> int:
        return self._tok.pad_token_id

    def register_special(self, token: str) -> int:
        existing = self.special_id(token)
        if existing is None:
            self._tok.add_special_tokens(
                {"additional_special_tokens": [token]}, replace_additional_special_tokens=False
            )
        return self._tok.convert_tokens_to_ids(token)

    def special_id(self, token: str) -> int | None:
        idx = self._tok.convert_tokens_to_ids(token)
        unk = getattr(self._tok, "unk_token_id", None)
        return None if idx is None or idx == unk else idx

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False)

    def special_ids(self) -> frozenset[int]:
        return frozenset(self._tok.all_special_ids)


@dataclass(frozen=True)
class PromptEncoding:
    """Encoder-ready sequence with the mask position and marker spans recorded.

    Marker spans are half-open index ranges into ``input_ids`` covering the
    opening marker through the closing marker; None when PI is disabled or the
    closing marker fell to truncation. No padding is present, so
    ``attention_mask`` is all ones.
    """

    input_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    mask_index: int
    e1_marker_span: tuple[int, int] | None
    e2_marker_span: tuple[int, int] | None
    pair: tuple[str, str]

    def __post_init__(self):
        assert len(self.input_ids) == len(self.attention_mask)
        assert 0 <= self.mask_index < len(self.input_ids)

    def __len__(self) -> int:
        return len(self.input_ids)


def build_query(inst: REInstance, template: str = DEFAULT_TEMPLATE) -> str:
    """Render the query pattern for one instance.

    Slots: {mask} (exactly one, required), {e1}/{e2} entity surfaces
    (space-joined span tokens), {t1}/{t2} entity types. Substitution is a
    single pass, so surfaces containing slot spellings are inert.
    """
    if _SLOT.findall(template).count("mask") != 1:
        raise ValueError("template must contain exactly one {mask} slot")
    values = {
        "mask": MASK_PLACEHOLDER,
        "e1": inst.e1_surface(),
        "e2": inst.e2_surface(),
        "t1": inst.e1_type,
        "t2": inst.e2_type,
    }
    return _SLOT.sub(lambda m: values[m.group(1)], template)


def _sentence_pieces(inst: REInstance, markers: tuple[str, str, str, str], use_pi: bool):
    """Sentence as (kind, payload) pieces; kind is 'text' or 'marker'."""
    if not use_pi:
        return [("text", inst.tokens)]
    e1_open, e1_close, e2_open, e2_close = markers
    spans = sorted(
        [(inst.e1_span, e1_open, e1_close), (inst.e2_span, e2_open, e2_close)],
        key=lambda s: s[0][0],
    )
    pieces = []
    cursor = 0
    for (start, end), open_tok, close_tok in spans:
        pieces.append(("text", inst.tokens[cursor:start]))
        pieces.append(("marker", open_tok))
        pieces.append(("text", inst.tokens[start:end]))
        pieces.append(("marker", close_tok))
        cursor = end
    pieces.append(("text", inst.tokens[cursor:]))
    return pieces


def insert_entity_markers(
    inst: REInstance, markers: tuple[str, str, str, str] = DEFAULT_MARKERS, use_pi: bool = True
) -> str:
    """Space-joined sentence with marker tokens around each entity span."""
    words: list[str] = []
    for kind, payload in _sentence_pieces(inst, markers, use_pi):
        if kind == "marker":
            words.append(payload)
        else:
            words.extend(payload)
    return " ".join(words)


def encode_example(
    inst: REInstance,
    tok: TokenizerInterface,
    max_len: int = 1536,
    template: str = DEFAULT_TEMPLATE,
    markers: tuple[str, str, str, str] = DEFAULT_MARKERS,
    use_pi: bool = True,
    order: str = QUERY_FIRST,
) -> PromptEncoding:
    """Encode one instance into a PromptEncoding.

    Default layout is query, separator, marked sentence; only the sentence
    tail is ever truncated, so the mask and the type statements always
    survive. ``order=sentence_first`` flips the layout while still budgeting
    the sentence so the query stays intact.
    """
    if use_pi:
        marker_ids = []
        for name in markers:
            mid = tok.special_id(name)
            if mid is None:
                raise ValueError(f"marker token {name!r} is not registered with the tokenizer")
            marker_ids.append(mid)

    head, sep, tail = build_query(inst, template).partition(MASK_PLACEHOLDER)
    assert sep, "rendered query lost its mask placeholder"
    head_ids = tok.encode(head)
    query_ids = head_ids + [tok.mask_id] + tok.encode(tail)
    mask_offset = len(head_ids)

    if len(query_ids) + 1 > max_len:
        raise QueryTooLong(
            f"query needs {len(query_ids) + 1} positions but max_len is {max_len}"
        )

    sent_ids: list[int] = []
    marker_pos: list[int] = []  # positions of the 4 markers within the sentence ids
    marker_iter = iter(marker_ids) if use_pi else iter(())
    for kind, payload in _sentence_pieces(inst, markers, use_pi):
        if kind == "marker":
            marker_pos.append(len(sent_ids))
            sent_ids.append(next(marker_iter))
        else:
            sent_ids.extend(tok.encode(" ".join(payload)))

    if order == QUERY_FIRST:
        ids = (query_ids + [tok.sep_id] + sent_ids)[:max_len]
        mask_index = mask_offset
        sent_base = len(query_ids) + 1
    elif order == SENTENCE_FIRST:
        budget = max_len - len(query_ids) - 1
        sent_ids = sent_ids[:budget]
        ids = sent_ids + [tok.sep_id] + query_ids
        mask_index = len(sent_ids) + 1 + mask_offset
        sent_base = 0
    else:
        raise ValueError(f"unknown prompt order {order!r}")

    def marker_span(open_rel: int, close_rel: int):
        open_abs, close_abs = sent_base + open_rel, sent_base + close_rel
        if close_abs < len(ids):
            return (open_abs, close_abs + 1)
        return None

    e1_span = e2_span = None
    if use_pi:
        # _sentence_pieces orders markers by span position, e1's pair may be
        # second; recover which pair is which from the span order.
        e1_first = inst.e1_span[0] <= inst.e2_span[0]
        first = marker_span(marker_pos[0], marker_pos[1])
        second = marker_span(marker_pos[2], marker_pos[3])
        e1_span, e2_span = (first, second) if e1_first else (second, first)

    return PromptEncoding(
        input_ids=tuple(ids),
        attention_mask=(1,) * len(ids),
        mask_index=mask_index,
        e1_marker_span=e1_span,
        e2_marker_span=e2_span,
        pair=inst.pair(),
    )
