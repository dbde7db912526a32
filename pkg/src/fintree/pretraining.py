"""Further-pretraining data preparation and the masked-LM training loop.

Documents are filtered to a token-length band (both bounds inclusive), split
into non-overlapping windows of the pretraining sequence length, and turned
into BERT-style masked examples: each non-special position is selected with
probability 0.15; a selected position is replaced by the mask id 80% of the
time, by a random vocabulary id 10%, and left unchanged 10%.

Every step derives its RNG from (seed, step), so resuming from a checkpoint
reproduces exactly the trajectory of an uninterrupted run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteLoss
from .modeling import EncoderBackbone
from .prompting import TokenizerInterface
from .training import TrainConfig

IGNORE_INDEX = -100

HISTOGRAM_EDGES = (0, 64, 128, 256, 512, 1024, 2048, 4096)


@dataclass(frozen=True)
class CorpusDocument:
    text: str
    token_count: int
    source_tag: str = ""


@dataclass(frozen=True)
class MLMExample:
    """Masked inputs plus labels holding the original id at selected positions."""

    input_ids: tuple[int, ...]
    labels: tuple[int, ...]


@dataclass
class FilterStats:
    kept: int = 0
    dropped: int = 0


def document_length(text: str, tokenizer: TokenizerInterface, length_unit: str = "tokens") -> int:
    if length_unit == "tokens":
        return len(tokenizer.encode(text))
    if length_unit == "words":
        return len(text.split())
    raise ValueError(f"unknown length unit {length_unit!r}")


def load_corpus(
    path: str | Path,
    tokenizer: TokenizerInterface,
    length_unit: str = "tokens",
) -> list[CorpusDocument]:
    """Read a corpus directory or file into documents.

    Accepts plain-text files (one document per file) and JSONL files with a
    ``text`` field; the source tag is the containing directory's name.
    """
    root = Path(path)
    files = sorted(p for p in ([root] if root.is_file() else root.rglob("*")) if p.is_file())
    docs: list[CorpusDocument] = []
    for f in files:
        tag = f.parent.name
        if f.suffix == ".jsonl":
            for line in f.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                text = json.loads(line)["text"]
                docs.append(CorpusDocument(text, document_length(text, tokenizer, length_unit), tag))
        elif f.suffix == ".txt":
            text = f.read_text(encoding="utf-8")
            docs.append(CorpusDocument(text, document_length(text, tokenizer, length_unit), tag))
    return docs


def save_corpus(path: str | Path, docs: Iterable[CorpusDocument]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(
                {"text": doc.text, "token_count": doc.token_count, "source_tag": doc.source_tag}
            ) + "\n")
            n += 1
    return n


def filter_corpus(
    docs: Iterable[CorpusDocument],
    min_len: int = 64,
    max_len: int = 2048,
    stats: FilterStats | None = None,
) -> Iterator[CorpusDocument]:
    """Keep documents with min_len <= token_count <= max_len, order preserved.

    Both bounds are inclusive. Pass a FilterStats to collect kept/dropped
    counts while streaming.
    """
    for doc in docs:
        if min_len <= doc.token_count <= max_len:
            if stats is not None:
                stats.kept += 1
            yield doc
        elif stats is not None:
            stats.dropped += 1


def token_histogram(counts: Iterable[int], edges: Sequence[int] = HISTOGRAM_EDGES) -> dict[str, int]:
    """Bucketed token-count histogram for corpus_stats.json."""
    buckets = {f"{lo}-{hi - 1}": 0 for lo, hi in zip(edges, edges[1:])}
    buckets[f">={edges[-1]}"] = 0
    for c in counts:
        for lo, hi in zip(edges, edges[1:]):
            if lo <= c < hi:
                buckets[f"{lo}-{hi - 1}"] += 1
                break
        else:
            buckets[f">={edges[-1]}"] += 1
    return buckets


def make_mlm_example(
    token_ids: Sequence[int],
    rng: np.random.Generator,
    mask_id: int,
    vocab_size: int,
    special_ids: frozenset[int] = frozenset(),
    mask_prob: float = 0.15,
) -> MLMExample:
    """BERT-style masking over one window; deterministic under a fixed rng."""
    input_ids = list(token_ids)
    labels = [IGNORE_INDEX] * len(input_ids)
    for i, tok in enumerate(token_ids):
        if tok in special_ids:
            continue
        if rng.random() >= mask_prob:
            continue
        labels[i] = tok
        branch = rng.random()
        if branch < 0.8:
            input_ids[i] = mask_id
        elif branch < 0.9:
            input_ids[i] = int(rng.integers(0, vocab_size))
        # final 10%: keep the original token
    return MLMExample(input_ids=tuple(input_ids), labels=tuple(labels))


def split_windows(token_ids: Sequence[int], window: int) -> list[list[int]]:
    """Non-overlapping windows; the trailing remainder is kept."""
    return [list(token_ids[i:i + window]) for i in range(0, len(token_ids), window)]


def _collate_mlm(examples: list[MLMExample], pad_id: int):
    width = max(len(e.input_ids) for e in examples)
    ids = torch.full((len(examples), width), pad_id, dtype=torch.long)
    labels = torch.full((len(examples), width), IGNORE_INDEX, dtype=torch.long)
    attn = torch.zeros((len(examples), width), dtype=torch.long)
    for r, ex in enumerate(examples):
        n = len(ex.input_ids)
        ids[r, :n] = torch.tensor(ex.input_ids, dtype=torch.long)
        labels[r, :n] = torch.tensor(ex.labels, dtype=torch.long)
        attn[r, :n] = 1
    return ids, attn, labels


def further_pretrain(
    corpus: Iterable[CorpusDocument],
    backbone: EncoderBackbone,
    cfg: TrainConfig,
    tokenizer: TokenizerInterface,
    resume_from: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> tuple[EncoderBackbone, list[dict]]:
    """Run cfg.pretrain_steps masked-LM steps over the corpus windows.

    Batches are sampled per step from a stateless (seed, step) generator and
    the optimizer state is checkpointed, so a resumed run continues the exact
    trajectory of an uninterrupted one. Returns the updated backbone and the
    per-step loss log.
    """
    windows: list[list[int]] = []
    for doc in corpus:
        windows.extend(split_windows(tokenizer.encode(doc.text), cfg.pretrain_seq_len))
    if cfg.pretrain_steps > 0 and not windows:
        raise ValueError("pretraining corpus produced no windows")

    lr = cfg.pretrain_lr if cfg.pretrain_lr is not None else cfg.learning_rate
    optimizer = torch.optim.AdamW(backbone.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    start_step = 0
    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=True)
        backbone.load_state_dict(payload["state"])
        optimizer.load_state_dict(payload["optimizer"])
        start_step = payload["next_step"]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    special = tokenizer.special_ids()
    log: list[dict] = []
    backbone.train()
    for step in range(start_step, cfg.pretrain_steps):
        rng = np.random.default_rng([cfg.seed, step])
        torch.manual_seed(cfg.seed * 1_000_003 + step)  # dropout; resume-invariant
        picks = rng.integers(0, len(windows), size=cfg.batch_size)
        examples = [
            make_mlm_example(windows[i], rng, tokenizer.mask_id, tokenizer.vocab_size, special)
            for i in picks
        ]
        ids, attn, labels = _collate_mlm(examples, tokenizer.pad_id)
        if int((labels != IGNORE_INDEX).sum()) == 0:
            log.append({"step": step, "loss": None})
            continue
        optimizer.zero_grad()
        logits = backbone.mlm_logits(ids, attn)
        loss = F.cross_entropy(
            logits.view(-1, logits.size(-1)), labels.view(-1), ignore_index=IGNORE_INDEX
        )
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step, [f"window:{int(i)}" for i in picks])
        loss.backward()
        if cfg.max_grad_norm:
            torch.nn.utils.clip_grad_norm_(backbone.parameters(), cfg.max_grad_norm)
        optimizer.step()
        log.append({"step": step, "loss": float(loss.detach())})

        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            torch.save(
                {
                    "next_step": step + 1,
                    "config": backbone.config(),
                    "state": backbone.state_dict(),
                    "optimizer": optimizer.state_dict(),
                },
                out / f"checkpoint_step{step + 1:07d}.pt",
            )

    if out is not None:
        torch.save({"config": backbone.config(), "state": backbone.state_dict()},
                   out / "pretrained.pt")
        with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as fh:
            for e in log:
                fh.write(json.dumps(e) + "\n")
    return backbone, log
