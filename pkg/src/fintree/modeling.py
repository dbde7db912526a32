"""Encoder backbones, the mask-position classification head, and constrained
prediction.

The classifier reads the backbone's final hidden state at the mask position
and applies a linear head over the relation classes. At inference,
type-constrained masking (MCPP) excludes every class whose declared entity
types do not match the instance; scores are untouched, excluded classes are
simply removed from the argmax/softmax.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import REInstance
from .errors import DimensionMismatch, EmptyAllowedSet
from .prompting import (
    DEFAULT_MARKERS,
    DEFAULT_TEMPLATE,
    QUERY_FIRST,
    HashingTokenizer,
    PromptEncoding,
    TokenizerInterface,
    encode_example,
)
from .schema import CompatibilityTable, LabelRegistry, allowed_labels


class EncoderBackbone(nn.Module):
    """Contract every swappable encoder implements.

    forward maps [batch, length] ids plus a 0/1 attention mask to hidden
    states [batch, length, hidden_size] of the same length; mlm_logits exposes
    the language-modeling head used for further pretraining. Parameters must
    be enumerable by name (nn.Module gives this) so weight perturbation and
    checkpointing can snapshot them exactly.
    """

    @property
    def hidden_size(self) -> int:
        raise NotImplementedError

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def mlm_logits(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        """Serializable construction recipe for checkpointing."""
        raise NotImplementedError


class TinyEncoder(EncoderBackbone):
    """Small trainable transformer encoder; the desk-scale backbone.

    Learned token and position embeddings, a stack of standard encoder
    layers, and an untied linear MLM head.
    """

    def __init__(
        self,
        vocab_size: int,
        hidden_size: int = 64,
        num_layers: int = 2,
        num_heads: int = 4,
        ffn_size: int | None = None,
        max_positions: int = 2048,
        dropout: float = 0.1,
    ):
        super().__init__()
        self._config = {
            "type": "tiny",
            "vocab_size": vocab_size,
            "hidden_size": hidden_size,
            "num_layers": num_layers,
            "num_heads": num_heads,
            "ffn_size": ffn_size or 4 * hidden_size,
            "max_positions": max_positions,
            "dropout": dropout,
        }
        self.tok_embed = nn.Embedding(vocab_size, hidden_size)
        self.pos_embed = nn.Embedding(max_positions, hidden_size)
        self.input_norm = nn.LayerNorm(hidden_size)
        self.input_drop = nn.Dropout(dropout)
        layer = nn.TransformerEncoderLayer(
            d_model=hidden_size,
            nhead=num_heads,
            dim_feedforward=self._config["ffn_size"],
            dropout=dropout,
            activation="gelu",
            batch_first=True,
        )
        # nested-tensor fast path is prototype-grade; keep the standard path
        self.encoder = nn.TransformerEncoder(layer, num_layers=num_layers,
                                             enable_nested_tensor=False)
        self.mlm_head = nn.Linear(hidden_size, vocab_size)

    @property
    def hidden_size(self) -> int:
        return self._config["hidden_size"]

    @property
    def vocab_size(self) -> int:
        return self._config["vocab_size"]

    def config(self) -> dict:
        return dict(self._config)

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if input_ids.size(-1) > self._config["max_positions"]:
            raise ValueError(
                f"sequence length {input_ids.size(-1)} exceeds "
                f"max_positions {self._config['max_positions']}"
            )
        positions = torch.arange(input_ids.size(-1), device=input_ids.device)
        x = self.tok_embed(input_ids) + self.pos_embed(positions)
        x = self.input_drop(self.input_norm(x))
        pad = attention_mask == 0
        return self.encoder(x, src_key_padding_mask=pad)

    def mlm_logits(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(self.forward(input_ids, attention_mask))


class HFBackbone(EncoderBackbone):
    """Adapter over a transformers masked-LM model (paper-scale runs)."""

    def __init__(self, model, name: str = ""):
        super().__init__()
        self.model = model
        self._name = name

    @classmethod
    def from_pretrained(cls, name: str, cache_dir: str | None = None) -> "HFBackbone":
        from transformers import AutoModelForMaskedLM

        cache = cache_dir or os.environ.get("FINTREE_CACHE")
        return cls(AutoModelForMaskedLM.from_pretrained(name, cache_dir=cache), name=name)

    @property
    def hidden_size(self) -> int:
        return self.model.config.hidden_size

    @property
    def vocab_size(self) -> int:
        return self.model.config.vocab_size

    def config(self) -> dict:
        return {"type": "hf", "name": self._name}

    def resize_vocab(self, new_size: int) -> None:
        self.model.resize_token_embeddings(new_size)

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        out = self.model(
            input_ids=input_ids, attention_mask=attention_mask, output_hidden_states=True
        )
        return out.hidden_states[-1]

    def mlm_logits(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.model(input_ids=input_ids, attention_mask=attention_mask).logits


def build_backbone(spec: str, vocab_size: int, max_positions: int = 2048) -> EncoderBackbone:
    """Construct a backbone from an identifier.

    ``tiny`` or ``tiny:hidden=64,layers=2,heads=4,ffn=256,dropout=0.1`` builds
    the desk-scale encoder; ``hf:<name>`` loads a transformers checkpoint
    (cache directory taken from $FINTREE_CACHE).
    """
    if spec == "tiny" or spec.startswith("tiny:"):
        kwargs = {}
        if ":" in spec:
            for kv in spec.split(":", 1)[1].split(","):
                key, _, val = kv.partition("=")
                kwargs[key.strip()] = val.strip()
        return TinyEncoder(
            vocab_size=vocab_size,
            hidden_size=int(kwargs.get("hidden", 64)),
            num_layers=int(kwargs.get("layers", 2)),
            num_heads=int(kwargs.get("heads", 4)),
            ffn_size=int(kwargs["ffn"]) if "ffn" in kwargs else None,
            max_positions=max_positions,
            dropout=float(kwargs.get("dropout", 0.1)),
        )
    if spec.startswith("hf:"):
        return HFBackbone.from_pretrained(spec[3:])
    raise ValueError(f"unknown backbone spec {spec!r}")


def backbone_from_config(cfg: dict) -> EncoderBackbone:
    if cfg["type"] == "tiny":
        kwargs = {k: v for k, v in cfg.items() if k != "type"}
        return TinyEncoder(**kwargs)
    if cfg["type"] == "hf":
        return HFBackbone.from_pretrained(cfg["name"])
    raise ValueError(f"unknown backbone config type {cfg['type']!r}")


class RelationHead(nn.Module):
    """Linear classifier over the mask-position hidden state.

    Weights start uniform in +-1/sqrt(hidden_size), bias at zero; dropout is
    applied to the hidden state before the projection.
    """

    def __init__(self, hidden_size: int, n_labels: int, dropout: float = 0.1):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.linear = nn.Linear(hidden_size, n_labels)
        bound = 1.0 / hidden_size ** 0.5
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound)
            self.linear.bias.zero_()

    @property
    def in_features(self) -> int:
        return self.linear.in_features

    @property
    def n_labels(self) -> int:
        return self.linear.out_features

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.linear(self.drop(hidden))


class CallCounter:
    """Instrumentation hook: counts invocations of the constraint mask."""

    def __init__(self):
        self.count = 0

    def bump(self):
        self.count += 1

    def reset(self):
        self.count = 0


constraint_mask_counter = CallCounter()


@dataclass(frozen=True)
class RelationLogits:
    """Per-class scores plus the exclusion flags applied by MCPP."""

    values: torch.Tensor
    masked: tuple[bool, ...]

    def __post_init__(self):
        assert self.values.ndim == 1 and len(self.masked) == self.values.shape[0]
        if all(self.masked):
            raise EmptyAllowedSet("every class is masked")

    def constrained_argmax(self) -> int:
        vals = self.values.detach().to(torch.float64).numpy().copy()
        vals[np.asarray(self.masked)] = -np.inf
        return int(np.argmax(vals))

    def probabilities(self) -> np.ndarray:
        """Softmax over the unmasked classes; masked classes get exactly 0."""
        vals = self.values.detach().to(torch.float64).numpy()
        keep = ~np.asarray(self.masked)
        out = np.zeros_like(vals)
        shifted = np.exp(vals[keep] - vals[keep].max())
        out[keep] = shifted / shifted.sum()
        return out


def forward_logits(
    enc: PromptEncoding, backbone: EncoderBackbone, head: RelationHead
) -> RelationLogits:
    """Unconstrained class scores for one encoding (mask-position readout)."""
    if backbone.hidden_size != head.in_features:
        raise DimensionMismatch(
            f"backbone hidden size {backbone.hidden_size} != head input {head.in_features}"
        )
    ids = torch.tensor([enc.input_ids], dtype=torch.long)
    attn = torch.tensor([enc.attention_mask], dtype=torch.long)
    hidden = backbone(ids, attn)[0, enc.mask_index]
    values = head(hidden)
    return RelationLogits(values=values, masked=(False,) * head.n_labels)


def apply_constraint_mask(logits: RelationLogits, allowed: frozenset[int]) -> RelationLogits:
    """Exclude every class outside ``allowed``; scores are left untouched."""
    if not allowed:
        raise EmptyAllowedSet("allowed set is empty")
    constraint_mask_counter.bump()
    masked = tuple(i not in allowed for i in range(len(logits.masked)))
    return RelationLogits(values=logits.values, masked=masked)


@dataclass
class RelationModel:
    """Everything needed to turn an instance into a prediction."""

    backbone: EncoderBackbone
    head: RelationHead
    tokenizer: TokenizerInterface
    registry: LabelRegistry
    template: str = DEFAULT_TEMPLATE
    markers: tuple[str, str, str, str] = DEFAULT_MARKERS
    max_len: int = 1536
    prompt_order: str = QUERY_FIRST
    use_pi: bool = True

    def encode(self, inst: REInstance) -> PromptEncoding:
        return encode_example(
            inst,
            self.tokenizer,
            max_len=self.max_len,
            template=self.template,
            markers=self.markers,
            use_pi=self.use_pi,
            order=self.prompt_order,
        )

    def parameters(self):
        yield from self.backbone.parameters()
        yield from self.head.parameters()

    def named_parameters(self):
        for name, p in self.backbone.named_parameters():
            yield f"backbone.{name}", p
        for name, p in self.head.named_parameters():
            yield f"head.{name}", p

    def train_mode(self) -> None:
        self.backbone.train()
        self.head.train()

    def eval_mode(self) -> None:
        self.backbone.eval()
        self.head.eval()


def build_model(
    registry: LabelRegistry,
    tokenizer: TokenizerInterface | None = None,
    backbone_spec: str = "tiny",
    head_dropout: float = 0.1,
    max_len: int = 1536,
    template: str = DEFAULT_TEMPLATE,
    markers: tuple[str, str, str, str] = DEFAULT_MARKERS,
    prompt_order: str = QUERY_FIRST,
    use_pi: bool = True,
) -> RelationModel:
    """Assemble a fresh model; registers the marker tokens on the tokenizer."""
    tokenizer = tokenizer or HashingTokenizer()
    for name in markers:
        tokenizer.register_special(name)
    backbone = build_backbone(backbone_spec, vocab_size=tokenizer.vocab_size,
                              max_positions=max(2048, max_len))
    if isinstance(backbone, HFBackbone) and backbone.vocab_size < tokenizer.vocab_size:
        backbone.resize_vocab(tokenizer.vocab_size)
    head = RelationHead(backbone.hidden_size, len(registry), dropout=head_dropout)
    return RelationModel(
        backbone=backbone,
        head=head,
        tokenizer=tokenizer,
        registry=registry,
        template=template,
        markers=markers,
        max_len=max_len,
        prompt_order=prompt_order,
        use_pi=use_pi,
    )


def collate(encodings: list[PromptEncoding], pad_id: int):
    """Pad a batch of encodings to a common length.

    Returns (input_ids [B,L], attention_mask [B,L], mask_index [B]).
    """
    width = max(len(e) for e in encodings)
    ids = torch.full((len(encodings), width), pad_id, dtype=torch.long)
    attn = torch.zeros((len(encodings), width), dtype=torch.long)
    mask_idx = torch.zeros(len(encodings), dtype=torch.long)
    for i, enc in enumerate(encodings):
        ids[i, : len(enc)] = torch.tensor(enc.input_ids, dtype=torch.long)
        attn[i, : len(enc)] = torch.tensor(enc.attention_mask, dtype=torch.long)
        mask_idx[i] = enc.mask_index
    return ids, attn, mask_idx


def batch_logits(model: RelationModel, encodings: list[PromptEncoding]) -> torch.Tensor:
    """Class scores [B, K] for a batch (respects current train/eval mode)."""
    ids, attn, mask_idx = collate(encodings, model.tokenizer.pad_id)
    hidden = model.backbone(ids, attn)
    mask_states = hidden[torch.arange(len(encodings)), mask_idx]
    return model.head(mask_states)


def predict(
    inst: REInstance,
    model: RelationModel,
    table: CompatibilityTable,
    use_mcpp: bool = True,
) -> tuple[int, np.ndarray]:
    """Predict one instance; returns (class index, probability vector).

    With MCPP enabled the probability vector is a softmax over the admissible
    classes only, with inadmissible classes at exactly zero.
    """
    model.eval_mode()
    with torch.no_grad():
        logits = forward_logits(model.encode(inst), model.backbone, model.head)
    if use_mcpp:
        allowed = allowed_labels(table, *inst.pair())
        logits = apply_constraint_mask(logits, allowed)
    return logits.constrained_argmax(), logits.probabilities()


# --- checkpointing ----------------------------------------------------------

def save_checkpoint(out_dir: str | Path, model: RelationModel) -> Path:
    """Persist a model bundle: backbone.pt, head.bin, labels.txt, config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.registry.save(out / "labels.txt")
    weight = model.head.linear.weight.detach().cpu().numpy().astype(np.float32)
    bias = model.head.linear.bias.detach().cpu().numpy().astype(np.float32)
    with open(out / "head.bin", "wb") as fh:
        fh.write(weight.tobytes(order="C"))
        fh.write(bias.tobytes(order="C"))
    torch.save(
        {"config": model.backbone.config(), "state": model.backbone.state_dict()},
        out / "backbone.pt",
    )
    if isinstance(model.tokenizer, HashingTokenizer):
        tok_cfg = model.tokenizer.describe()
    else:
        tok_cfg = {"type": "hf", "markers": list(model.markers)}
    cfg = {
        "template": model.template,
        "markers": list(model.markers),
        "max_len": model.max_len,
        "prompt_order": model.prompt_order,
        "use_pi": model.use_pi,
        "head_dropout": model.head.drop.p,
        "tokenizer": tok_cfg,
        "backbone": model.backbone.config(),
    }
    (out / "config.json").write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return out


def load_checkpoint(ckpt_dir: str | Path) -> RelationModel:
    """Rebuild a model bundle saved by save_checkpoint."""
    ckpt = Path(ckpt_dir)
    cfg = json.loads((ckpt / "config.json").read_text(encoding="utf-8"))
    registry = LabelRegistry.from_file(ckpt / "labels.txt")
    if cfg["tokenizer"]["type"] != "hashing":
        raise ValueError("only hashing-tokenizer checkpoints can be reloaded standalone")
    tokenizer = HashingTokenizer.from_config(cfg["tokenizer"])
    stored = torch.load(ckpt / "backbone.pt", map_location="cpu", weights_only=True)
    backbone = backbone_from_config(stored["config"])
    backbone.load_state_dict(stored["state"])
    head = RelationHead(backbone.hidden_size, len(registry), dropout=cfg["head_dropout"])
    k, h = len(registry), backbone.hidden_size
    flat = np.fromfile(ckpt / "head.bin", dtype=np.float32)
    assert flat.size == k * h + k, "head.bin size does not match labels.txt and backbone"
    with torch.no_grad():
        head.linear.weight.copy_(torch.from_numpy(flat[: k * h].reshape(k, h)))
        head.linear.bias.copy_(torch.from_numpy(flat[k * h:]))
    return RelationModel(
        backbone=backbone,
        head=head,
        tokenizer=tokenizer,
        registry=registry,
        template=cfg["template"],
        markers=tuple(cfg["markers"]),
        max_len=cfg["max_len"],
        prompt_order=cfg["prompt_order"],
        use_pi=cfg["use_pi"],
    )
