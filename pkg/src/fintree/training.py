"""Fine-tuning: AdamW with a cosine warm-up schedule, cross-entropy on the
mask-position logits, and adversarial weight perturbation from a configurable
epoch onward.

The perturbation step snapshots the targeted weight matrices, moves each one
along its own normalized gradient direction (scaled by the parameter norm,
capped by an epsilon ball), accumulates gradients from a second
forward/backward at the perturbed point, then restores the snapshots exactly.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .errors import ConfigError, MissingGold, NonFiniteLoss, StateError
from .modeling import RelationModel, batch_logits, save_checkpoint
from .schema import CompatibilityTable


@dataclass
class TrainConfig:
    """All run hyperparameters in one serializable record.

    learning_rate, batch_size, epochs, max_len and awp_start_epoch carry the
    reference defaults; weight_decay, warmup_fraction, max_grad_norm and the
    awp_lr/awp_eps pair are exposed knobs with ordinary defaults. Setting
    awp_start_epoch to epochs + 1 disables the perturbation entirely.
    """

    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 5
    max_len: int = 1536
    warmup_fraction: float = 0.06
    awp_start_epoch: int = 3
    awp_lr: float = 1e-4
    awp_eps: float = 1e-2
    seed: int = 42
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    use_pi: bool = True
    use_mcpp_eval: bool = True
    use_fp_checkpoint: str | None = None
    out_dir: str | None = None
    # further-pretraining knobs (steps must be set explicitly; lr falls back
    # to learning_rate)
    pretrain_steps: int = 0
    pretrain_seq_len: int = 128
    pretrain_lr: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction", "must lie in [0, 1]")
        if not 1 <= self.awp_start_epoch <= self.epochs + 1:
            raise ConfigError(
                "awp_start_epoch", f"must lie in [1, epochs + 1] = [1, {self.epochs + 1}]"
            )
        if self.awp_lr < 0 or self.awp_eps < 0:
            raise ConfigError("awp_lr", "awp_lr and awp_eps must be non-negative")
        if self.max_len < 4:
            raise ConfigError("max_len", "too small to hold a query")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        return cls(**d)


@dataclass
class TrainingLog:
    """Step and epoch events of one run, serializable as JSONL."""

    seed: int
    events: list[dict] = field(default_factory=list)

    def log(self, **event) -> None:
        self.events.append(event)

    def step_events(self) -> list[dict]:
        return [e for e in self.events if "step" in e]

    def epoch_events(self) -> list[dict]:
        return [e for e in self.events if "step" not in e and "epoch" in e]

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"seed": self.seed}) + "\n")
            for e in self.events:
                fh.write(json.dumps(e) + "\n")


def set_seed(seed: int) -> None:
    """Seed every random source used by the pipeline (python, numpy, torch)."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def lr_at_step(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Learning rate: linear ramp 0 -> peak, then cosine decay to 0.

    When warmup_steps == total_steps the schedule is a pure ramp ending at
    peak (there is no decay phase to reach zero).
    """
    if peak <= 0:
        raise ValueError("peak learning rate must be positive")
    if not 0 <= warmup_steps <= total_steps:
        raise ValueError("need 0 <= warmup_steps <= total_steps")
    if not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _default_awp_filter(name: str, param: torch.Tensor) -> bool:
    # weight matrices only: biases and normalization gains are 1-D
    return param.ndim >= 2


class WeightPerturber:
    """Snapshot / perturb / restore machinery for the adversarial step."""

    def __init__(
        self,
        model: RelationModel,
        awp_lr: float,
        awp_eps: float,
        param_filter: Callable[[str, torch.Tensor], bool] = _default_awp_filter,
    ):
        self.awp_lr = awp_lr
        self.awp_eps = awp_eps
        self.targets = [
            (name, p) for name, p in model.named_parameters() if param_filter(name, p)
        ]
        self._saved: dict[str, torch.Tensor] = {}
        self.perturbed = False

    @torch.no_grad()
    def perturb(self) -> None:
        """Move each targeted weight along its normalized gradient direction.

        Parameters with missing or zero gradients are skipped, so there is
        never a division by zero.
        """
        if self.perturbed:
            raise StateError("perturb called while already perturbed")
        for name, p in self.targets:
            if p.grad is None:
                continue
            grad_norm = p.grad.norm()
            if grad_norm == 0:
                continue
            self._saved[name] = p.detach().clone()
            delta = self.awp_lr * p.norm() * p.grad / grad_norm
            cap = self.awp_eps * p.norm()
            delta_norm = delta.norm()
            if delta_norm > cap:
                delta = delta * (cap / delta_norm)
            p.add_(delta)
        self.perturbed = True

    @torch.no_grad()
    def restore(self) -> None:
        """Copy the snapshots back; parameters end bitwise equal to pre-perturb."""
        for name, p in self.targets:
            if name in self._saved:
                p.copy_(self._saved[name])
        self._saved.clear()
        self.perturbed = False


def awp_step(perturber: WeightPerturber, compute_loss: Callable[[], torch.Tensor]) -> float:
    """One adversarial pass: perturb, backprop at the perturbed point
    (gradients accumulate on top of the clean ones), restore exactly.

    Returns the adversarial loss value.
    """
    perturber.perturb()
    try:
        loss = compute_loss()
        loss.backward()
    finally:
        perturber.restore()
    return float(loss.detach())


def _snapshot(model: RelationModel) -> dict[str, torch.Tensor]:
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.detach().clone()
    return state


def _restore(model: RelationModel, state: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(state[name])


def _load_backbone_state(model: RelationModel, path: str) -> None:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    state = payload["state"] if isinstance(payload, dict) and "state" in payload else payload
    model.backbone.load_state_dict(state)


def _batches(order: np.ndarray, batch_size: int) -> Iterable[np.ndarray]:
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def finetune(
    train: Dataset,
    dev: Dataset,
    model: RelationModel,
    table: CompatibilityTable,
    cfg: TrainConfig,
) -> tuple[RelationModel, TrainingLog]:
    """Train the model on labeled instances; returns the best-dev model.

    Cross-entropy on the mask-position logits, AdamW, cosine warm-up; the
    adversarial step runs for every batch of epochs >= awp_start_epoch. Dev
    micro F1 picks the returned weights (ties go to the later epoch); the
    constraint mask is applied to that evaluation only when use_mcpp_eval is
    set, never to the training loss.
    """
    from .evaluation import f1_scores, predict_dataset

    set_seed(cfg.seed)
    log = TrainingLog(seed=cfg.seed)
    if cfg.use_fp_checkpoint:
        _load_backbone_state(model, cfg.use_fp_checkpoint)
    model.use_pi = cfg.use_pi
    model.max_len = cfg.max_len
    if cfg.epochs == 0:
        return model, log

    for inst in train:
        if inst.relation is None:
            raise MissingGold(f"training instance {inst.id!r} has no gold relation")
    encodings = [model.encode(inst) for inst in train]
    targets = [model.registry.index_of(inst.relation) for inst in train]

    params = list(model.parameters())
    optimizer = torch.optim.AdamW(
        params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    perturber = WeightPerturber(model, cfg.awp_lr, cfg.awp_eps)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_fraction * total_steps))
    shuffle_rng = np.random.default_rng(cfg.seed)

    best_micro, best_epoch, best_state = -1.0, -1, None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train_mode()
        order = shuffle_rng.permutation(len(train))
        awp_batches = 0
        for chunk in _batches(order, cfg.batch_size):
            lr = lr_at_step(step, total_steps, warmup_steps, cfg.learning_rate)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch_encs = [encodings[j] for j in chunk]
            batch_y = torch.tensor([targets[j] for j in chunk], dtype=torch.long)
            optimizer.zero_grad()
            loss = F.cross_entropy(batch_logits(model, batch_encs), batch_y)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step, [train.instances[j].id for j in chunk])
            loss.backward()
            event = {"step": step, "epoch": epoch, "loss": float(loss.detach()), "lr": lr}
            if epoch >= cfg.awp_start_epoch:
                event["adv_loss"] = awp_step(
                    perturber,
                    lambda: F.cross_entropy(batch_logits(model, batch_encs), batch_y),
                )
                awp_batches += 1
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()
            log.log(**event)
            step += 1

        if len(dev):
            preds = predict_dataset(
                model, dev, table, use_mcpp=cfg.use_mcpp_eval,
                batch_size=cfg.batch_size, seed=cfg.seed,
            )
            report = f1_scores(preds, dev, model.registry)
            log.log(
                epoch=epoch,
                micro_f1=report.micro_f1,
                macro_f1=report.macro_f1,
                weighted_f1=report.weighted_f1,
                awp_batches=awp_batches,
            )
            if report.micro_f1 >= best_micro:
                best_micro, best_epoch, best_state = report.micro_f1, epoch, _snapshot(model)
        else:
            log.log(epoch=epoch, awp_batches=awp_batches)

    if best_state is not None:
        _restore(model, best_state)
        log.log(best_epoch=best_epoch, best_micro_f1=best_micro)
    if cfg.out_dir:
        out = save_checkpoint(cfg.out_dir, model)
        log.save_jsonl(out / "training_log.jsonl")
        (out / "train_config.json").write_text(
            json.dumps(cfg.to_dict(), indent=2), encoding="utf-8"
        )
    return model, log
