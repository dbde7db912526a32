"""Micro/macro/weighted F1, hard-voting ensembles, and the ablation matrix.

Per-class precision, recall and F1 come from the multi-class confusion
counts. Micro F1 uses global TP/FP/FN (and so equals accuracy for
single-label multi-class predictions); macro F1 averages only over classes
with gold support in the evaluated split; weighted F1 is the support-weighted
mean.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from .data import Dataset
from .errors import IdMismatch, IdOrderMismatch, MissingGold
from .modeling import (
    RelationLogits,
    RelationModel,
    apply_constraint_mask,
    batch_logits,
)
from .schema import CompatibilityTable, LabelRegistry, allowed_labels

ENSEMBLE_SEED = -1  # sentinel seed for vote outputs

ABLATION_TOGGLES = ("mcpp", "fp", "pi", "awp")


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    per_class: dict[str, ClassScores]
    micro_f1: float
    macro_f1: float
    weighted_f1: float
    n: int
    run_meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                raw: {"precision": s.precision, "recall": s.recall,
                      "f1": s.f1, "support": s.support}
                for raw, s in self.per_class.items()
            },
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "n": self.n,
            "run_meta": self.run_meta,
        }


@dataclass
class PredictionSet:
    """Ordered predictions of one run; probs rows sum to 1 over admitted classes."""

    ids: list[str]
    labels: list[int]
    probs: list[list[float]] | None = None
    seed: int = ENSEMBLE_SEED

    def __post_init__(self):
        if len(self.labels) != len(self.ids):
            raise ValueError("labels and ids must have the same length")
        if self.probs is not None:
            if len(self.probs) != len(self.ids):
                raise ValueError("probs and ids must have the same length")
            for row in self.probs:
                if abs(sum(row) - 1.0) > 1e-6:
                    raise ValueError("probability rows must sum to 1")

    def __len__(self) -> int:
        return len(self.ids)


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return precision, recall, f1


def f1_scores(preds: PredictionSet, gold: Dataset, registry: LabelRegistry) -> EvalReport:
    """Score a prediction set against gold labels.

    Prediction and gold ids must be the same set (order may differ); every
    gold instance must be labeled.
    """
    gold_by_id: dict[str, int] = {}
    for inst in gold:
        if inst.relation is None:
            raise MissingGold(f"instance {inst.id!r} has no gold relation")
        gold_by_id[inst.id] = registry.index_of(inst.relation)
    if set(preds.ids) != set(gold_by_id):
        missing = set(gold_by_id) - set(preds.ids)
        extra = set(preds.ids) - set(gold_by_id)
        raise IdMismatch(f"{len(missing)} gold ids unpredicted, {len(extra)} ids unknown")

    k = len(registry)
    tp = [0] * k
    fp = [0] * k
    fn = [0] * k
    for pid, pred_idx in zip(preds.ids, preds.labels):
        gold_idx = gold_by_id[pid]
        if pred_idx == gold_idx:
            tp[gold_idx] += 1
        else:
            fp[pred_idx] += 1
            fn[gold_idx] += 1

    support = Counter(gold_by_id.values())
    per_class: dict[str, ClassScores] = {}
    for idx in range(k):
        p, r, f = _f1(tp[idx], fp[idx], fn[idx])
        per_class[registry.raw_of(idx)] = ClassScores(p, r, f, support.get(idx, 0))

    n = len(preds)
    micro_tp = sum(tp)
    _, _, micro = _f1(micro_tp, sum(fp), sum(fn))
    supported = [idx for idx in range(k) if support.get(idx, 0) > 0]
    macro = (
        sum(per_class[registry.raw_of(i)].f1 for i in supported) / len(supported)
        if supported else 0.0
    )
    weighted = (
        sum(per_class[registry.raw_of(i)].f1 * support[i] for i in supported) / n
        if n else 0.0
    )
    return EvalReport(
        per_class=per_class,
        micro_f1=micro,
        macro_f1=macro,
        weighted_f1=weighted,
        n=n,
        run_meta={"seed": preds.seed},
    )


def hard_vote(runs: Sequence[PredictionSet]) -> PredictionSet:
    """Majority vote across runs sharing an identical id order.

    Ties are broken by the highest summed probability among the tied labels
    (over runs that carry probabilities), then by the lowest class index, so
    ensembles are reproducible regardless of run order.
    """
    if not runs:
        raise ValueError("hard_vote needs at least one run")
    ids = runs[0].ids
    for run in runs[1:]:
        if run.ids != ids:
            raise IdOrderMismatch("all runs must share an identical id order")

    labels: list[int] = []
    for i in range(len(ids)):
        votes = Counter(run.labels[i] for run in runs)
        top = max(votes.values())
        tied = [lab for lab, c in votes.items() if c == top]
        if len(tied) > 1:
            prob_sum = {
                lab: sum(run.probs[i][lab] for run in runs if run.probs is not None)
                for lab in tied
            }
            winner = min(tied, key=lambda lab: (-prob_sum[lab], lab))
        else:
            winner = tied[0]
        labels.append(winner)
    return PredictionSet(ids=list(ids), labels=labels, probs=None, seed=ENSEMBLE_SEED)


def predict_dataset(
    model: RelationModel,
    ds: Dataset,
    table: CompatibilityTable,
    use_mcpp: bool = True,
    batch_size: int = 32,
    seed: int = ENSEMBLE_SEED,
) -> PredictionSet:
    """Batched constrained prediction over a dataset."""
    model.eval_mode()
    encodings = [model.encode(inst) for inst in ds]
    k = len(model.registry)
    labels: list[int] = []
    probs: list[list[float]] = []
    with torch.no_grad():
        for start in range(0, len(encodings), batch_size):
            chunk = encodings[start:start + batch_size]
            rows = batch_logits(model, chunk)
            for row, enc in zip(rows, chunk):
                logits = RelationLogits(values=row, masked=(False,) * k)
                if use_mcpp:
                    logits = apply_constraint_mask(
                        logits, allowed_labels(table, *enc.pair)
                    )
                labels.append(logits.constrained_argmax())
                probs.append(logits.probabilities().tolist())
    return PredictionSet(ids=[inst.id for inst in ds], labels=labels, probs=probs, seed=seed)


def save_predictions(path: str | Path, preds: PredictionSet, registry: LabelRegistry) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, pid in enumerate(preds.ids):
            rec = {"id": pid, "label": registry.raw_of(preds.labels[i])}
            if preds.probs is not None:
                rec["probs"] = preds.probs[i]
            fh.write(json.dumps(rec) + "\n")


def load_predictions(path: str | Path, registry: LabelRegistry, seed: int = ENSEMBLE_SEED) -> PredictionSet:
    ids: list[str] = []
    labels: list[int] = []
    probs: list[list[float]] = []
    has_probs = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ids.append(str(rec["id"]))
            labels.append(registry.index_of(rec["label"]))
            if "probs" in rec:
                has_probs = True
                probs.append(rec["probs"])
    return PredictionSet(ids=ids, labels=labels, probs=probs if has_probs else None, seed=seed)


@dataclass
class AblationRow:
    name: str
    report: EvalReport
    deltas: dict[str, float]


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"name": r.name, "report": r.report.to_dict(), "deltas": r.deltas}
                for r in self.rows
            ]
        }


def _toggle_off(cfg, toggle: str):
    if toggle == "mcpp":
        return replace(cfg, use_mcpp_eval=False)
    if toggle == "fp":
        return replace(cfg, use_fp_checkpoint=None)
    if toggle == "pi":
        return replace(cfg, use_pi=False)
    if toggle == "awp":
        return replace(cfg, awp_start_epoch=cfg.epochs + 1)
    raise ValueError(f"unknown ablation toggle {toggle!r}")


def run_ablation(
    base_cfg,
    toggles: Iterable[str],
    train: Dataset,
    dev: Dataset,
    table: CompatibilityTable,
    model_factory: Callable[[], RelationModel],
) -> AblationTable:
    """Train the full model plus one single-removal row per requested toggle.

    The factory must produce a fresh, identically initialized model per call
    (seed inside the factory) so rows differ only by the toggled mechanism.
    Rows are scored on dev with the row's own eval settings; deltas are
    against the full model.
    """
    from .training import finetune

    toggles = [t.lower() for t in toggles]
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise ValueError(f"unknown ablation toggle {t!r}")

    rows: list[AblationRow] = []
    plan = [("full", base_cfg)]
    plan += [(f"-{t}", _toggle_off(base_cfg, t)) for t in ABLATION_TOGGLES if t in toggles]
    full_report: EvalReport | None = None
    for name, cfg in plan:
        model = model_factory()
        model, _ = finetune(train, dev, model, table, cfg)
        preds = predict_dataset(
            model, dev, table, use_mcpp=cfg.use_mcpp_eval, batch_size=cfg.batch_size,
            seed=cfg.seed,
        )
        report = f1_scores(preds, dev, model.registry)
        if full_report is None:
            full_report = report
        deltas = {
            "micro_f1": report.micro_f1 - full_report.micro_f1,
            "macro_f1": report.macro_f1 - full_report.macro_f1,
            "weighted_f1": report.weighted_f1 - full_report.weighted_f1,
        }
        rows.append(AblationRow(name=name, report=report, deltas=deltas))
    return AblationTable(rows=rows)
