"""Command-line entry point wiring the pipeline stages together.

Subcommands: pretrain-corpus, pretrain, finetune, predict, evaluate,
ensemble, ablate. A YAML run config supplies defaults; command-line flags
override file values; every artifact-producing run persists its resolved
config and a stable hash next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import load_instances
from .errors import ConfigError, FintreeError
from .evaluation import (
    ENSEMBLE_SEED,
    f1_scores,
    hard_vote,
    load_predictions,
    predict_dataset,
    run_ablation,
    save_predictions,
)
from .modeling import build_backbone, build_model, load_checkpoint
from .pretraining import (
    FilterStats,
    filter_corpus,
    further_pretrain,
    load_corpus,
    save_corpus,
    token_histogram,
)
from .prompting import DEFAULT_MARKERS, DEFAULT_TEMPLATE, QUERY_FIRST, HashingTokenizer
from .schema import LabelRegistry, build_compatibility
from .training import TrainConfig, finetune, set_seed

_PATH_KEYS = ("labels", "train", "dev", "test", "corpus", "out", "fp_checkpoint")


@dataclass
class RunConfig:
    """Run-level configuration: TrainConfig plus paths and encoding choices."""

    training: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    backbone: str = "tiny"
    vocab_size: int = 8192
    head_dropout: float = 0.1
    template: str = DEFAULT_TEMPLATE
    markers: list = field(default_factory=lambda: list(DEFAULT_MARKERS))
    prompt_order: str = QUERY_FIRST
    field_map: dict | None = None
    length_unit: str = "tokens"
    corpus_min_len: int = 64
    corpus_max_len: int = 2048

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config file must hold a mapping")
        known = set(cls.__dataclass_fields__)
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown config key")
        training = TrainConfig.from_dict(raw.pop("training", {}) or {})
        paths = raw.pop("paths", {}) or {}
        for key in paths:
            if key not in _PATH_KEYS:
                raise ConfigError(f"paths.{key}", "unknown path key")
        return cls(training=training, paths=paths, **raw)

    def require_paths(self, *keys: str) -> None:
        for key in keys:
            value = self.paths.get(key)
            if not value:
                raise ConfigError(f"paths.{key}", "required path is missing")
            if key != "out" and not Path(value).exists():
                raise ConfigError(f"paths.{key}", f"path {value!r} does not exist")

    def resolved(self) -> dict:
        d = {
            "training": self.training.to_dict(),
            "paths": dict(self.paths),
            "backbone": self.backbone,
            "vocab_size": self.vocab_size,
            "head_dropout": self.head_dropout,
            "template": self.template,
            "markers": list(self.markers),
            "prompt_order": self.prompt_order,
            "field_map": self.field_map,
            "length_unit": self.length_unit,
            "corpus_min_len": self.corpus_min_len,
            "corpus_max_len": self.corpus_max_len,
        }
        return d

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _write_run_artifacts(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.yaml").write_text(
        yaml.safe_dump(cfg.resolved(), sort_keys=True), encoding="utf-8"
    )
    (out_dir / "config_hash.txt").write_text(cfg.config_hash() + "\n", encoding="utf-8")


def _write_run_sidecar(out_file: Path, cfg: RunConfig) -> None:
    sidecar = {"config": cfg.resolved(), "config_hash": cfg.config_hash()}
    Path(str(out_file) + ".run.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8"
    )


def _merge_flag(cfg_obj, attr: str, value) -> None:
    if value is not None:
        setattr(cfg_obj, attr, value)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    for key in ("train", "dev", "test", "labels", "out", "corpus"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            cfg.paths[key] = value
    _merge_flag(cfg, "backbone", getattr(args, "backbone", None))
    for attr in ("seed", "epochs", "batch_size", "max_len"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg.training, attr, value)
    if getattr(args, "lr", None) is not None:
        cfg.training.learning_rate = args.lr
    return cfg


def _build_fresh_model(cfg: RunConfig, registry: LabelRegistry):
    tokenizer = HashingTokenizer(vocab_size=cfg.vocab_size)
    return build_model(
        registry,
        tokenizer=tokenizer,
        backbone_spec=cfg.backbone,
        head_dropout=cfg.head_dropout,
        max_len=cfg.training.max_len,
        template=cfg.template,
        markers=tuple(cfg.markers),
        prompt_order=cfg.prompt_order,
        use_pi=cfg.training.use_pi,
    )


# --- subcommands ------------------------------------------------------------

def cmd_pretrain_corpus(args) -> int:
    cfg = _load_run_config(args)
    if args.min is not None:
        cfg.corpus_min_len = args.min
    if args.max is not None:
        cfg.corpus_max_len = args.max
    if args.in_dir:
        cfg.paths["corpus"] = args.in_dir
    cfg.require_paths("corpus", "out")
    out = Path(cfg.paths["out"])
    out.mkdir(parents=True, exist_ok=True)

    tokenizer = HashingTokenizer(vocab_size=cfg.vocab_size)
    docs = load_corpus(cfg.paths["corpus"], tokenizer, length_unit=cfg.length_unit)
    stats = FilterStats()
    kept = list(filter_corpus(docs, cfg.corpus_min_len, cfg.corpus_max_len, stats))
    save_corpus(out / "corpus.jsonl", kept)
    stats_payload = {
        "kept": stats.kept,
        "dropped": stats.dropped,
        "token_histogram": token_histogram(d.token_count for d in docs),
    }
    (out / "corpus_stats.json").write_text(json.dumps(stats_payload, indent=2), encoding="utf-8")
    _write_run_artifacts(out, cfg)
    print(f"kept {stats.kept} documents, dropped {stats.dropped} -> {out / 'corpus.jsonl'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    if args.steps is not None:
        cfg.training.pretrain_steps = args.steps
    if args.seq_len is not None:
        cfg.training.pretrain_seq_len = args.seq_len
    if args.checkpoint_every is not None:
        cfg.training.checkpoint_every = args.checkpoint_every
    cfg.require_paths("corpus", "out")
    out = Path(cfg.paths["out"])

    set_seed(cfg.training.seed)
    tokenizer = HashingTokenizer(vocab_size=cfg.vocab_size)
    for marker in cfg.markers:
        tokenizer.register_special(marker)
    backbone = build_backbone(
        cfg.backbone, vocab_size=tokenizer.vocab_size,
        max_positions=max(2048, cfg.training.pretrain_seq_len),
    )
    docs = load_corpus(cfg.paths["corpus"], tokenizer, length_unit=cfg.length_unit)
    _, log = further_pretrain(
        docs, backbone, cfg.training, tokenizer,
        resume_from=args.resume, out_dir=out,
    )
    _write_run_artifacts(out, cfg)
    last = next((e["loss"] for e in reversed(log) if e["loss"] is not None), None)
    print(f"pretrained {cfg.training.pretrain_steps} steps, last loss {last}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    cfg.require_paths("labels", "train", "dev", "out")
    registry = LabelRegistry.from_file(cfg.paths["labels"])
    table = build_compatibility(registry)
    train = load_instances(cfg.paths["train"], registry, "train", field_map=cfg.field_map)
    dev = load_instances(cfg.paths["dev"], registry, "dev", field_map=cfg.field_map)

    cfg.training.out_dir = cfg.paths["out"]
    if cfg.paths.get("fp_checkpoint"):
        cfg.training.use_fp_checkpoint = cfg.paths["fp_checkpoint"]
    set_seed(cfg.training.seed)
    model = _build_fresh_model(cfg, registry)
    model, log = finetune(train, dev, model, table, cfg.training)
    _write_run_artifacts(Path(cfg.paths["out"]), cfg)
    final = [e for e in log.epoch_events() if "micro_f1" in e]
    if final:
        best = max(final, key=lambda e: (e["micro_f1"], e["epoch"]))
        print(
            f"best dev micro_f1 {best['micro_f1']:.4f} "
            f"(macro {best['macro_f1']:.4f}, weighted {best['weighted_f1']:.4f}) "
            f"at epoch {best['epoch']}"
        )
    return 0


def cmd_predict(args) -> int:
    cfg = _load_run_config(args)
    model = load_checkpoint(args.model)
    table = build_compatibility(model.registry)
    ds = load_instances(args.data, model.registry, "test", field_map=cfg.field_map)
    preds = predict_dataset(model, ds, table, use_mcpp=args.mcpp, seed=ENSEMBLE_SEED)
    save_predictions(args.out, preds, model.registry)
    _write_run_sidecar(Path(args.out), cfg)
    print(f"wrote {len(preds)} predictions -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    registry = LabelRegistry.from_file(args.labels)
    gold = load_instances(args.gold, registry, "dev")
    preds = load_predictions(args.pred, registry)
    report = f1_scores(preds, gold, registry)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ensemble(args) -> int:
    cfg = _load_run_config(args)
    if args.labels:
        registry = LabelRegistry.from_file(args.labels)
    else:
        # ephemeral registry: label strings in first appearance order across
        # the prediction files, scanned in argv order (reproducible)
        seen: list[str] = []
        for path in args.pred:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        lab = json.loads(line)["label"]
                        if lab not in seen:
                            seen.append(lab)
        registry = LabelRegistry.from_lines(seen)
    runs = [load_predictions(p, registry) for p in args.pred]
    voted = hard_vote(runs)
    save_predictions(args.out, voted, registry)
    _write_run_sidecar(Path(args.out), cfg)
    print(f"ensembled {len(runs)} runs over {len(voted)} instances -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    cfg.require_paths("labels", "train", "dev", "out")
    registry = LabelRegistry.from_file(cfg.paths["labels"])
    table = build_compatibility(registry)
    train = load_instances(cfg.paths["train"], registry, "train", field_map=cfg.field_map)
    dev = load_instances(cfg.paths["dev"], registry, "dev", field_map=cfg.field_map)
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]

    def factory():
        set_seed(cfg.training.seed)
        return _build_fresh_model(cfg, registry)

    table_out = run_ablation(cfg.training, toggles, train, dev, table, factory)
    out = Path(cfg.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(
        json.dumps(table_out.to_dict(), indent=2), encoding="utf-8"
    )
    _write_run_artifacts(out, cfg)
    for row in table_out.rows:
        print(
            f"{row.name:8s} micro {row.report.micro_f1:.4f} "
            f"macro {row.report.macro_f1:.4f} weighted {row.report.weighted_f1:.4f} "
            f"(d_micro {row.deltas['micro_f1']:+.4f})"
        )
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fintree", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-corpus", help="filter a raw corpus by token length")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min", type=int, default=None)
    p.add_argument("--max", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_pretrain_corpus)

    p = sub.add_parser("pretrain", help="further-pretrain a backbone with masked-LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the relation classifier")
    p.add_argument("--train", default=None)
    p.add_argument("--dev", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--backbone", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="predict a dataset with a saved checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mcpp", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against gold labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="hard-vote multiple prediction files")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("ablate", help="run the single-removal ablation matrix")
    p.add_argument("--config", default=None)
    p.add_argument("--toggles", default="mcpp,fp,pi,awp")
    p.add_argument("--train", default=None)
    p.add_argument("--dev", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def dispatch(argv: list[str]) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FintreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
