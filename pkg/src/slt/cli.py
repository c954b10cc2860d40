"""Command-line entry point: ``slt <command> ...``.

Exit codes: 0 success, 1 environment/IO failure, 2 usage or configuration error.
Logs go to stderr; machine-readable results go to stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusIOError, SyntheticSpec, generate_corpus, load_splits, write_corpus
from .errors import CheckpointError, ConfigurationError, CorpusError, PipelineOrderError, SLTError
from .mapper import MapperConfig
from .metrics import TASKS
from .pipeline import (
    TrainConfig,
    build_joint_model,
    evaluate,
    mapper_config_for,
    pretrain_translation,
    pretrain_visual,
    train_joint,
)
from .translation import TranslationConfig
from .visual import VisualEncoderConfig

log = logging.getLogger("slt")


class UsageError(SLTError):
    pass


@dataclasses.dataclass
class DataSection(SyntheticSpec):
    n_train: int = 500
    n_dev: int = 50
    n_test: int = 50


# fields filled in from the data or other sections rather than by the user
_DERIVED = {
    "visual": {"d_in", "num_glosses"},
    "translation": {"num_glosses", "tgt_vocab_size"},
    "mapper": {"d_in", "d_out"},
    "train": {"stage"},
}
_SECTIONS = {
    "data": DataSection,
    "visual": VisualEncoderConfig,
    "translation": TranslationConfig,
    "mapper": MapperConfig,
    "train": TrainConfig,
}
_STAGE_KEYS = ("pretrain_visual", "pretrain_translation", "train_joint")


def _build(cls, values: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(section, set())
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise UsageError(f"unknown config key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise UsageError(f"bad config section '{section}': {e}") from None


@dataclasses.dataclass
class RunConfig:
    data: DataSection
    visual: VisualEncoderConfig
    translation: TranslationConfig
    mapper: MapperConfig
    train: TrainConfig
    stages: dict
    embeddings: dict
    mapper_keys: frozenset = frozenset()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(raw) - set(_SECTIONS) - {"stages", "embeddings"})
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        for name in _SECTIONS:
            if not isinstance(raw.get(name, {}), dict):
                raise UsageError(f"config section '{name}' must be an object")
        parts = {name: _build(c, dict(raw.get(name, {})), name) for name, c in _SECTIONS.items()}
        try:
            parts["mapper"].validate()
        except ConfigurationError as e:
            raise UsageError(str(e)) from None
        stages = dict(raw.get("stages", {}))
        for stage, overrides in stages.items():
            if stage not in _STAGE_KEYS:
                raise UsageError(f"unknown stage override '{stage}'")
            _build(TrainConfig, overrides, "train")
        embeddings = dict(raw.get("embeddings", {}))
        bad = sorted(set(embeddings) - {"source", "target"})
        if bad:
            raise UsageError(f"unknown config key(s) in 'embeddings': {', '.join(bad)}")
        seed = os.environ.get("SLT_SEED")
        if seed is not None:
            parts["data"].seed = int(seed)
            parts["train"].seed = int(seed)
        return cls(**parts, stages=stages, embeddings=embeddings,
                   mapper_keys=frozenset(raw.get("mapper", {})))

    def train_config(self, stage: str, epochs: int | None) -> TrainConfig:
        values = {**dataclasses.asdict(self.train), **self.stages.get(stage, {}), "stage": stage}
        if epochs is not None:
            values["epochs"] = epochs
        return TrainConfig(**values).resolved()

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "visual": dataclasses.asdict(self.visual),
            "translation": dataclasses.asdict(self.translation),
            "mapper": dataclasses.asdict(self.mapper),
            "train": dataclasses.asdict(self.train),
            "stages": self.stages,
            "embeddings": self.embeddings,
        }


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    p = Path(path)
    if not p.is_file():
        raise CorpusIOError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config {p} is not valid JSON: {e}") from None
    return RunConfig.from_dict(raw)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _write_outputs(out: Path, model, result, run_cfg: RunConfig, train_cfg: TrainConfig):
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.sltc")
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
        for row in result.history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    effective = run_cfg.to_dict()
    effective["effective_train"] = dataclasses.asdict(train_cfg)
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    summary = {
        "checkpoint": str(out / "model.sltc"),
        "stage": train_cfg.stage,
        "epochs": train_cfg.epochs,
        "best_epoch": result.best_epoch,
        "skipped": result.skipped,
    }
    if result.history:
        summary["best"] = result.history[result.best_epoch - 1]
    _emit(summary)


def cmd_gen_data(args):
    cfg = load_run_config(args.config)
    d = cfg.data
    spec = SyntheticSpec(**{f.name: getattr(d, f.name) for f in dataclasses.fields(SyntheticSpec)})
    splits = generate_corpus(spec, d.n_train, d.n_dev, d.n_test)
    out = Path(args.out)
    for name, samples in zip(("train", "dev", "test"), splits):
        write_corpus(samples, out, name)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({name: len(s) for name, s in zip(("train", "dev", "test"), splits)})


def _load_embeddings(cfg: RunConfig):
    tables = {}
    for which, path in cfg.embeddings.items():
        p = Path(path)
        if not p.is_file():
            raise CorpusIOError(f"{which} embedding file not found: {p}")
        tables[which] = np.load(p)
    return tables or None


def cmd_pretrain_visual(args):
    cfg = load_run_config(args.config)
    tcfg = cfg.train_config("pretrain_visual", args.epochs)
    splits = load_splits(args.data, ("train", "dev"))
    result = pretrain_visual(splits["train"], splits["dev"], tcfg, cfg.visual, lang=cfg.data.lang)
    _write_outputs(Path(args.out), result.model, result, cfg, tcfg)


def cmd_pretrain_translation(args):
    cfg = load_run_config(args.config)
    tcfg = cfg.train_config("pretrain_translation", args.epochs)
    splits = load_splits(args.data, ("train", "dev"))
    result = pretrain_translation(
        splits["train"], splits["dev"], tcfg, cfg.translation,
        lang=cfg.data.lang, embeddings=_load_embeddings(cfg),
    )
    _write_outputs(Path(args.out), result.model, result, cfg, tcfg)
    result.model.text_vocab.save(Path(args.out) / "vocab.txt")


def cmd_train_joint(args):
    cfg = load_run_config(args.config)
    tcfg = cfg.train_config("train_joint", args.epochs)
    if (args.init_visual is None or args.init_translation is None) and not args.allow_scratch:
        raise UsageError(
            "train-joint needs --init-visual and --init-translation (or --allow-scratch)"
        )
    visual_init = load_checkpoint(args.init_visual) if args.init_visual else None
    trans_init = load_checkpoint(args.init_translation) if args.init_translation else None
    splits = load_splits(args.data, ("train", "dev"))
    vcfg = visual_init.visual.cfg if visual_init else dataclasses.replace(
        cfg.visual, num_glosses=len({g for s in splits["train"] for g in s.gloss})
    )
    trcfg = trans_init.translation.cfg if trans_init else cfg.translation
    m = cfg.mapper
    mcfg = mapper_config_for(
        m.input_kind, vcfg, trcfg,
        d_hidden=m.d_hidden if "d_hidden" in cfg.mapper_keys else None,
        init_from_embedding=m.init_from_embedding,
    )
    model = build_joint_model(
        visual_init, trans_init, mcfg,
        allow_scratch=args.allow_scratch, corpus=splits["train"],
        visual_cfg=cfg.visual, trans_cfg=cfg.translation,
        freeze_backbone=tcfg.freeze_backbone, lang=cfg.data.lang,
    )
    result = train_joint(splits["train"], splits["dev"], tcfg, model)
    _write_outputs(Path(args.out), result.model, result, cfg, tcfg)


def cmd_evaluate(args):
    model = load_checkpoint(args.checkpoint)
    splits = load_splits(args.data, ("dev", "test"))
    ctc_width = args.beam_width if args.task == "sign2gloss" else None
    report = evaluate(
        model, splits["test"], args.task, dev=splits["dev"], split="test",
        beam_width=args.beam_width or 4,
        length_penalty=args.length_penalty,
        ctc_width=ctc_width,
    )
    sys.stdout.write(report.to_json() + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic triplet corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func in (
        ("pretrain-visual", cmd_pretrain_visual),
        ("pretrain-translation", cmd_pretrain_translation),
        ("train-joint", cmd_train_joint),
    ):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--epochs", type=int)
        if name == "train-joint":
            s.add_argument("--init-visual")
            s.add_argument("--init-translation")
            s.add_argument("--allow-scratch", action="store_true")
        s.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="score a checkpoint on one task; prints JSON")
    e.add_argument("--task", required=True, choices=TASKS)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument(
        "--beam-width", type=int,
        help="translation beam (default 4); for sign2gloss, a fixed CTC width instead of the 1-10 dev sweep",
    )
    e.add_argument("--length-penalty", type=float, default=1.0)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("SLT_LOG", "INFO"), stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except (UsageError, ConfigurationError, PipelineOrderError) as e:
        print(f"slt: error: {e}", file=sys.stderr)
        return 2
    except (CorpusIOError, CheckpointError, OSError) as e:
        print(f"slt: error: {e}", file=sys.stderr)
        return 1
    except CorpusError as e:
        print(f"slt: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
