"""Progressive training: Sign2Gloss pretraining, Gloss2Text pretraining and
joint Sign2Text training through the V-L mapper, plus task evaluation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .ctc import GlossVocab, ctc_beam_decode, ctc_greedy_decode, ctc_loss, is_feasible
from .data import Triplet, random_frame_rate
from .errors import ConfigurationError, PipelineOrderError
from .mapper import MapperConfig, VLMapper, tap_dim
from .metrics import EvalReport, TASKS, bleu_n, corpus_wer, text_report
from .model import PipelineModel
from .translation import TextVocab, TranslationConfig, TranslationModel
from .visual import VisualEncoder, VisualEncoderConfig, pad_features

log = logging.getLogger(__name__)

STAGES = ("pretrain_visual", "pretrain_translation", "train_joint")
DEFAULT_EPOCHS = {"pretrain_visual": 80, "pretrain_translation": 80, "train_joint": 40}
# translation nets start from random init rather than a large pretrained model,
# so both stages share one larger rate than the usual fine-tuning default
DEFAULT_LR_TRANSLATION = {"pretrain_translation": 5e-4, "train_joint": 5e-4}
CTC_WIDTHS = tuple(range(1, 11))
# (ctc_weight, ce_weight) pairs for the loss-weight sensitivity sweep
LOSS_WEIGHT_GRID = ((0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (1.0, 0.5), (1.0, 2.0))


@dataclass
class TrainConfig:
    stage: str = "pretrain_visual"
    epochs: int | None = None
    batch_size: int = 8
    lr_visual: float = 1e-3
    lr_translation: float | None = None
    weight_decay: float = 1e-3
    ctc_weight: float = 1.0
    ce_weight: float = 1.0
    freeze_backbone: bool = True
    frame_rate_augment: bool = True
    eval_beam_width: int = 1
    length_penalty: float = 1.0
    seed: int = 0

    def resolved(self) -> "TrainConfig":
        """Copy with stage-dependent defaults filled in."""
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; valid: {', '.join(STAGES)}")
        cfg = copy.copy(self)
        if cfg.epochs is None:
            cfg.epochs = DEFAULT_EPOCHS[cfg.stage]
        if cfg.lr_translation is None:
            cfg.lr_translation = DEFAULT_LR_TRANSLATION.get(cfg.stage, 1e-5)
        cfg.validate()
        return cfg

    def validate(self):
        if self.ctc_weight < 0 or self.ce_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.stage == "train_joint" and self.ctc_weight == 0 and self.ce_weight == 0:
            raise ConfigurationError("joint training needs a positive CTC or CE weight")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing from ``base`` at step 0 to 0 at step ``total``."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class TrainResult:
    model: PipelineModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    skipped: int = 0


class _Trainer:
    """Shared loop: shuffling, Adam with decoupled decay, per-step cosine schedule,
    per-epoch dev scoring and best-checkpoint bookkeeping."""

    def __init__(self, model: PipelineModel, cfg: TrainConfig, groups: list[tuple[list, float]]):
        self.model = model
        self.cfg = cfg
        self.groups = [(list(p for p in params if p.requires_grad), lr) for params, lr in groups]
        self.groups = [(p, lr) for p, lr in self.groups if p]
        self.opt = (
            torch.optim.AdamW(
                [{"params": p, "lr": lr, "base_lr": lr} for p, lr in self.groups],
                weight_decay=cfg.weight_decay,
            )
            if self.groups
            else None
        )

    def run(
        self,
        train: Sequence,
        step_loss: Callable[[list, np.random.Generator], tuple[torch.Tensor | None, dict]],
        score_dev: Callable[[], dict],
        key: str,
        higher_is_better: bool,
    ) -> TrainResult:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        n_batches = math.ceil(len(train) / cfg.batch_size)
        total = cfg.epochs * n_batches
        step = 0
        best_state, best_score, best_epoch = None, None, 0
        history, skipped_total, skipped_before = [], 0, 0
        for epoch in range(1, cfg.epochs + 1):
            self.model.train()
            order = rng.permutation(len(train))
            losses, parts_sum = [], {}
            for b in range(n_batches):
                batch = [train[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                if self.opt is not None:
                    for g in self.opt.param_groups:
                        g["lr"] = cosine_lr(g["base_lr"], step, total)
                step += 1
                loss, parts = step_loss(batch, rng)
                skipped_total += parts.pop("skipped", 0)
                for k, v in parts.items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + v
                if loss is None or self.opt is None:
                    continue
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                self.opt.step()
                losses.append(loss.item())
            self.model.eval()
            dev = score_dev()
            row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None}
            row.update({k: v / n_batches for k, v in parts_sum.items()})
            row.update(dev)
            row["skipped"] = skipped_total - skipped_before
            skipped_before = skipped_total
            history.append(row)
            score = dev[key]
            better = (
                best_score is None
                or (score > best_score if higher_is_better else score < best_score)
            )
            if better:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(self.model.state_dict())
            log.info("epoch %d %s", epoch, row)
        if skipped_total:
            log.warning("skipped %d infeasible or empty samples during training", skipped_total)
        if best_state is not None:
            self.model.load_state_dict(best_state)
        self.model.eval()
        return TrainResult(self.model, history, best_epoch, skipped_total)


def _set_seed(seed: int):
    torch.manual_seed(seed)


def _ctc_batch_loss(visual_out, targets: list[list[int]]):
    """Mean CTC loss over feasible samples, and the number skipped."""
    logits, lengths = visual_out["gloss_logits"], visual_out["lengths"]
    terms, skipped = [], 0
    for i, tgt in enumerate(targets):
        n = int(lengths[i])
        if not is_feasible(n, tgt):
            skipped += 1
            log.debug("skipping sample: %d glosses do not fit %d frames", len(tgt), n)
            continue
        terms.append(ctc_loss(logits[i, :n], tgt))
    if not terms:
        return None, skipped
    return torch.stack(terms).mean(), skipped


def gloss_vocab_for(corpus: Sequence[Triplet]) -> GlossVocab:
    return GlossVocab.from_sequences(s.gloss for s in corpus)


def decode_glosses(model: PipelineModel, corpus: Sequence[Triplet], width: int | None = None):
    """Predicted gloss label lists; greedy when ``width`` is None."""
    model.require("visual")
    posts = _posteriors(model, corpus)
    if width is None:
        ids = [ctc_greedy_decode(p) for p in posts]
    else:
        ids = [ctc_beam_decode(p, width) for p in posts]
    return [model.gloss_vocab.decode(i) for i in ids]


def _posteriors(model, corpus):
    posts = []
    for i in range(0, len(corpus), 64):
        posts += model.visual.posteriors([torch.as_tensor(s.features) for s in corpus[i : i + 64]])
    return posts


def pretrain_visual(
    train: Sequence[Triplet],
    dev: Sequence[Triplet],
    cfg: TrainConfig,
    visual_cfg: VisualEncoderConfig | None = None,
    lang: str = "de_DE",
) -> TrainResult:
    """Sign2Gloss pretraining under CTC; best dev WER (greedy decoding) wins."""
    cfg = cfg.resolved()
    if cfg.stage != "pretrain_visual":
        raise ConfigurationError(f"stage {cfg.stage!r} given to pretrain_visual")
    _set_seed(cfg.seed)
    vocab = gloss_vocab_for(train)
    vcfg = copy.copy(visual_cfg or VisualEncoderConfig())
    vcfg.num_glosses = vocab.size
    vcfg.d_in = train[0].features.shape[1]
    vcfg.freeze_backbone = False
    visual = VisualEncoder(vcfg)
    model = PipelineModel(vocab, visual=visual, lang=lang)
    targets = {s.id: vocab.encode(s.gloss) for s in train}

    def step_loss(batch, rng):
        feats = [
            random_frame_rate(s.features, rng) if cfg.frame_rate_augment else s.features
            for s in batch
        ]
        x, lengths = pad_features([torch.as_tensor(f) for f in feats])
        out = visual(x, lengths)
        loss, skipped = _ctc_batch_loss(out, [targets[s.id] for s in batch])
        return loss, {"skipped": skipped}

    def score_dev():
        hyps = decode_glosses(model, dev)
        return {"dev_wer": 100.0 * corpus_wer(hyps, [s.gloss for s in dev])}

    trainer = _Trainer(model, cfg, [(visual.parameters(), cfg.lr_visual)])
    result = trainer.run(train, step_loss, score_dev, "dev_wer", higher_is_better=False)
    visual.trained = True
    model.stages.append("pretrain_visual")
    return result


def _translation_inputs(vocab: GlossVocab, gloss: Sequence[str]) -> list[int]:
    return [vocab.index[g] for g in gloss if g in vocab.index]


def pretrain_translation(
    train: Sequence[Triplet],
    dev: Sequence[Triplet],
    cfg: TrainConfig,
    trans_cfg: TranslationConfig | None = None,
    lang: str = "de_DE",
    gloss_vocab: GlossVocab | None = None,
    embeddings: dict | None = None,
) -> TrainResult:
    """Gloss2Text pretraining with label-smoothed cross entropy; best dev BLEU-4 wins.

    ``embeddings`` may hold externally produced ``source``/``target`` tables,
    which are imported and frozen before training.
    """
    cfg = cfg.resolved()
    if cfg.stage != "pretrain_translation":
        raise ConfigurationError(f"stage {cfg.stage!r} given to pretrain_translation")
    _set_seed(cfg.seed)
    gvocab = gloss_vocab or gloss_vocab_for(train)
    kept = [s for s in train if s.text.split()]
    if len(kept) < len(train):
        log.warning("skipping %d samples with empty text", len(train) - len(kept))
    tvocab = TextVocab.build([s.text for s in kept], langs=(lang,))
    tcfg = copy.copy(trans_cfg or TranslationConfig())
    tcfg.num_glosses = gvocab.size
    translation = TranslationModel(tcfg, tvocab)
    if embeddings:
        translation.import_embeddings(embeddings.get("source"), embeddings.get("target"))
    model = PipelineModel(gvocab, translation=translation, lang=lang)
    src = {s.id: _translation_inputs(gvocab, s.gloss) for s in kept}
    tgt = {s.id: tvocab.tokenize(s.text) for s in kept}

    def step_loss(batch, rng):
        loss = translation.gloss2text_loss([src[s.id] for s in batch], [tgt[s.id] for s in batch])
        return loss, {}

    def score_dev():
        hyps = translate_glosses(model, [s.gloss for s in dev], cfg.eval_beam_width, cfg.length_penalty)
        return {"dev_bleu4": bleu_n(hyps, [s.text for s in dev], 4)}

    trainer = _Trainer(model, cfg, [(translation.parameters(), cfg.lr_translation)])
    result = trainer.run(kept, step_loss, score_dev, "dev_bleu4", higher_is_better=True)
    result.skipped = len(train) - len(kept)
    translation.trained = True
    model.stages.append("pretrain_translation")
    return result


def translate_glosses(model: PipelineModel, glosses: Sequence[Sequence[str]], width=4, alpha=1.0):
    model.require("translation")
    tr = model.translation
    out = []
    for i in range(0, len(glosses), 64):
        ids = [_translation_inputs(model.gloss_vocab, g) for g in glosses[i : i + 64]]
        emb, lengths = tr.embed_glosses(ids)
        out += [tr.vocab.detokenize(t) for t in tr.translate_source(emb, lengths, width, alpha)]
    return out


def sign2text(model: PipelineModel, corpus: Sequence[Triplet], width=4, alpha=1.0):
    out = []
    for i in range(0, len(corpus), 64):
        out += model.sign2text_predict([s.features for s in corpus[i : i + 64]], width, alpha)
    return out


def build_joint_model(
    visual_init: PipelineModel | None,
    translation_init: PipelineModel | None,
    mapper_cfg: MapperConfig | None = None,
    *,
    allow_scratch: bool = False,
    corpus: Sequence[Triplet] | None = None,
    visual_cfg: VisualEncoderConfig | None = None,
    trans_cfg: TranslationConfig | None = None,
    freeze_backbone: bool = True,
    lang: str = "de_DE",
) -> PipelineModel:
    """Merge two pretrained checkpoints and attach a fresh mapper.

    Missing initializations are only accepted with ``allow_scratch``; the
    corresponding network is then built from its config at random init.
    """
    if (visual_init is None or translation_init is None) and not allow_scratch:
        raise PipelineOrderError(
            "joint training needs both pretrained checkpoints (visual and translation); "
            "pass allow_scratch to train without them"
        )
    if visual_init is not None:
        visual_init.require("visual")
    if translation_init is not None:
        translation_init.require("translation")
    if visual_init is not None:
        gvocab = visual_init.gloss_vocab
    elif translation_init is not None:
        gvocab = translation_init.gloss_vocab
    else:
        gvocab = gloss_vocab_for(corpus)
    if visual_init is not None and translation_init is not None:
        if visual_init.gloss_vocab.labels != translation_init.gloss_vocab.labels:
            raise ConfigurationError("visual and translation checkpoints use different gloss vocabularies")
    if visual_init is not None:
        visual = copy.deepcopy(visual_init.visual)
    else:
        vcfg = copy.copy(visual_cfg or VisualEncoderConfig())
        vcfg.num_glosses = gvocab.size
        vcfg.d_in = corpus[0].features.shape[1]
        vcfg.freeze_backbone = False
        visual = VisualEncoder(vcfg)
    if translation_init is not None:
        translation = copy.deepcopy(translation_init.translation)
    else:
        tcfg = copy.copy(trans_cfg or TranslationConfig())
        tcfg.num_glosses = gvocab.size
        tvocab = TextVocab.build([s.text for s in corpus], langs=(lang,))
        translation = TranslationModel(tcfg, tvocab)
    mcfg = copy.copy(mapper_cfg or MapperConfig())
    expected_in = tap_dim(mcfg.input_kind, visual.cfg.d_backbone, visual.cfg.d_z, visual.cfg.num_glosses)
    d_model = translation.cfg.d_model
    if mcfg.d_in != expected_in or mcfg.d_out != d_model:
        raise ConfigurationError(
            f"mapper is {mcfg.d_in}->{mcfg.d_out}, but the {mcfg.input_kind} tap has "
            f"{expected_in} features and the translation model expects {d_model}"
        )
    mapper = VLMapper(mcfg)
    if mcfg.init_from_embedding:
        mapper.init_from_embedding(translation.src_embed.weight.detach()[: gvocab.size + 1])
    if freeze_backbone:
        visual.freeze_backbone()
    stages = []
    for init in (visual_init, translation_init):
        if init is not None:
            stages += [s for s in init.stages if s not in stages]
    return PipelineModel(gvocab, visual, translation, mapper, stages, lang)


def mapper_config_for(
    input_kind: str, visual: VisualEncoderConfig, trans: TranslationConfig, **kw
) -> MapperConfig:
    d_in = tap_dim(input_kind, visual.d_backbone, visual.d_z, visual.num_glosses)
    return MapperConfig(input_kind=input_kind, d_in=d_in, d_out=trans.d_model, **kw)


def train_joint(
    train: Sequence[Triplet],
    dev: Sequence[Triplet],
    cfg: TrainConfig,
    model: PipelineModel,
) -> TrainResult:
    """Joint Sign2Text training of a model from ``build_joint_model``.

    Total loss is ctc_weight * CTC + ce_weight * CE; best dev BLEU-4 wins.
    """
    cfg = cfg.resolved()
    if cfg.stage != "train_joint":
        raise ConfigurationError(f"stage {cfg.stage!r} given to train_joint")
    model.require("visual", "mapper", "translation")
    _set_seed(cfg.seed)
    gvocab, visual, tr = model.gloss_vocab, model.visual, model.translation
    if cfg.freeze_backbone and not visual.cfg.freeze_backbone:
        visual.freeze_backbone()
    targets = {s.id: gvocab.encode(s.gloss) for s in train}
    texts = {s.id: tr.vocab.tokenize(s.text) for s in train}

    def step_loss(batch, rng):
        x, lengths = pad_features([torch.as_tensor(s.features) for s in batch])
        out, mapped, out_lengths = model.mapped_source(x, lengths)
        loss, parts, skipped = 0.0, {}, 0
        if cfg.ctc_weight > 0:
            ctc, skipped = _ctc_batch_loss(out, [targets[s.id] for s in batch])
            if ctc is not None:
                loss = loss + cfg.ctc_weight * ctc
                parts["ctc"] = ctc.item()
        if cfg.ce_weight > 0:
            ce = tr.loss_from_source(mapped, out_lengths, [texts[s.id] for s in batch])
            loss = loss + cfg.ce_weight * ce
            parts["ce"] = ce.item()
        parts["skipped"] = skipped
        return (loss if torch.is_tensor(loss) else None), parts

    def score_dev():
        hyps = sign2text(model, dev, cfg.eval_beam_width, cfg.length_penalty)
        return {"dev_bleu4": bleu_n(hyps, [s.text for s in dev], 4)}

    groups = [
        (list(visual.parameters()) + list(model.mapper.parameters()), cfg.lr_visual),
        (tr.parameters(), cfg.lr_translation),
    ]
    trainer = _Trainer(model, cfg, groups)
    result = trainer.run(train, step_loss, score_dev, "dev_bleu4", higher_is_better=True)
    visual.trained = tr.trained = True
    model.stages.append("train_joint")
    return result


def select_ctc_width(model: PipelineModel, dev: Sequence[Triplet], widths=CTC_WIDTHS):
    """Beam width with the lowest dev WER (smallest width on ties) and the full sweep."""
    posts = _posteriors(model, dev)
    refs = [s.gloss for s in dev]
    sweep = {}
    for w in widths:
        hyps = [model.gloss_vocab.decode(ctc_beam_decode(p, w)) for p in posts]
        sweep[w] = 100.0 * corpus_wer(hyps, refs)
    best = min(sweep, key=lambda w: (sweep[w], w))
    return best, sweep


def evaluate(
    model: PipelineModel,
    corpus: Sequence[Triplet],
    task: str,
    *,
    dev: Sequence[Triplet] | None = None,
    split: str = "test",
    beam_width: int = 4,
    length_penalty: float = 1.0,
    ctc_width: int | None = None,
) -> EvalReport:
    """Score one of the four tasks on ``corpus``.

    For tasks that decode glosses, the CTC beam width is swept over 1..10 on
    ``dev`` unless ``ctc_width`` is given.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    needs = {
        "sign2gloss": ("visual",),
        "gloss2text": ("translation",),
        "sign2gloss2text": ("visual", "translation"),
        "sign2text": ("visual", "mapper", "translation"),
    }[task]
    missing = [p for p in needs if getattr(model, p) is None]
    if task == "sign2text" and not missing and "train_joint" not in model.stages:
        missing = ["joint training"]
    if missing:
        raise PipelineOrderError(f"task {task} needs component(s) missing from the model: {', '.join(missing)}")
    decoding = {}
    if task in ("sign2gloss", "sign2gloss2text"):
        if ctc_width is None:
            ctc_width, sweep = select_ctc_width(model, dev if dev is not None else corpus)
            decoding["ctc_dev_sweep"] = {str(w): v for w, v in sweep.items()}
        decoding["ctc_beam_width"] = ctc_width
        glosses = decode_glosses(model, corpus, ctc_width)
    if task == "sign2gloss":
        wer = 100.0 * corpus_wer(glosses, [s.gloss for s in corpus])
        return EvalReport(task, split, len(corpus), wer=wer, decoding=decoding)
    decoding.update({"beam_width": beam_width, "length_penalty": length_penalty})
    if task == "gloss2text":
        hyps = translate_glosses(model, [s.gloss for s in corpus], beam_width, length_penalty)
    elif task == "sign2gloss2text":
        hyps = translate_glosses(model, glosses, beam_width, length_penalty)
    else:
        hyps = sign2text(model, corpus, beam_width, length_penalty)
    return text_report(task, split, hyps, [s.text for s in corpus], decoding)
