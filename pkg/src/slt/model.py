from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .ctc import GlossVocab
from .errors import PipelineOrderError
from .mapper import MapperConfig, VLMapper, select_visual_feature
from .translation import TextVocab, TranslationConfig, TranslationModel
from .visual import VisualEncoder, VisualEncoderConfig, pad_features


class PipelineModel(nn.Module):
    """Visual encoder, V-L mapper and translation network under one roof.

    Any of the three parts may be missing; ``stages`` records which training
    stages produced the current parameters.
    """

    def __init__(
        self,
        gloss_vocab: GlossVocab,
        visual: VisualEncoder | None = None,
        translation: TranslationModel | None = None,
        mapper: VLMapper | None = None,
        stages: list[str] | None = None,
        lang: str = "de_DE",
    ):
        super().__init__()
        self.gloss_vocab = gloss_vocab
        self.visual = visual
        self.translation = translation
        self.mapper = mapper
        self.stages = list(stages or [])
        self.lang = lang

    @property
    def text_vocab(self) -> TextVocab | None:
        return None if self.translation is None else self.translation.vocab

    def require(self, *parts: str):
        missing = [p for p in parts if getattr(self, p) is None]
        if missing:
            raise PipelineOrderError(f"model lacks required component(s): {', '.join(missing)}")

    def metadata(self) -> dict:
        return {
            "gloss_vocab": self.gloss_vocab.labels,
            "lang": self.lang,
            "stages": self.stages,
            "visual": None if self.visual is None else {
                "config": self.visual.cfg.to_dict(), "trained": self.visual.trained,
            },
            "translation": None if self.translation is None else {
                "config": self.translation.cfg.to_dict(),
                "vocab": self.translation.vocab.to_dict(),
                "trained": self.translation.trained,
            },
            "mapper": None if self.mapper is None else {"config": self.mapper.cfg.to_dict()},
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "PipelineModel":
        visual = translation = mapper = None
        if meta["visual"] is not None:
            visual = VisualEncoder(VisualEncoderConfig(**meta["visual"]["config"]))
            visual.trained = meta["visual"]["trained"]
        if meta["translation"] is not None:
            vocab = TextVocab.from_dict(meta["translation"]["vocab"])
            translation = TranslationModel(TranslationConfig(**meta["translation"]["config"]), vocab)
            translation.trained = meta["translation"]["trained"]
        if meta["mapper"] is not None:
            mapper = VLMapper(MapperConfig(**meta["mapper"]["config"]))
        return cls(
            GlossVocab(meta["gloss_vocab"]), visual, translation, mapper, meta["stages"], meta["lang"]
        )

    # -- joint forward ---------------------------------------------------------------

    def mapped_source(self, x: torch.Tensor, lengths: torch.Tensor):
        """Visual forward, tap selection and mapping; returns (visual outputs, mapped, lengths)."""
        self.require("visual", "mapper")
        out = self.visual(x, lengths)
        mapped = self.mapper(select_visual_feature(out, self.mapper.cfg))
        return out, mapped, out["lengths"]

    @torch.no_grad()
    def sign2text_predict(self, feats: list[np.ndarray], width: int = 4, alpha: float = 1.0):
        self.require("visual", "mapper", "translation")
        was = self.training
        self.eval()
        try:
            x, lengths = pad_features([torch.as_tensor(f) for f in feats])
            _, mapped, out_lengths = self.mapped_source(x, lengths)
            tokens = self.translation.translate_source(mapped, out_lengths, width, alpha)
        finally:
            self.train(was)
        return [self.translation.vocab.detokenize(t) for t in tokens]
