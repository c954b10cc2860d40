"""Sign2Gloss network: a stride-4 temporal backbone, the projection and
temporal-conv head producing gloss representations, and a gloss classifier.

Batched tensors are (B, T, C) with a boolean frame mask (B, T). Padded
frames are zeroed after every layer so a batched forward in eval mode gives
the same result as running each sequence alone.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .ctc import GlossVocab, ctc_beam_decode, ctc_greedy_decode
from .errors import (
    CheckpointRequiredError,
    ConfigurationError,
    SequenceTooShortError,
)


@dataclass
class VisualEncoderConfig:
    d_in: int = 64
    d_backbone: int = 256
    d_z: int = 128
    num_glosses: int = 20
    backbone_blocks: int = 2
    freeze_backbone: bool = False

    def validate(self):
        if 2 ** self.backbone_blocks != 4:
            raise ConfigurationError(
                f"backbone must downsample by exactly 4, got {self.backbone_blocks} stride-2 blocks"
            )
        for name in ("d_in", "d_backbone", "d_z", "num_glosses"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)


def downsampled_length(n_frames: int) -> int:
    return math.ceil(n_frames / 4)


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len)[None, :] < lengths[:, None]


class MaskedBatchNorm(nn.Module):
    """Batch norm over channels using only the valid frames of the batch."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x, mask):
        if self.training:
            valid = x[mask]
            mean = valid.mean(dim=0)
            var = valid.var(dim=0, unbiased=False)
            n = valid.shape[0]
            with torch.no_grad():
                unbiased = var * n / max(n - 1, 1)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        y = (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias
        return y * mask[..., None]


class TemporalConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3))
        self.bias = nn.Parameter(torch.empty(c_out))
        bound = 1 / math.sqrt(3 * c_in)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x, lengths):
        y = nx.temporal_conv1d(x, self.weight, self.bias, self.stride)
        if self.stride == 2:
            lengths = (lengths + 1) // 2
        mask = lengths_to_mask(lengths, y.shape[1])
        return y * mask[..., None], lengths


class BackboneBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = TemporalConv(c_in, c_out, stride=2)
        self.bn = MaskedBatchNorm(c_out)

    def forward(self, x, lengths):
        x, lengths = self.conv(x, lengths)
        mask = lengths_to_mask(lengths, x.shape[1])
        return nx.relu(self.bn(x, mask)), lengths


class Backbone(nn.Module):
    """Stand-in for the first S3D blocks: same T/4 output rate, feature input."""

    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        dims = [cfg.d_in] + [cfg.d_backbone] * cfg.backbone_blocks
        self.blocks = nn.ModuleList(BackboneBlock(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, x, lengths):
        for block in self.blocks:
            x, lengths = block(x, lengths)
        return x, lengths


class Head(nn.Module):
    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.d_backbone, cfg.d_z)
        self.proj_bn = MaskedBatchNorm(cfg.d_z)
        self.conv1 = TemporalConv(cfg.d_z, cfg.d_z)
        self.conv2 = TemporalConv(cfg.d_z, cfg.d_z)
        self.out = nn.Linear(cfg.d_z, cfg.d_z)

    def forward(self, x, lengths):
        mask = lengths_to_mask(lengths, x.shape[1])
        x = nx.relu(self.proj_bn(self.proj(x), mask))
        x, _ = self.conv1(x, lengths)
        x, _ = self.conv2(x, lengths)
        return nx.relu(self.out(x)) * mask[..., None]


class VisualEncoder(nn.Module):
    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = Head(cfg)
        self.classifier = nn.Linear(cfg.d_z, cfg.num_glosses + 1)
        self.trained = False
        if cfg.freeze_backbone:
            self.freeze_backbone()

    def freeze_backbone(self):
        self.cfg.freeze_backbone = True
        for p in self.backbone.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen backbone keeps its running statistics as well
        if self.cfg.freeze_backbone:
            self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> dict:
        """All taps for a padded batch (B, T, d_in) with per-sequence frame counts."""
        if int(lengths.min()) < 4:
            raise SequenceTooShortError(
                f"need at least 4 frames per sequence, got {int(lengths.min())}"
            )
        mask = lengths_to_mask(lengths, x.shape[1])
        feats, out_lengths = self.backbone(x * mask[..., None], lengths)
        z = self.head(feats, out_lengths)
        logits = self.classifier(z)
        return {
            "s3d_features": feats,
            "gloss_representation": z,
            "gloss_logits": logits,
            "gloss_probabilities": nx.softmax(logits),
            "lengths": out_lengths,
        }

    def backbone_forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[0] < 4:
            raise SequenceTooShortError(f"need at least 4 frames, got {v.shape[0]}")
        feats, _ = self.backbone(v[None], torch.tensor([v.shape[0]]))
        return feats[0]

    def head_forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[0] < 1:
            raise SequenceTooShortError("head needs at least one frame")
        return self.head(features[None], torch.tensor([features.shape[0]]))[0]

    def classify_glosses(self, z: torch.Tensor, vocab: GlossVocab | None = None):
        """(logits, posterior) for a (T', d_z) gloss representation."""
        if vocab is not None and vocab.size + 1 != self.classifier.out_features:
            raise ConfigurationError(
                f"classifier has {self.classifier.out_features} outputs, "
                f"vocabulary needs {vocab.size + 1}"
            )
        logits = self.classifier(z)
        return logits, nx.softmax(logits)

    @torch.no_grad()
    def posteriors(self, feats: list[torch.Tensor]) -> list[np.ndarray]:
        was = self.training
        self.eval()
        try:
            x, lengths = pad_features(feats)
            out = self(x, lengths)
        finally:
            self.train(was)
        probs = out["gloss_probabilities"].numpy()
        return [probs[i, : int(n)] for i, n in enumerate(out["lengths"])]

    def sign2gloss_predict(self, v: torch.Tensor, width: int | None = None) -> list[int]:
        """Gloss ids for one feature sequence; greedy unless a beam width is given."""
        if not self.trained:
            raise CheckpointRequiredError("visual encoder has not been trained or loaded")
        (post,) = self.posteriors([v])
        return ctc_greedy_decode(post) if width is None else ctc_beam_decode(post, width)


def pad_features(feats: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([f.shape[0] for f in feats])
    x = torch.zeros(len(feats), int(lengths.max()), feats[0].shape[1])
    for i, f in enumerate(feats):
        x[i, : f.shape[0]] = torch.as_tensor(f, dtype=nx.DTYPE)
    return x, lengths
