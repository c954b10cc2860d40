"""Visual-language mapper: a per-frame MLP with two hidden layers that turns a
visual tap into translation-encoder inputs."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigurationError, PipelineOrderError

INPUT_KINDS = ("gloss_representation", "gloss_logits", "s3d_features", "gloss_probabilities")


@dataclass
class MapperConfig:
    input_kind: str = "gloss_representation"
    d_in: int = 128
    d_hidden: int | None = None
    d_out: int = 128
    init_from_embedding: bool = False

    def __post_init__(self):
        if self.d_hidden is None:
            # embedding init passes probabilities straight through the hidden layers
            self.d_hidden = self.d_in if self.init_from_embedding else self.d_out

    def validate(self):
        if self.input_kind not in INPUT_KINDS:
            raise ConfigurationError(
                f"unknown mapper input {self.input_kind!r}; choose from {', '.join(INPUT_KINDS)}"
            )
        if self.init_from_embedding and self.input_kind != "gloss_probabilities":
            raise ConfigurationError("init_from_embedding needs input_kind=gloss_probabilities")

    def to_dict(self):
        return asdict(self)


def tap_dim(input_kind: str, d_backbone: int, d_z: int, num_glosses: int) -> int:
    return {
        "gloss_representation": d_z,
        "gloss_logits": num_glosses + 1,
        "s3d_features": d_backbone,
        "gloss_probabilities": num_glosses + 1,
    }[input_kind]


def select_visual_feature(outputs: dict, cfg: MapperConfig) -> torch.Tensor:
    """The configured tap from a visual-encoder forward, unmodified."""
    if cfg.input_kind not in outputs:
        raise PipelineOrderError(
            f"tap {cfg.input_kind!r} is not available; run the full visual encoder first"
        )
    return outputs[cfg.input_kind]


class VLMapper(nn.Module):
    def __init__(self, cfg: MapperConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.fc1 = nn.Linear(cfg.d_in, cfg.d_hidden)
        self.fc2 = nn.Linear(cfg.d_hidden, cfg.d_hidden)
        self.fc3 = nn.Linear(cfg.d_hidden, cfg.d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.d_in:
            raise ConfigurationError(
                f"mapper expects {self.cfg.d_in} input features, got {x.shape[-1]}"
            )
        return self.fc3(nx.relu(self.fc2(nx.relu(self.fc1(x)))))

    def init_from_embedding(self, table: torch.Tensor) -> "VLMapper":
        """Make a one-hot gloss distribution map onto its embedding row.

        With d_hidden == d_in the hidden layers become identity (probabilities
        are non-negative, so relu passes them) and the last layer carries the
        table. Otherwise the first layer carries the table and the remaining
        layers keep their random init.
        """
        if self.cfg.input_kind != "gloss_probabilities":
            raise ConfigurationError("embedding init needs input_kind=gloss_probabilities")
        table = torch.as_tensor(table, dtype=nx.DTYPE)
        if table.shape[0] != self.cfg.d_in:
            raise ConfigurationError(
                f"embedding table has {table.shape[0]} rows, mapper input is {self.cfg.d_in}"
            )
        with torch.no_grad():
            if self.cfg.d_hidden == self.cfg.d_in:
                if table.shape[1] != self.cfg.d_out:
                    raise ConfigurationError(
                        f"embedding width {table.shape[1]} != mapper output {self.cfg.d_out}"
                    )
                for fc in (self.fc1, self.fc2):
                    fc.weight.copy_(torch.eye(self.cfg.d_in))
                    fc.bias.zero_()
                self.fc3.weight.copy_(table.T)
                self.fc3.bias.zero_()
            else:
                if table.shape[1] != self.cfg.d_hidden:
                    raise ConfigurationError(
                        f"embedding width {table.shape[1]} != mapper hidden {self.cfg.d_hidden}"
                    )
                self.fc1.weight.copy_(table.T)
                self.fc1.bias.zero_()
        return self
