"""Encoder with GPSA injection points, multi-class head and one-vs-all heads."""
from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core import ShapeError
from .style import GPSA


class ForwardOutput(NamedTuple):
    fmap: torch.Tensor  # B x C' x H' x W', pre-pool
    pooled: torch.Tensor  # B x C'
    logits: torch.Tensor  # B x K
    binary_logits: list[torch.Tensor]  # K tensors of B x 2


def conv_stage(c_in: int, c_out: int, downsample: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    ]
    if downsample:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(
        self,
        widths: Sequence[int] = (32, 64, 128),
        gpsa_stages: Sequence[str] = ("stage1", "stage2"),
        alpha: float = 0.8,
        gpsa_prob: float = 0.5,
        in_channels: int = 3,
        downsample: bool = True,
    ) -> None:
        super().__init__()
        self.tags = [f"stage{i + 1}" for i in range(len(widths))]
        missing = [s for s in gpsa_stages if s not in self.tags]
        if missing:
            raise ShapeError(f"unknown encoder stage(s) for GPSA: {', '.join(missing)}")
        self.stages = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.stages.append(conv_stage(c, w, downsample))
            c = w
        self.out_channels = c
        self.gpsa = nn.ModuleDict({t: GPSA(widths[self.tags.index(t)], alpha, gpsa_prob) for t in gpsa_stages})

    def forward(
        self, x: torch.Tensor, use_gpsa: bool = False, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        for tag, stage in zip(self.tags, self.stages):
            x = stage(x)
            if use_gpsa and tag in self.gpsa:
                x = self.gpsa[tag](x, generator)
        return x


class DebugNet(nn.Module):
    def __init__(
        self,
        num_classes: int,
        widths: Sequence[int] = (32, 64, 128),
        gpsa_stages: Sequence[str] = ("stage1", "stage2"),
        alpha: float = 0.8,
        gpsa_prob: float = 0.5,
        downsample: bool = True,
    ) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.encoder = Encoder(widths, gpsa_stages, alpha, gpsa_prob, downsample=downsample)
        c = self.encoder.out_channels
        self.classifier = nn.Linear(c, num_classes)
        self.binary = nn.ModuleList(nn.Linear(c, 2) for _ in range(num_classes))
        self.to(memory_format=torch.channels_last)

    def forward(
        self, x: torch.Tensor, use_gpsa: bool = False, generator: Optional[torch.Generator] = None
    ) -> ForwardOutput:
        if x.dim() != 4 or x.shape[1] != self.encoder.stages[0][0].in_channels:
            raise ShapeError(f"expected B x 3 x H x W images, got {tuple(x.shape)}")
        # channels-last is markedly faster for conv/pool on CPU; values are unaffected
        x = x.contiguous(memory_format=torch.channels_last)
        fmap = self.encoder(x, use_gpsa=use_gpsa and self.training, generator=generator)
        pooled = fmap.mean(dim=(2, 3))
        return ForwardOutput(fmap, pooled, self.classifier(pooled), [h(pooled) for h in self.binary])

    def uncertainty_state(self) -> dict:
        return {tag: m.uncertainty.state_dict() for tag, m in self.encoder.gpsa.items()}

    def load_uncertainty_state(self, state: dict) -> None:
        if set(state) != set(self.encoder.gpsa.keys()):
            raise ShapeError(f"uncertainty state for stages {sorted(state)} does not match {sorted(self.encoder.gpsa)}")
        for tag, s in state.items():
            self.encoder.gpsa[tag].uncertainty.load_state_dict(s)


def binary_probs(binary_logits: Sequence[torch.Tensor] | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-head softmax. Returns ``(p_pos, p_neg)``, each B x K.

    Logit index 0 scores "is this class" (y=1), index 1 scores "is another class" (y=0).
    """
    if isinstance(binary_logits, torch.Tensor):
        stacked = binary_logits
    else:
        stacked = torch.stack(list(binary_logits), dim=1)  # B x K x 2
    p = F.softmax(stacked, dim=-1)
    return p[..., 0], p[..., 1]
