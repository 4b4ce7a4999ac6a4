"""Temporal pooling, feature mixers, regression head and the full conditional model."""

from __future__ import annotations

import itertools
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import MosStats
from .encoders import Adapter, HybridTextEncoder, VisionEncoder, init_uniform_
from .errors import ConfigError, DataError

CONCAT = "concatenation"
DOT = "dot_product"
MIXERS = (CONCAT, DOT)


class TemporalPooler(nn.Module):
    """conv(k=3) -> ReLU -> conv(k=3) over time, then mean over frames."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (T, d) or (B, T, d)
        squeeze = frames.ndim == 2
        if squeeze:
            frames = frames[None]
        if frames.shape[-1] != self.channels:
            raise DataError(f"pooler expects {self.channels} channels, got {frames.shape[-1]}")
        x = frames.transpose(1, 2)
        x = self.conv2(F.relu(self.conv1(x)))
        out = x.mean(dim=2)
        return out[0] if squeeze else out


def temporal_pool(pooler: TemporalPooler, frames: torch.Tensor) -> torch.Tensor:
    return pooler(frames)


def mix(kind: str, v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if kind == CONCAT:
        return torch.cat([v, t], dim=-1)
    if kind == DOT:
        if v.shape[-1] != t.shape[-1]:
            raise DataError(f"dot-product mixer needs equal dims, got {v.shape[-1]} and {t.shape[-1]}")
        return v * t
    raise ConfigError(f"unknown mixer {kind!r}")


def mixed_dim(kind: str, v_dim: int, t_dim: int) -> int:
    if kind == CONCAT:
        return v_dim + t_dim
    if kind == DOT:
        if v_dim != t_dim:
            raise ConfigError("dot-product mixer needs equal dims")
        return v_dim
    raise ConfigError(f"unknown mixer {kind!r}")


class RegressionHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, 1)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x))).squeeze(-1)


class PCQAModel(nn.Module):
    """Scores media conditioned on its generating prompt.

    Vision features are pooled over time (clips with T >= 2 only), adapted,
    mixed with the adapted hybrid prompt embedding and regressed to one
    score in normalized-MOS space.
    """

    def __init__(self, vision_encoder: VisionEncoder, text_encoder: HybridTextEncoder,
                 latent_dim: int = 1024, mixer: str = CONCAT, head_hidden: int = 256,
                 mos_stats: MosStats | None = None, generator: torch.Generator | None = None):
        super().__init__()
        if mixer not in MIXERS:
            raise ConfigError(f"unknown mixer {mixer!r}")
        self.vision_encoder = vision_encoder
        self.text_encoder = text_encoder
        self.vision_adapter = Adapter(vision_encoder.output_dim, latent_dim)
        self.prompt_adapter = Adapter(text_encoder.output_dim, latent_dim)
        self.temporal_pooler = TemporalPooler(vision_encoder.output_dim)
        self.mixer = mixer
        self.head = RegressionHead(mixed_dim(mixer, latent_dim, latent_dim), head_hidden)
        self.mos_stats = mos_stats
        if generator is not None:
            for m in (self.vision_adapter, self.prompt_adapter, self.temporal_pooler, self.head):
                init_uniform_(m, generator)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    @torch.no_grad()
    def encode_prompts(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.text_encoder(list(prompts)).to(self.prompt_adapter.weight.dtype)

    def clip_features(self, clips: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
        """Pooled vision features, one row per clip.

        `clips` is an image batch (B, 3, H, W) or a list of frame stacks
        (T_i, 3, H, W). Frames of all clips go through the encoder in one
        call; single-frame clips skip the temporal pooler.
        """
        if isinstance(clips, torch.Tensor):
            return self.vision_encoder(clips)
        lengths = [c.shape[0] for c in clips]
        if any(n < 1 for n in lengths):
            raise DataError("empty frame stack")
        feats = self.vision_encoder(torch.cat(list(clips), dim=0))
        offsets = [0, *itertools.accumulate(lengths)][:-1]
        groups: dict[int, list[int]] = {}
        for i, n in enumerate(lengths):
            groups.setdefault(n, []).append(i)
        rows: list[torch.Tensor | None] = [None] * len(clips)
        for n, idx in groups.items():
            block = torch.stack([feats[offsets[i]: offsets[i] + n] for i in idx])
            pooled = block[:, 0] if n == 1 else self.temporal_pooler(block)
            for j, i in enumerate(idx):
                rows[i] = pooled[j]
        return torch.stack(rows)

    def forward(self, clips, prompts: Sequence[str] | None = None,
                text_features: torch.Tensor | None = None) -> torch.Tensor:
        if text_features is None:
            if prompts is None:
                raise ValueError("need prompts or text_features")
            text_features = self.encode_prompts(prompts)
        v = self.vision_adapter(self.clip_features(clips))
        t = self.prompt_adapter(text_features)
        return self.head(mix(self.mixer, v, t))


def hflip(x: torch.Tensor) -> torch.Tensor:
    """Mirror the width axis (last dim) of an image or frame stack."""
    return torch.flip(x, dims=(-1,))
