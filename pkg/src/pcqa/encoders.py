"""Vision encoder interface, frozen hybrid text encoder and feature adapters.

The toy encoders here are small, seeded and deterministic so the whole
pipeline runs on a laptop CPU. Real backbones plug in through
`register_vision_encoder` / `register_text_encoder`.
"""

from __future__ import annotations

import hashlib
import math
import re
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError


def name_seed(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little") >> 1


def init_uniform_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Symmetric uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for every affine/conv layer."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator, dtype=torch.float64)
                               .mul_(2 * bound).sub_(bound))
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=generator, dtype=torch.float64)
                                 .mul_(2 * bound).sub_(bound))
    return module


class VisionEncoder(nn.Module):
    """Image batch (B, 3, H, W) in [0, 1] -> pooled embeddings (B, output_dim).

    Subclasses implement `features` on standardized input; per-channel
    standardization with `pixel_mean` / `pixel_std` happens here.
    """

    name = "vision"
    output_dim: int
    pixel_mean = (0.5, 0.5, 0.5)
    pixel_std = (0.5, 0.5, 0.5)
    trainable = True

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataError(f"expected image batch of shape (B, 3, H, W), got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise DataError("non-finite pixel values")
        mean = images.new_tensor(self.pixel_mean).view(1, 3, 1, 1)
        std = images.new_tensor(self.pixel_std).view(1, 3, 1, 1)
        return self.features((images - mean) / std)


class ToyVisionEncoder(VisionEncoder):
    """Two strided 3x3 convolutions and global average pooling."""

    name = "toy"

    def __init__(self, output_dim: int = 32, width: int = 16, generator: torch.Generator | None = None):
        super().__init__()
        self.output_dim = output_dim
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, output_dim, 3, stride=2, padding=1)
        if generator is not None:
            init_uniform_(self, generator)

    def features(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return x.mean(dim=(2, 3))


def encode_vision(encoder: VisionEncoder, images: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    if not isinstance(images, torch.Tensor):
        sizes = {tuple(im.shape[-2:]) for im in images}
        if len(sizes) > 1:
            raise DataError(f"images in a batch must share spatial size, got {sorted(sizes)}")
        images = torch.stack(list(images))
    return encoder(images)


class TextEncoder(nn.Module):
    """Prompt list -> embeddings (B, output_dim)."""

    name = "text"
    output_dim: int

    def encode(self, prompts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.encode(prompts)


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class ToyTextEncoder(TextEncoder):
    """Hashed-token embedding with fixed sinusoidal positions, mean pooled.

    Tokens are lower-cased word/punctuation pieces mapped into `vocab_size`
    buckets with blake2b; the table is seeded from the encoder name, so two
    members with different names give different embeddings. Prompts are
    wrapped in start/end tokens and truncated to `context_length` (CLIP's 77).
    """

    BOS, EOS = "<|startoftext|>", "<|endoftext|>"

    def __init__(self, name: str = "toy", output_dim: int = 32, vocab_size: int = 4096,
                 context_length: int = 77):
        super().__init__()
        self.name = name
        self.output_dim = output_dim
        self.vocab_size = vocab_size
        self.context_length = context_length
        g = torch.Generator().manual_seed(name_seed(name))
        self.token_embedding = nn.Parameter(
            0.5 * torch.randn(vocab_size, output_dim, generator=g, dtype=torch.float64).float())
        pos = torch.arange(context_length, dtype=torch.float64)[:, None]
        freq = torch.exp(-math.log(10000.0) * torch.arange(0, output_dim, 2, dtype=torch.float64) / output_dim)
        pe = torch.zeros(context_length, output_dim, dtype=torch.float64)
        pe[:, 0::2] = torch.sin(pos * freq)
        pe[:, 1::2] = torch.cos(pos * freq)[:, : output_dim // 2]
        self.register_buffer("positional_embedding", pe.float())

    def tokenize(self, prompt: str) -> list[int]:
        pieces = [self.BOS] + _TOKEN_RE.findall(prompt.lower()) + [self.EOS]
        if len(pieces) > self.context_length:
            pieces = pieces[: self.context_length - 1] + [self.EOS]
        return [int.from_bytes(hashlib.blake2b(p.encode("utf-8"), digest_size=8).digest(), "little")
                % self.vocab_size for p in pieces]

    def encode(self, prompts):
        rows = []
        for prompt in prompts:
            ids = torch.tensor(self.tokenize(prompt))
            x = self.token_embedding[ids] + self.positional_embedding[: len(ids)]
            rows.append(x.mean(dim=0))
        return torch.stack(rows)


class HybridTextEncoder(nn.Module):
    """Frozen text encoders whose outputs are concatenated in member order."""

    def __init__(self, members: Sequence[TextEncoder], freeze: bool = True):
        super().__init__()
        if not members:
            raise ConfigError("hybrid text encoder needs at least one member")
        self.members = nn.ModuleList(members)
        self.frozen = freeze
        if freeze:
            for p in self.parameters():
                p.requires_grad_(False)
            self.eval()

    @property
    def output_dim(self) -> int:
        return sum(m.output_dim for m in self.members)

    def train(self, mode: bool = True):
        # frozen members stay in eval mode
        return super().train(mode and not self.frozen)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        outs = []
        with torch.set_grad_enabled(torch.is_grad_enabled() and not self.frozen):
            for m in self.members:
                try:
                    outs.append(m.encode(prompts))
                except Exception as e:
                    raise RuntimeError(f"text encoder {m.name!r} failed: {e}") from e
        out = torch.cat(outs, dim=-1)
        return out.detach() if self.frozen else out


def encode_prompt_hybrid(encoder: HybridTextEncoder, prompt: str) -> torch.Tensor:
    return encoder([prompt])[0]


class Adapter(nn.Linear):
    """Single affine projection into the shared latent space (no activation)."""

    def __init__(self, in_dim: int, out_dim: int = 1024):
        super().__init__(in_dim, out_dim)

    @property
    def in_dim(self):
        return self.in_features

    @property
    def out_dim(self):
        return self.out_features

    def forward(self, v):
        if v.shape[-1] != self.in_features:
            raise DataError(f"adapter expects dim {self.in_features}, got {v.shape[-1]}")
        return super().forward(v)


def adapt(adapter: Adapter, v: torch.Tensor) -> torch.Tensor:
    return adapter(v)


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over parameter and buffer names, shapes, dtypes and little-endian bytes."""
    h = hashlib.sha256()
    tensors = dict(module.named_parameters())
    tensors.update(module.named_buffers())
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(f"{name}|{tuple(t.shape)}|{t.dtype}\n".encode())
        h.update(t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def assert_frozen(encoder: nn.Module, before: str, after: str) -> bool:
    return before == after


# registries: name -> factory(variant, dim, generator) returning an encoder

VisionFactory = Callable[[str, int, torch.Generator], VisionEncoder]
TextFactory = Callable[[str, int], TextEncoder]

_VISION: dict[str, VisionFactory] = {
    "toy": lambda variant, dim, g: ToyVisionEncoder(dim, generator=g),
}
_TEXT: dict[str, TextFactory] = {
    "toy": lambda variant, dim: ToyTextEncoder(f"toy/{variant}", dim),
}


def register_vision_encoder(family: str, factory: VisionFactory) -> None:
    _VISION[family] = factory


def register_text_encoder(family: str, factory: TextFactory) -> None:
    _TEXT[family] = factory


def _split(spec: str) -> tuple[str, str]:
    family, _, variant = spec.partition("/")
    return family, variant


def build_vision_encoder(spec: str, dim: int, generator: torch.Generator) -> VisionEncoder:
    family, variant = _split(spec)
    if family not in _VISION:
        raise ConfigError(f"unknown vision encoder {spec!r}; known: {sorted(_VISION)}")
    return _VISION[family](variant, dim, generator)


def parse_text_specs(spec: str) -> list[tuple[str, int]]:
    """`"toy/a:48,toy/b:32"` -> [("toy/a", 48), ("toy/b", 32)]."""
    out = []
    for item in spec.split(","):
        item = item.strip()
        name, sep, dim = item.rpartition(":")
        if not sep or not name:
            raise ConfigError(f"text encoder entry must be name:dim, got {item!r}")
        try:
            d = int(dim)
        except ValueError:
            raise ConfigError(f"bad text encoder dim in {item!r}") from None
        if d < 1:
            raise ConfigError(f"text encoder dim must be positive in {item!r}")
        out.append((name, d))
    if not out:
        raise ConfigError("no text encoders configured")
    return out


def build_hybrid_text_encoder(spec: str, freeze: bool = True) -> HybridTextEncoder:
    members = []
    for name, dim in parse_text_specs(spec):
        family, variant = _split(name)
        if family not in _TEXT:
            raise ConfigError(f"unknown text encoder {name!r}; known: {sorted(_TEXT)}")
        members.append(_TEXT[family](variant, dim))
    return HybridTextEncoder(members, freeze=freeze)
