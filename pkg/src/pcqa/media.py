"""Image/frame loading, resizing and training-time augmentation.

Tensors are channel-first float32 in [0, 1]: images (3, H, W), clips (T, 3, H, W).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datamodel import FRAME_SEQUENCE, Sample, sample_frames
from .errors import DataError

LUMA = (0.299, 0.587, 0.114)


@lru_cache(maxsize=4096)
def _decode(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read media {path}: {e}") from e
    arr.setflags(write=False)
    return arr


def load_image(path: str) -> torch.Tensor:
    arr = _decode(str(path))
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def resize(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Direct bilinear resize (no aspect preservation) of (3, H, W) or (T, 3, H, W)."""
    batched = img.ndim == 4
    x = img if batched else img[None]
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x if batched else x[0]


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    crop: tuple[int, int, int, int]  # top, left, height, width
    brightness: float
    contrast: float


def draw_augment(rng: np.random.Generator, height: int, width: int, cfg) -> AugmentParams:
    """Draw one set of augmentation parameters; a clip shares them across frames."""
    flip = bool(rng.random() < cfg.flip_prob)
    lo, hi = cfg.crop_scale
    scale = rng.uniform(lo, hi)
    ch = min(height, max(1, int(round(height * scale ** 0.5))))
    cw = min(width, max(1, int(round(width * scale ** 0.5))))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    b = rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
    c = rng.uniform(1.0 - cfg.contrast_jitter, 1.0 + cfg.contrast_jitter)
    return AugmentParams(flip, (top, left, ch, cw), float(b), float(c))


def apply_augment(img: torch.Tensor, p: AugmentParams, resolution: tuple[int, int]) -> torch.Tensor:
    x = img
    if p.flip:
        x = torch.flip(x, dims=(-1,))
    top, left, h, w = p.crop
    x = resize(x[..., top:top + h, left:left + w], resolution)
    if p.brightness != 1.0:
        x = x * p.brightness
    if p.contrast != 1.0:
        luma = x.new_tensor(LUMA).view(3, 1, 1)
        mean = (x * luma).sum(dim=-3, keepdim=True).mean(dim=(-2, -1), keepdim=True)
        x = (x - mean) * p.contrast + mean
    return x.clamp(0.0, 1.0)


def augment(img: torch.Tensor, rng: np.random.Generator, cfg) -> torch.Tensor:
    """Random flip, resized crop, brightness and contrast; deterministic given `rng`."""
    p = draw_augment(rng, img.shape[-2], img.shape[-1], cfg)
    return apply_augment(img, p, cfg.resolution)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Per-sample stream derived from (seed, id, epoch), independent of batch order."""
    id_key = int.from_bytes(hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng([seed & 0xFFFFFFFF, id_key, epoch])


def clip_paths(sample: Sample, max_frames: int) -> list[str]:
    if sample.media.kind == FRAME_SEQUENCE:
        return sample_frames(sample.media, max_frames)
    return list(sample.media.paths)


def load_clip(sample: Sample, resolution: tuple[int, int], max_frames: int,
              rng: np.random.Generator | None = None, cfg=None) -> torch.Tensor:
    """Frames of a sample as (T, 3, H, W); augmented clip-consistently when `rng` is given."""
    frames = [load_image(p) for p in clip_paths(sample, max_frames)]
    sizes = {tuple(f.shape[-2:]) for f in frames}
    if len(sizes) > 1:
        frames = [resize(f, frames[0].shape[-2:]) for f in frames]
    clip = torch.stack(frames)
    if rng is None:
        return resize(clip, resolution)
    p = draw_augment(rng, clip.shape[-2], clip.shape[-1], cfg)
    return apply_augment(clip, p, resolution)
