"""Procedural labeled dataset with a known scoring function.

Each sample is a textured image of random global brightness and a prompt of
random word count. Its normalized target is
    0.7 * z(mean brightness) + 0.3 * z(prompt word count)
with z the population z-score over the generated set; the written MOS is
`mos_offset + mos_scale * target`.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import FRAME_SEQUENCE, IMAGE, MediaRef, Sample, write_manifest

WORDS = ("a cat dog tree river castle sunset portrait of the in with neon city forest "
         "painting oil watercolor photo realistic cinematic dragon mountain ocean night "
         "glowing tiny giant robot flower garden ancient futuristic street rain snow").split()

BRIGHTNESS_WEIGHT = 0.7
LENGTH_WEIGHT = 0.3


def _zscore(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / x.std()


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(h // 8 + 2, w // 8 + 2, 3))
    up = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w]
    fine = rng.normal(0.0, 0.5, size=(h, w, 3))
    t = up + fine
    return 0.08 * (t - t.mean()) / t.std()


def make_synthetic(out_dir: str | os.PathLike, n: int = 512, seed: int = 0,
                   size: tuple[int, int] = (64, 96), frames: int = 1,
                   mos_offset: float = 3.0, mos_scale: float = 0.9) -> list[Sample]:
    """Write `n` samples (PNG files + `manifest.csv`) under `out_dir` and return them.

    With `frames > 1` each sample is a frame sequence whose frames share the
    base brightness and differ only in texture.
    """
    out = Path(out_dir)
    (out / "media").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = size
    bright, lengths, media, prompts = [], [], [], []
    for i in range(n):
        base = rng.uniform(0.15, 0.85)
        paths, means = [], []
        for f in range(frames):
            img = np.clip(base + _texture(rng, h, w), 0.0, 1.0)
            q = np.round(img * 255).astype(np.uint8)
            name = f"s{i:04d}.png" if frames == 1 else f"s{i:04d}_f{f:02d}.png"
            Image.fromarray(q).save(out / "media" / name)
            paths.append(str(out / "media" / name))
            means.append(q.mean() / 255.0)
        k = int(rng.integers(1, 25))
        prompts.append(" ".join(rng.choice(WORDS, size=k)))
        lengths.append(k)
        bright.append(float(np.mean(means)))
        media.append(MediaRef(IMAGE if frames == 1 else FRAME_SEQUENCE, tuple(paths)))
    target = BRIGHTNESS_WEIGHT * _zscore(np.array(bright)) + LENGTH_WEIGHT * _zscore(np.array(lengths, float))
    samples = [Sample(f"s{i:04d}", media[i], prompts[i], float(mos_offset + mos_scale * target[i]))
               for i in range(n)]
    write_manifest(samples, out / "manifest.csv")
    return samples


def split(samples, holdout: float = 0.2, seed: int = 0):
    """Deterministic shuffled train/held-out split."""
    idx = np.random.default_rng(seed).permutation(len(samples))
    cut = int(round(len(samples) * (1 - holdout)))
    return [samples[i] for i in sorted(idx[:cut])], [samples[i] for i in sorted(idx[cut:])]
