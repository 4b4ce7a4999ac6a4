"""Correlation metrics, test-time flip averaging and normalized ensemble blending."""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .datamodel import MosStats, Sample, stats_of
from .errors import DataError, NumericError
from .fusion import PCQAModel, hflip
from .media import load_clip


class PredictionSet:
    """Ordered id -> score mapping, optionally carrying the stats of its own scores."""

    def __init__(self, entries: Mapping[str, float] | Iterable[tuple[str, float]],
                 stats: MosStats | None = None):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        self.entries: dict[str, float] = {}
        for sid, score in items:
            if sid in self.entries:
                raise DataError(f"duplicate id {sid!r} in predictions")
            score = float(score)
            if not math.isfinite(score):
                raise NumericError(f"non-finite score for {sid!r}")
            self.entries[sid] = score
        self.stats = stats

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.items())

    def __getitem__(self, sid):
        return self.entries[sid]

    def __eq__(self, other):
        return isinstance(other, PredictionSet) and list(self) == list(other)

    def __repr__(self):
        return f"PredictionSet({len(self)} entries)"

    def ids(self) -> list[str]:
        return list(self.entries)

    def values(self) -> list[float]:
        return list(self.entries.values())

    def map(self, fn) -> "PredictionSet":
        return PredictionSet((k, fn(v)) for k, v in self.entries.items())


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {g.size} labels")
    if p.size < 2:
        raise DataError("need at least 2 pairs for a correlation")
    return p, g


def _pearson(p: np.ndarray, g: np.ndarray) -> float:
    dp = p - p.mean()
    dg = g - g.mean()
    sp = float(np.dot(dp, dp))
    sg = float(np.dot(dg, dg))
    if sp == 0.0 or sg == 0.0:
        raise NumericError("correlation undefined for constant input")
    r = float(np.dot(dp, dg)) / math.sqrt(sp * sg)
    return min(1.0, max(-1.0, r))


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return _pearson(fractional_ranks(p), fractional_ranks(g))


def plcc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return _pearson(p, g)


def combine_val_score(srcc_value: float, plcc_value: float) -> float:
    return (srcc_value + plcc_value) / 2.0


def val_score(pred, gt) -> float:
    return combine_val_score(srcc(pred, gt), plcc(pred, gt))


def correlation_line(pred, gt) -> tuple[float, float, float]:
    s, p = srcc(pred, gt), plcc(pred, gt)
    return s, p, combine_val_score(s, p)


def normalize_predictions(p: PredictionSet) -> PredictionSet:
    """z-score a prediction set with the population mean/std of its own scores."""
    try:
        stats = stats_of(p.values())
    except DataError as e:
        if len(p) >= 2:
            raise NumericError(f"cannot normalize constant predictions: {e}") from None
        raise
    out = p.map(lambda s: (s - stats.mean) / stats.std)
    out.stats = stats
    return out


def ensemble_blend(preds: Sequence[PredictionSet]) -> PredictionSet:
    """Per-id mean of each member's z-scored predictions (order of the first member kept)."""
    if not preds:
        raise DataError("ensemble needs at least one prediction set")
    ids = preds[0].ids()
    universe = set(ids)
    for i, p in enumerate(preds[1:], start=2):
        if set(p.ids()) != universe:
            raise DataError(f"prediction set {i} covers different ids than set 1")
    normed = [normalize_predictions(p) for p in preds]
    k = len(normed)
    return PredictionSet((sid, math.fsum(n[sid] for n in normed) / k) for sid in ids)


@torch.no_grad()
def score_clips(model: PCQAModel, clips: Sequence[torch.Tensor], prompts: Sequence[str]) -> list[float]:
    model.eval()
    return model(list(clips), prompts=list(prompts)).double().tolist()


@torch.no_grad()
def tta_flip(model: PCQAModel, x: torch.Tensor, t: str) -> float:
    """Mean of the scores of `x` and its horizontal mirror (all frames mirrored together)."""
    clip = x if x.ndim == 4 else x[None]
    a = score_clips(model, [clip], [t])[0]
    b = score_clips(model, [hflip(clip)], [t])[0]
    return (a + b) / 2.0


@torch.no_grad()
def predict(model: PCQAModel, samples: Sequence[Sample], resolution: tuple[int, int],
            max_frames: int = 16, tta: bool = False, batch_size: int = 16) -> PredictionSet:
    """Model-space (normalized MOS) scores for `samples`, in input order.

    No augmentation is applied; `tta` averages each score with that of the
    mirrored input before any ensemble normalization.
    """
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        clips = [load_clip(s, resolution, max_frames) for s in batch]
        prompts = [s.prompt for s in batch]
        scores = score_clips(model, clips, prompts)
        if tta:
            flipped = score_clips(model, [hflip(c) for c in clips], prompts)
            scores = [(a + b) / 2.0 for a, b in zip(scores, flipped)]
        out.extend(zip((s.id for s in batch), scores))
    return PredictionSet(out)


def write_predictions(preds: PredictionSet, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score"])
        for sid, score in preds:
            w.writerow([sid, f"{score:.9g}"])


def read_predictions(path: str | os.PathLike) -> PredictionSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"prediction file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "score"]:
            raise DataError(f"{path}: expected header id,score, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns")
            try:
                rows.append((row[0], float(row[1])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad score {row[1]!r}") from None
    return PredictionSet(rows)


def evaluate_against(preds: PredictionSet, samples: Sequence[Sample]) -> tuple[float, float, float]:
    """(srcc, plcc, val_score) of predictions against labeled samples, matched by id."""
    labels = {s.id: s.mos for s in samples}
    pred, gt = [], []
    for sid, score in preds:
        if sid not in labels:
            raise DataError(f"prediction id {sid!r} not in manifest")
        if labels[sid] is None:
            raise DataError(f"sample {sid!r} has no mos label")
        pred.append(score)
        gt.append(labels[sid])
    return correlation_line(pred, gt)
