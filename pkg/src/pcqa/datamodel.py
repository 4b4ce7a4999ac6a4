"""Samples, manifests, MOS normalization and frame sampling."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, NumericError

IMAGE = "image"
FRAME_SEQUENCE = "frame_sequence"

LABELED_HEADER = ["id", "media", "prompt", "mos"]
UNLABELED_HEADER = ["id", "media", "prompt"]


@dataclass(frozen=True)
class MediaRef:
    kind: str
    paths: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in (IMAGE, FRAME_SEQUENCE):
            raise DataError(f"unknown media kind {self.kind!r}")
        if not self.paths:
            raise DataError("media has no paths")
        if self.kind == IMAGE and len(self.paths) != 1:
            raise DataError("image media must reference exactly one path")

    @classmethod
    def parse(cls, field: str, base_dir: str | os.PathLike | None = None) -> "MediaRef":
        parts = [p.strip() for p in field.split(";")]
        if not field.strip() or any(not p for p in parts):
            raise DataError(f"empty media path in {field!r}")
        if base_dir is not None:
            parts = [p if os.path.isabs(p) else os.path.join(base_dir, p) for p in parts]
        kind = FRAME_SEQUENCE if len(parts) > 1 else IMAGE
        return cls(kind, tuple(parts))

    def serialize(self, base_dir: str | os.PathLike | None = None) -> str:
        paths = self.paths
        if base_dir is not None:
            paths = tuple(os.path.relpath(p, base_dir) for p in paths)
        return ";".join(paths)


@dataclass(frozen=True)
class Sample:
    id: str
    media: MediaRef
    prompt: str
    mos: float | None = None

    def __post_init__(self):
        if not self.id:
            raise DataError("sample id must be non-empty")
        if self.prompt is None:
            raise DataError(f"sample {self.id}: prompt is absent")


@dataclass(frozen=True)
class MosStats:
    """Mean and population standard deviation of a label vector."""

    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise DataError("MOS statistics must be finite")
        if not self.std > 0:
            raise DataError(f"MOS std must be positive, got {self.std}")


def load_manifest(path: str | os.PathLike, check_media: bool = True) -> list[Sample]:
    """Read a manifest CSV (`id,media,prompt[,mos]`).

    Relative media paths resolve against the manifest's directory. A
    single-path media field is an image; a `;`-joined list is a frame
    sequence kept in listed order.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    if text.startswith("\ufeff"):
        text = text[1:]
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty manifest") from None
    if header == LABELED_HEADER:
        labeled = True
    elif header == UNLABELED_HEADER:
        labeled = False
    else:
        raise DataError(f"{path}: malformed header {','.join(header)!r}")

    base = path.parent
    samples: list[Sample] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        sid, media_field, prompt = row[0], row[1], row[2]
        if not sid:
            raise DataError(f"{path}:{lineno}: empty id")
        if sid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
        seen.add(sid)
        mos = None
        if labeled and row[3].strip():
            try:
                mos = float(row[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad mos value {row[3]!r}") from None
        media = MediaRef.parse(media_field, base)
        if check_media:
            for p in media.paths:
                if not os.path.isfile(p):
                    raise DataError(f"{path}:{lineno}: media not found: {p}")
        samples.append(Sample(sid, media, prompt, mos))
    return samples


def write_manifest(samples: Sequence[Sample], path: str | os.PathLike, relative: bool = True) -> None:
    """Inverse of `load_manifest`. Writes the unlabeled header if no sample has mos."""
    path = Path(path)
    labeled = any(s.mos is not None for s in samples)
    base = path.parent if relative else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELED_HEADER if labeled else UNLABELED_HEADER)
        for s in samples:
            row = [s.id, s.media.serialize(base), s.prompt]
            if labeled:
                row.append("" if s.mos is None else repr(float(s.mos)))
            w.writerow(row)


def check_unique_ids(samples: Iterable[Sample]) -> None:
    seen = set()
    for s in samples:
        if s.id in seen:
            raise DataError(f"duplicate id {s.id!r}")
        seen.add(s.id)


def compute_mos_stats(samples: Sequence[Sample]) -> MosStats:
    labels = []
    for s in samples:
        if s.mos is None:
            raise DataError(f"sample {s.id} has no mos label")
        labels.append(float(s.mos))
    return stats_of(labels)


def stats_of(values: Sequence[float]) -> MosStats:
    n = len(values)
    if n < 2:
        raise DataError(f"need at least 2 values for normalization stats, got {n}")
    try:
        mean = math.fsum(values) / n
        var = math.fsum((v - mean) ** 2 for v in values) / n
    except OverflowError:
        raise NumericError("label statistics overflow") from None
    if var == 0.0:
        raise DataError("constant labels: standard deviation is zero")
    return MosStats(mean, math.sqrt(var))


def normalize_mos(mos: float, stats: MosStats) -> float:
    return (mos - stats.mean) / stats.std


def denormalize_mos(z: float, stats: MosStats) -> float:
    return z * stats.std + stats.mean


def sample_frame_indices(num_frames: int, max_frames: int) -> list[int]:
    """Endpoint-inclusive uniform indices, round-half-up, exact in integers."""
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if num_frames < 1:
        raise DataError("frame sequence is empty")
    if num_frames <= max_frames:
        return list(range(num_frames))
    if max_frames == 1:
        return [0]
    den = 2 * (max_frames - 1)
    return [(2 * i * (num_frames - 1) + (max_frames - 1)) // den for i in range(max_frames)]


def sample_frames(media: MediaRef, max_frames: int) -> list[str]:
    if media.kind != FRAME_SEQUENCE:
        raise DataError("sample_frames expects a frame sequence")
    return [media.paths[i] for i in sample_frame_indices(len(media.paths), max_frames)]
