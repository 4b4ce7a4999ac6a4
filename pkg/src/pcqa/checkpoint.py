"""Checkpoint archive: named float32 tensors + run config + MOS stats in one zip.

Layout:
    manifest.json   [{"name", "shape", "dtype", "offset", "nbytes"}, ...]
    tensors.bin     little-endian float32, row-major, concatenated in manifest order
    config.txt      the run config (TrainConfig key = value format)
    mos_stats.json  {"mean": ..., "std": ...} or null
"""

from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .datamodel import MosStats
from .errors import DataError
from .fusion import PCQAModel

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _writestr(zf: zipfile.ZipFile, name: str, data: bytes):
    # fixed timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path: str | os.PathLike, model: PCQAModel, cfg, mos_stats: MosStats | None) -> None:
    manifest, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        data = arr.tobytes(order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                         "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    stats = None if mos_stats is None else {"mean": mos_stats.mean, "std": mos_stats.std}
    with zipfile.ZipFile(path, "w") as zf:
        _writestr(zf, "manifest.json", json.dumps(manifest, indent=1).encode())
        _writestr(zf, "tensors.bin", b"".join(chunks))
        _writestr(zf, "config.txt", cfg.dumps().encode())
        _writestr(zf, "mos_stats.json", json.dumps(stats).encode())


def load_checkpoint(path: str | os.PathLike):
    """Returns (model, cfg, mos_stats); the model is rebuilt from the stored config."""
    from .training import TrainConfig, build_model

    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
            cfg = TrainConfig.loads(zf.read("config.txt").decode("utf-8"))
            raw_stats = json.loads(zf.read("mos_stats.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint {path}: {e}") from e
    stats = None if raw_stats is None else MosStats(raw_stats["mean"], raw_stats["std"])
    model = build_model(cfg, stats)
    state = {}
    for entry in manifest:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, cfg, stats
