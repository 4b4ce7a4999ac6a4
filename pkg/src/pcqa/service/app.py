"""HTTP scoring service around a loaded checkpoint.

    uvicorn --factory pcqa.service.app:create_app      (checkpoint from $PCQA_CHECKPOINT)
    pcqa serve --checkpoint run/best.ckpt
"""

import os
import threading

from fastapi import FastAPI, HTTPException

from .. import checkpoint
from ..datamodel import MediaRef, Sample, denormalize_mos
from ..errors import DataError, NumericError
from ..evaluation import PredictionSet, correlation_line, ensemble_blend, predict
from .schemas import (EnsembleRequest, EvaluateRequest, EvaluateResponse, HealthResponse,
                      ScoreEntry, ScoreRequest, ScoreResponse)


def _entries(preds: PredictionSet):
    return [ScoreEntry(id=k, score=v) for k, v in preds]


def _as_set(entries) -> PredictionSet:
    return PredictionSet((e.id, e.score) for e in entries)


def create_app(checkpoint_path=None) -> FastAPI:
    checkpoint_path = checkpoint_path or os.environ.get("PCQA_CHECKPOINT")
    app = FastAPI(title="pcqa", description="Prompt-conditioned quality assessment")
    state = {"model": None, "cfg": None, "stats": None}
    lock = threading.Lock()
    if checkpoint_path:
        state["model"], state["cfg"], state["stats"] = checkpoint.load_checkpoint(checkpoint_path)

    @app.get("/health", response_model=HealthResponse)
    def health():
        cfg = state["cfg"]
        return HealthResponse(model_loaded=state["model"] is not None,
                              mixer=cfg.mixer_kind if cfg else None,
                              backbone=cfg.vision_encoder if cfg else None)

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        model, cfg, stats = state["model"], state["cfg"], state["stats"]
        if model is None:
            raise HTTPException(503, "no checkpoint loaded")
        try:
            samples = [Sample(it.id, MediaRef.parse(";".join(it.media)), it.prompt) for it in req.items]
            for s in samples:
                for p in s.media.paths:
                    if not os.path.isfile(p):
                        raise DataError(f"media not found: {p}")
            with lock:
                preds = predict(model, samples, cfg.resolution, cfg.max_frames, tta=req.tta,
                                batch_size=cfg.batch_size)
        except DataError as e:
            raise HTTPException(400, str(e))
        if stats is not None:
            preds = preds.map(lambda z: denormalize_mos(z, stats))
        return ScoreResponse(scores=_entries(preds), space="mos" if stats else "normalized")

    @app.post("/ensemble", response_model=ScoreResponse)
    def ensemble(req: EnsembleRequest):
        try:
            blended = ensemble_blend([_as_set(m) for m in req.members])
        except DataError as e:
            raise HTTPException(400, str(e))
        except NumericError as e:
            raise HTTPException(422, str(e))
        return ScoreResponse(scores=_entries(blended), space="normalized")

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest):
        labels = {}
        for lab in req.labels:
            labels[lab.id] = lab.mos
        try:
            preds = _as_set(req.predictions)
            missing = [k for k in preds.ids() if k not in labels]
            if missing:
                raise DataError(f"no label for ids {missing[:5]}")
            s, p, v = correlation_line(preds.values(), [labels[k] for k in preds.ids()])
        except DataError as e:
            raise HTTPException(400, str(e))
        except NumericError as e:
            raise HTTPException(422, str(e))
        return EvaluateResponse(srcc=s, plcc=p, val_score=v)

    return app
