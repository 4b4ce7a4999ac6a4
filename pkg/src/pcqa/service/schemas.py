from typing import List, Optional

from pydantic import BaseModel, Field


class ScoreItem(BaseModel):
    id: str = Field(min_length=1)
    media: List[str] = Field(min_length=1, description="one image path, or ordered frame paths")
    prompt: str = ""


class ScoreRequest(BaseModel):
    items: List[ScoreItem] = Field(min_length=1)
    tta: bool = False


class ScoreEntry(BaseModel):
    id: str
    score: float


class ScoreResponse(BaseModel):
    scores: List[ScoreEntry]
    space: str = "mos"


class EnsembleRequest(BaseModel):
    members: List[List[ScoreEntry]] = Field(min_length=1)


class LabelEntry(BaseModel):
    id: str
    mos: float


class EvaluateRequest(BaseModel):
    predictions: List[ScoreEntry]
    labels: List[LabelEntry]


class EvaluateResponse(BaseModel):
    srcc: float
    plcc: float
    val_score: float


class HealthResponse(BaseModel):
    status: str = "ok"
    model_loaded: bool
    mixer: Optional[str] = None
    backbone: Optional[str] = None
