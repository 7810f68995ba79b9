"""Request and response models of the HTTP service."""

from __future__ import annotations

import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..bench.config import DklConfig, ExperimentConfig


def nan_to_none(rows):
    """JSON has no NaN; undefined entries travel as null."""
    return [[None if not math.isfinite(v) else float(v) for v in row] for row in rows]


class Health(BaseModel):
    status: str = "ok"
    version: str


class CheckRequest(BaseModel):
    names: Optional[list[str]] = None


class CheckItem(BaseModel):
    name: str
    passed: bool
    detail: str
    seconds: float


class CheckResponse(BaseModel):
    passed: bool
    results: list[CheckItem]


class ExperimentRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str


class RunEntry(BaseModel):
    model_config = ConfigDict(extra="allow")
    algorithm: str
    seed: int
    history: str
    rows: int


class ExperimentResponse(BaseModel):
    out_dir: str
    name: str
    variants: list[str]
    checkpoints: list[int]
    runs: list[RunEntry]
    errors: list[dict]
    files: dict[str, str]


class PlotRequest(BaseModel):
    bundle: str


class PlotResponse(BaseModel):
    files: list[str]


class DiagRequest(BaseModel):
    history: str
    top_k: int = Field(20, ge=1)
    out_dir: Optional[str] = None


class DiagResponse(BaseModel):
    T: int
    n: int
    corr: list[list[Optional[float]]]
    mean_offdiag: Optional[float]
    embeddings: Optional[list[list[float]]]
    top_k: int
    top_k_trajectory: list[list[float]]
    files: list[str]


# ---- ask/tell sessions ------------------------------------------------------ #


class DimModel(BaseModel):
    name: str
    kind: Literal["int", "float", "cat"]
    lo: float
    hi: float


class SequenceData(BaseModel):
    """Padded arrays: ``obs`` is I x T x d, ``labels`` I x T."""

    obs: list[list[list[float]]]
    labels: list[list[float]]
    lengths: Optional[list[int]] = None


class SessionRequest(BaseModel):
    space: list[DimModel]
    data: SequenceData
    n_init: int = Field(5, ge=1)
    seed: int = 0
    dkl: DklConfig = DklConfig()

    @field_validator("space")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("space needs at least one dimension")
        return v


class SessionCreated(BaseModel):
    session_id: str
    T: int
    initial_points: list[list[float]]


class TellRequest(BaseModel):
    x: list[float]
    y: list[float]


class TellResponse(BaseModel):
    n_observations: int


class AskResponse(BaseModel):
    x: list[float]
    chosen_t: int
    probs: list[float]
    acq_values: list[float]
