"""Experiment configuration schema.

A config file is YAML (JSON is a subset) with these sections::

    name: quad-demo
    problem:            # what is optimized
      kind: quadratic   # quadratic | synth | inner
      T: 8              # steps (synth, inner); quadratic uses len(centers)
      rho: 0.9          # synth: step correlation of coefficient paths
      J: 12             # synth: number of bumps
      dims: 2           # synth: continuous dims
      noise_sd: 0.01    # synth: observation noise
      centers: [0.3, 0.7]
      lo: -4.0
      hi: 4.0
    dataset:            # sequences fed to the dataset encoder
      instances: 64
      features: 3
      drift: none       # none | step | smooth
      ar: 0.7
      shift: 2.0
    algorithms: [sms_dkl, gp, parego, random]
    seeds: [0, 1, 2]
    budget:
      n_init: 5
      n_iters: 40
      checkpoints: [40, 100]
    sms_dkl: {m_train: 50, hidden: 8, ...}   # any RunConfig network/training field
    gp: {restarts: 5, maxiter: 200, candidate_pool: 2000}
    workers: 1
    record_timing: false

Every run with seed ``s`` uses problem instance ``s`` and dataset ``s``, so
algorithms are compared on matched problems and initial designs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

Algorithm = Literal["sms_dkl", "gp", "parego", "random"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemConfig(_Strict):
    kind: Literal["quadratic", "synth", "inner"] = "synth"
    T: int = Field(8, ge=1)
    rho: float = Field(0.9, ge=0.0, le=1.0)
    J: int = Field(12, ge=1)
    dims: int = Field(2, ge=1)
    noise_sd: float = Field(0.01, ge=0.0)
    centers: list[float] = [0.3, 0.7]
    lo: float = -4.0
    hi: float = 4.0


class DatasetConfig(_Strict):
    instances: int = Field(64, ge=2)
    features: int = Field(3, ge=1)
    drift: Literal["none", "step", "smooth"] = "none"
    ar: float = Field(0.7, ge=-1.0, le=1.0)
    shift: float = 2.0


class BudgetConfig(_Strict):
    n_init: int = Field(5, ge=1)
    n_iters: int = Field(40, ge=0)
    checkpoints: list[int] = [40, 100]


class DklConfig(_Strict):
    m_train: int = Field(50, ge=0)
    candidate_pool: int = Field(2000, ge=1)
    hidden: int = Field(8, ge=1)
    set_width: int = Field(16, ge=1)
    head_width: int = Field(16, ge=1)
    embed_dim: int = Field(1, ge=1)
    feature_dim: int = Field(16, ge=1)
    subsample_T: int = Field(32, ge=1)
    instance_cap: int = Field(256, ge=1)
    lr: float = Field(0.01, gt=0.0)
    warm_start: bool = True
    share_noise: bool = False


class GpConfig(_Strict):
    restarts: int = Field(5, ge=1)
    maxiter: int = Field(200, ge=1)
    candidate_pool: int = Field(2000, ge=1)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    problem: ProblemConfig = ProblemConfig()
    dataset: DatasetConfig = DatasetConfig()
    algorithms: list[Algorithm] = ["sms_dkl", "gp", "parego", "random"]
    seeds: list[int] = [0]
    budget: BudgetConfig = BudgetConfig()
    sms_dkl: DklConfig = DklConfig()
    gp: GpConfig = GpConfig()
    workers: int = Field(1, ge=1)
    record_timing: bool = False

    @field_validator("algorithms", "seeds")
    @classmethod
    def _nonempty_unique(cls, v):
        if not v:
            raise ValueError("must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("entries must be unique")
        return v


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return ExperimentConfig.model_validate(raw)
