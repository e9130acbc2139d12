"""
Training configuration and report models
"""

from pydantic import BaseModel, Field
from typing import List, Optional

import pandas as pd


REPORT_COLUMNS = ["iteration", "objective", "likelihood_term", "prior_term", "entropy_term"]


class TrainConfig(BaseModel):
    """Joint optimization settings"""
    mc_samples: int = Field(2, ge=1, description="Monte-Carlo samples per measurement per step")
    lr_generator: float = Field(1e-3, gt=0, description="Step size for generator weights")
    lr_latent: float = Field(1e-2, gt=0, description="Step size for latent posteriors")
    iterations: int = Field(1000, ge=0, description="Optimization steps")
    batch_size: Optional[int] = Field(None, ge=1, description="Measurement indices per step (None = all)")
    seed: int = Field(0, ge=0, description="RNG seed")
    dropout: bool = Field(True, description="Dropout during training (implicit weight prior)")
    weight_decay: float = Field(0.0, ge=0, description="Optional L2 log-prior on generator weights")
    final_lr_fraction: float = Field(1.0, gt=0, le=1.0, description="Cosine decay target as a fraction of the step size")
    threads: int = Field(1, ge=1, description="Worker threads for per-measurement passes")
    checkpoint_every: int = Field(0, ge=0, description="Checkpoint interval in steps (0 = only at the end)")
    log_every: int = Field(50, ge=1, description="Progress log interval")


class TrainRecord(BaseModel):
    """One optimization step"""
    iteration: int
    objective: float = Field(..., description="Monte-Carlo ELBO proxy estimate, averaged over the batch")
    likelihood_term: float
    prior_term: float
    entropy_term: float
    wall_clock: float = Field(0.0, description="Seconds since training start")


class TrainReport(BaseModel):
    """Per-iteration objective trace"""
    records: List[TrainRecord] = Field(default_factory=list)

    @property
    def objectives(self) -> List[float]:
        return [r.objective for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        """Deterministic columns only; wall-clock is kept out of the CSV"""
        rows = [r.model_dump(include=set(REPORT_COLUMNS)) for r in self.records]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)
