from pydantic import BaseModel
from typing import Dict, List, Optional, Tuple

from ccdet.dataset import CorpusSummary
from ccdet.eigencam import CamStats, CorpusCamStats
from ccdet.train import HoldoutSummary

class RunManifest(BaseModel):
    command: str
    version: str
    started: str
    argv: List[str]

class RoundRecord(BaseModel):
    round_id: int
    weights: str
    train_log: str
    report: str
    split: str
    accuracy: float
    auc: Optional[float] = None
    steps: int

class TrainSummary(BaseModel):
    corpus: CorpusSummary
    holdout: HoldoutSummary
    rounds: List[RoundRecord]

class PredictRecord(BaseModel):
    image: str
    predicted_class: Optional[str] = None  # None = abstain
    confidence: float
    box: Optional[Tuple[float, float, float, float]] = None
    class_scores: List[float] = []
    overlay: str

class CamRecord(BaseModel):
    image: str
    heatmap: str
    overlay: str
    abstained: bool
    predicted_class: Optional[str] = None
    confidence: float = 0.0
    stats: Optional[CamStats] = None

class CamBatchRecord(BaseModel):
    heatmap: str
    layers: List[str]
    stats: CorpusCamStats

class AnchorReport(BaseModel):
    samples: int
    size: int
    seed: int
    anchors: List[List[Tuple[float, float]]]
    mean_best_ratio: float
    coverage: Dict[str, float]
