import json
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import BaseModel, ConfigDict

from ccdet.detector import DetectorConfig
from ccdet.eigencam import CamConfig
from ccdet.errors import ConfigError
from ccdet.postprocess import PostprocessConfig
from ccdet.train import HoldoutConfig, TrainConfig


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Settings(BaseModel):
    # output location for timestamped run directories
    RUNS_DIR: Path = Path(os.getenv("CCDET_RUNS_DIR", "runs"))

    # logging / console
    LOG_LEVEL: str = os.getenv("CCDET_LOG_LEVEL", "INFO").upper()
    PROGRESS: bool = _env_flag("CCDET_PROGRESS", "1")

settings = Settings()


class RunConfig(BaseModel):
    """Everything a run needs; archived as config.json next to its outputs."""
    model_config = ConfigDict(extra="forbid")

    detector: DetectorConfig = DetectorConfig()
    train: TrainConfig = TrainConfig()
    holdout: HoldoutConfig = HoldoutConfig()
    postprocess: PostprocessConfig = PostprocessConfig()
    cam: CamConfig = CamConfig()


# CLI flag -> (section, field)
OVERRIDES = {
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "seed": ("train", "seed"),
    "width_base": ("detector", "width_base"),
    "input_size": ("detector", "input_size"),
    "conf_threshold": ("postprocess", "conf_threshold"),
    "iou_threshold": ("postprocess", "iou_threshold"),
    "rounds": ("holdout", "rounds"),
    "layers": ("cam", "layers"),
}


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """JSON file (optional) merged with non-None flag overrides, then validated as a whole."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in OVERRIDES:
            raise ConfigError(f"unknown override {key!r}")
        section, name = OVERRIDES[key]
        data.setdefault(section, {})[name] = value
    return RunConfig.model_validate(data)


def write_run_config(config: RunConfig, path: Path) -> Path:
    Path(path).write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return Path(path)
