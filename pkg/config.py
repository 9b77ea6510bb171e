"""Configuration management: environment defaults and YAML experiment configs."""
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv

from core import ConfigError, DatasetError, InvalidInputError
from data import SyntheticSpec
from encoders import BackboneConfig
from fusion import FusionConfig
from training import TrainConfig

# Load environment variables from .env file
load_dotenv()


class Config:
    """Process-wide defaults, overridable through LDPF_* environment variables."""

    BASE_DIR: Path = Path(__file__).parent
    OUTPUT_ROOT: Path = Path(os.getenv("LDPF_OUTPUT_ROOT", "runs"))
    LOG_LEVEL: str = os.getenv("LDPF_LOG_LEVEL", "INFO").upper()
    DEVICE: str = os.getenv("LDPF_DEVICE", "cpu").lower()
    DEFAULT_SEED: int = int(os.getenv("LDPF_SEED", "0"))
    TAU_CLS: float = float(os.getenv("LDPF_TAU_CLS", "0.01"))
    TAU_FUSION: float = float(os.getenv("LDPF_TAU_FUSION", "0.1"))
    BACKBONE_WEIGHTS: Optional[str] = os.getenv("LDPF_BACKBONE_WEIGHTS") or None

    # Log file settings
    LOG_ROTATION: str = "10 MB"
    LOG_RETENTION: str = "10 days"
    LOG_FORMAT: str = "{time:YYYY-MM-DD HH:mm:ss} | {level} | {module}:{function}:{line} | {message}"

    @classmethod
    def get_output_dir(cls, name: Optional[str] = None) -> Path:
        """Get or create an output directory under the output root."""
        out = cls.OUTPUT_ROOT / name if name else cls.OUTPUT_ROOT
        out.mkdir(parents=True, exist_ok=True)
        return out

    @classmethod
    def get_device(cls) -> str:
        """Only the CPU path is deterministic; anything else is refused."""
        if cls.DEVICE != "cpu":
            raise ConfigError(f"LDPF_DEVICE={cls.DEVICE!r} is not supported; runs are CPU only")
        return cls.DEVICE


SECTIONS = ("dataset", "backbone", "train", "fusion", "output_dir", "seeds")


def _build(section: str, cls, values: Optional[Dict[str, Any]]):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {unknown}")
    for f in fields(cls):
        if f.name not in values or values[f.name] is None:
            continue
        expected = type(f.default) if f.default not in (None, MISSING) else None
        value = values[f.name]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            values[f.name] = float(value)
        elif expected is not None and not isinstance(value, expected):
            raise ConfigError(
                f"{section}.{f.name} must be {expected.__name__}, got {type(value).__name__} ({value!r})"
            )
    return cls(**values)


def _dataset_descriptor(values: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    values = dict(values or {"kind": "synthetic"})
    kind = values.get("kind", "synthetic")
    if kind == "synthetic":
        spec = _build("dataset", SyntheticSpec, {k: v for k, v in values.items() if k != "kind"})
        try:
            spec.validate()
        except DatasetError as e:
            raise ConfigError(f"dataset: {e}") from e
        return {"kind": "synthetic", **spec.to_dict()}
    if kind == "directory":
        unknown = sorted(set(values) - {"kind", "root"})
        if unknown:
            raise ConfigError(f"unknown key(s) in 'dataset': {unknown}")
        return {"kind": "directory", "root": values.get("root")}
    if kind == "manifest":
        unknown = sorted(set(values) - {"kind", "path"})
        if unknown:
            raise ConfigError(f"unknown key(s) in 'dataset': {unknown}")
        return {"kind": "manifest", "path": values.get("path")}
    raise ConfigError(f"dataset.kind must be synthetic, directory or manifest, got {kind!r}")


@dataclass
class ExperimentConfig:
    dataset: Dict[str, Any] = field(default_factory=lambda: {"kind": "synthetic", **SyntheticSpec().to_dict()})
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(tau_cls=Config.TAU_CLS, seed=Config.DEFAULT_SEED))
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(tau_fusion=Config.TAU_FUSION))
    output_dir: str = field(default_factory=lambda: str(Config.OUTPUT_ROOT))
    seeds: List[int] = field(default_factory=lambda: [Config.DEFAULT_SEED])

    def validate(self) -> "ExperimentConfig":
        try:
            self.backbone.validate()
        except InvalidInputError as e:
            raise ConfigError(str(e)) from e
        self.train.validate()
        self.fusion.validate()
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError(f"seeds must be a nonempty list of non-negative integers, got {self.seeds!r}")
        return self

    @classmethod
    def from_dict(cls, document: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        document = dict(document or {})
        unknown = sorted(set(document) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {unknown}")
        defaults = cls()
        train_values = {"tau_cls": Config.TAU_CLS, "seed": Config.DEFAULT_SEED, **(document.get("train") or {})}
        fusion_values = {"tau_fusion": Config.TAU_FUSION, **(document.get("fusion") or {})}
        backbone_values = {"weights_path": Config.BACKBONE_WEIGHTS, **(document.get("backbone") or {})}
        seeds = document.get("seeds", defaults.seeds)
        if isinstance(seeds, int):
            seeds = [seeds]
        config = cls(
            dataset=_dataset_descriptor(document.get("dataset")),
            backbone=_build("backbone", BackboneConfig, backbone_values),
            train=_build("train", TrainConfig, train_values),
            fusion=_build("fusion", FusionConfig, fusion_values),
            output_dir=str(document.get("output_dir", defaults.output_dir)),
            seeds=list(seeds) if isinstance(seeds, (list, tuple)) else seeds,
        )
        return config.validate()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset": dict(self.dataset),
            "backbone": asdict(self.backbone),
            "train": self.train.to_dict(),
            "fusion": self.fusion.to_dict(),
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
        }

    def override(self, **changes: Any) -> "ExperimentConfig":
        """Apply command-line flags; ``None`` means the flag was not given."""
        document = self.to_dict()
        if changes.get("dataset") is not None:
            value = changes["dataset"]
            if value == "synthetic":
                document["dataset"] = {"kind": "synthetic", **{k: v for k, v in document["dataset"].items()
                                                               if k in SyntheticSpec.__dataclass_fields__}}
            elif str(value).endswith(".json"):
                document["dataset"] = {"kind": "manifest", "path": str(value)}
            else:
                document["dataset"] = {"kind": "directory", "root": str(value)}
        if changes.get("backbone") is not None:
            document["backbone"]["kind"] = changes["backbone"]
        if changes.get("epochs") is not None:
            document["train"]["epochs"] = changes["epochs"]
        if changes.get("seed") is not None:
            document["seeds"] = [changes["seed"]]
            document["train"]["seed"] = changes["seed"]
        if changes.get("fusion_mode") is not None:
            document["fusion"]["mode"] = changes["fusion_mode"]
        if changes.get("out") is not None:
            document["output_dir"] = str(changes["out"])
        return ExperimentConfig.from_dict(document)

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path


def load_experiment_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Read a YAML experiment config; no path gives the defaults."""
    if path is None:
        return ExperimentConfig.from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if document is not None and not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a mapping of sections")
    return ExperimentConfig.from_dict(document)
