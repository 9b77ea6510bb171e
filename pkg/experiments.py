"""Experiment orchestration: training runs per split and seed, evaluation,
ablations, cluster inspection and report files."""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from config import ExperimentConfig
from core import ConfigError, InvalidInputError
from data import (
    DatasetManifest,
    DomainSplit,
    SyntheticSpec,
    build_dataset,
    leave_one_domain_out_splits,
    save_manifest,
)
from encoders import EncoderPair, external_encoder_adapter
from fusion import FusionConfig, FusionPredictor, accuracy, predict_zero_shot
from latent_domain import assign_latent_domains, best_mapping_agreement, cluster_report
from oracle import PredictionDump, bound_report, plot_bound_report
from training import TrainConfig, TrainResult, train
from utils import mean_std, read_json, write_json, write_jsonl

EVAL_FUSION_MODES = ("similarity", "greedy", "average")
ABLATION_VARIANTS = ("full", "no_dap", "no_dsp", "no_adv", "no_clustering", "greedy", "average", "zero_shot")
# Variants that reuse the "full" training run with another fusion rule.
FUSION_ONLY_VARIANTS = {"greedy": "greedy", "average": "average"}
TRAINING_VARIANTS = {
    "full": {},
    "no_dap": {"no_dap": True},
    "no_dsp": {"no_dsp": True},
    "no_adv": {"no_adv": True},
    "no_clustering": {"no_clustering": True},
}


def class_anchors(config: ExperimentConfig) -> Optional[np.ndarray]:
    """Class concepts the toy encoder is "pretrained" on (synthetic data only)."""
    if config.backbone.kind != "toy" or config.dataset.get("kind") != "synthetic":
        return None
    options = {k: v for k, v in config.dataset.items() if k != "kind"}
    return SyntheticSpec(**options).class_centers()


def build_encoders(config: ExperimentConfig) -> EncoderPair:
    return external_encoder_adapter(config.backbone, class_anchors(config))


def select_splits(manifest: DatasetManifest, split: Optional[str] = None) -> List[DomainSplit]:
    """All leave-one-domain-out splits, or the one whose target is named (or indexed) by ``split``."""
    splits = leave_one_domain_out_splits(manifest)
    if split is None:
        return splits
    for candidate in splits:
        if split in (candidate.target_name, str(candidate.target_domain)):
            return [candidate]
    names = [s.target_name for s in splits]
    raise ConfigError(f"unknown split {split!r}; choose one of {names}")


def effective_fusion(train_config: TrainConfig, fusion: FusionConfig) -> FusionConfig:
    """no_dsp leaves one shared prompt, so fusion collapses to that prompt."""
    if train_config.effective().fusion_mode.startswith("single:"):
        return replace(fusion, mode=train_config.effective().fusion_mode)
    return fusion


@dataclass
class RunRecord:
    seed: int
    target_domain: int
    target_name: str
    checkpoint: Path
    result: Optional[TrainResult] = None


def run_dir_for(out_dir: Union[str, Path], seed: int, target_name: str) -> Path:
    return Path(out_dir) / f"seed_{seed}" / target_name


class ExperimentManager:
    """Runs the commands of one experiment config inside its output directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_dir = Path(config.output_dir)
        self._manifest: Optional[DatasetManifest] = None
        self._enc: Optional[EncoderPair] = None

    @property
    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            self._manifest = build_dataset(self.config.dataset)
        return self._manifest

    @property
    def enc(self) -> EncoderPair:
        if self._enc is None:
            self._enc = build_encoders(self.config)
        return self._enc

    def write_config(self) -> Path:
        return self.config.dump(self.out_dir / "config.yaml")

    def train_split(self, split: DomainSplit, seed: int, train_config: Optional[TrainConfig] = None,
                    out_dir: Optional[Path] = None) -> RunRecord:
        train_config = replace(train_config or self.config.train, seed=seed)
        run_dir = run_dir_for(out_dir or self.out_dir, seed, split.target_name)
        logger.info(f"Training seed {seed} with target domain {split.target_name!r} ({len(split.train)} samples)")
        result = train(split.train, train_config, self.enc)
        checkpoint = Checkpoint(
            bank=result.bank,
            latent_model=result.latent_model,
            state=result.state,
            encoder_fingerprint=self.enc.fingerprint(),
            classes=list(self.manifest.classes),
            config={
                "experiment": self.config.to_dict(),
                "train": result.config.to_dict(),
                "seed": seed,
                "split": {"target_domain": split.target_domain, "target_name": split.target_name},
            },
        )
        path = save_checkpoint(checkpoint, run_dir / "checkpoint.json")
        write_jsonl(result.log, run_dir / "train_log.jsonl")
        return RunRecord(seed, split.target_domain, split.target_name, path, result)

    def cmd_train(self, split: Optional[str] = None) -> List[RunRecord]:
        self.write_config()
        if self.config.dataset.get("kind") == "synthetic":
            save_manifest(self.manifest, self.out_dir / "manifest.json")
        records = []
        for seed in self.config.seeds:
            for domain_split in select_splits(self.manifest, split):
                records.append(self.train_split(domain_split, seed))
        write_json(
            {"runs": [{"seed": r.seed, "target_domain": r.target_domain, "target_name": r.target_name,
                       "checkpoint": str(r.checkpoint.relative_to(self.out_dir))} for r in records]},
            self.out_dir / "runs.json",
        )
        return records


def collect_checkpoints(path: Union[str, Path]) -> List[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(path.rglob("checkpoint.json"))
        if found:
            return found
    raise ConfigError(f"no checkpoint found at {path}")


@dataclass
class LoadedRun:
    checkpoint: Checkpoint
    config: ExperimentConfig
    split: DomainSplit
    seed: int
    enc: EncoderPair


def load_run(path: Path) -> LoadedRun:
    """Rebuild the encoders and the split a checkpoint was trained on."""
    checkpoint = load_checkpoint(path)
    echo = checkpoint.config
    if "experiment" not in echo or "split" not in echo:
        raise ConfigError(f"checkpoint {path} carries no experiment echo")
    config = ExperimentConfig.from_dict(echo["experiment"])
    enc = build_encoders(config)
    checkpoint.verify_encoder(enc)
    manifest = build_dataset(config.dataset)
    (domain_split,) = select_splits(manifest, echo["split"]["target_name"])
    return LoadedRun(checkpoint, config, domain_split, int(echo["seed"]), enc)


def predictor_for(run: LoadedRun, mode: str) -> FusionPredictor:
    train_config = TrainConfig(**run.checkpoint.config["train"])
    fusion = effective_fusion(train_config, replace(run.config.fusion, mode=mode))
    ckpt = run.checkpoint
    return FusionPredictor(ckpt.bank, ckpt.state, ckpt.latent_model, run.enc, fusion, train_config.tau_cls)


def evaluate_run(run: LoadedRun, modes: Sequence[str]) -> Dict[str, Any]:
    """Target-domain accuracy per fusion mode plus the zero-shot baseline, and dumps per mode."""
    samples = run.split.test.samples
    accuracies: Dict[str, float] = {}
    dumps: Dict[str, Dict[str, Any]] = {}
    for mode in modes:
        predictor = predictor_for(run, mode)
        rows = predictor.dump_rows(samples)
        accuracies[mode] = accuracy(rows)
        dumps[mode] = {
            "seed": run.seed,
            "target_name": run.split.target_name,
            "fusion_mode": predictor.cfg.mode,
            "num_classes": len(run.checkpoint.classes),
            "num_domains": run.checkpoint.state.num_domains,
            "rows": rows,
        }
    tau_cls = float(run.checkpoint.config["train"]["tau_cls"])
    zero_shot = predict_zero_shot(samples, run.checkpoint.bank, run.enc, tau_cls)
    accuracies["zero_shot"] = float(np.mean(zero_shot == run.split.test.class_ids()))
    return {"accuracy": accuracies, "dumps": dumps}


def aggregate(per_run: List[Dict[str, Any]], keys: Sequence[str]) -> Dict[str, Any]:
    """Mean ± std over seeds per target domain, plus the average over targets."""
    targets = sorted({r["target_name"] for r in per_run})
    table: Dict[str, Any] = {}
    for key in keys:
        by_target = {}
        for target in targets:
            values = [r["accuracy"][key] for r in per_run if r["target_name"] == target and key in r["accuracy"]]
            if values:
                by_target[target] = mean_std(values)
        if not by_target:
            continue
        seeds = sorted({r["seed"] for r in per_run})
        per_seed_average = []
        for seed in seeds:
            values = [r["accuracy"][key] for r in per_run if r["seed"] == seed and key in r["accuracy"]]
            if len(values) == len(by_target):
                per_seed_average.append(float(np.mean(values)))
        table[key] = {"targets": by_target, "average": mean_std(per_seed_average or
                                                               [s["mean"] for s in by_target.values()])}
    return table


def cmd_eval(path: Union[str, Path], out_dir: Union[str, Path], split: Optional[str] = None,
             fusion_mode: Optional[str] = None) -> Dict[str, Any]:
    """Evaluate checkpoints; the requested mode's dumps go to ``out_dir/predictions``."""
    out_dir = Path(out_dir)
    modes = [fusion_mode] if fusion_mode else list(EVAL_FUSION_MODES)
    per_run = []
    for checkpoint_path in collect_checkpoints(path):
        run = load_run(checkpoint_path)
        if split is not None and split not in (run.split.target_name, str(run.split.target_domain)):
            continue
        evaluation = evaluate_run(run, modes)
        record = {"seed": run.seed, "target_name": run.split.target_name, "accuracy": evaluation["accuracy"],
                  "checkpoint": str(checkpoint_path)}
        per_run.append(record)
        for mode, dump in evaluation["dumps"].items():
            write_json(dump, out_dir / "predictions" / f"{run.split.target_name}_seed{run.seed}_{mode}.json")
        logger.info(f"Evaluated {checkpoint_path}: {evaluation['accuracy']}")
    if not per_run:
        raise ConfigError(f"no checkpoint under {path} was trained for split {split!r}")
    report = {
        "fusion_modes": modes,
        "runs": sorted(per_run, key=lambda r: (r["target_name"], r["seed"])),
        "summary": aggregate(per_run, [*modes, "zero_shot"]),
    }
    write_json(report, out_dir / "eval_report.json")
    return report


def cmd_oracle(dump_path: Union[str, Path], out_dir: Union[str, Path], plot: bool = False) -> Dict[str, Any]:
    dump_path = Path(dump_path)
    if not dump_path.exists():
        raise ConfigError(f"prediction dump {dump_path} does not exist")
    dump = PredictionDump.from_document(read_json(dump_path))
    report = bound_report(dump)
    report["source"] = dump_path.name
    out_dir = Path(out_dir)
    stem = dump_path.stem
    write_json(report, out_dir / f"oracle_{stem}.json")
    if plot:
        report["plot"] = str(plot_bound_report(report, out_dir / f"oracle_{stem}.png", title=f"Selection oracle: {stem}"))
    return report


def cmd_ablate(config: ExperimentConfig, split: Optional[str] = None,
               variants: Sequence[str] = ABLATION_VARIANTS) -> Dict[str, Any]:
    """Train each variant per seed and split; fusion-only variants reuse the full run."""
    unknown = sorted(set(variants) - set(ABLATION_VARIANTS))
    if unknown:
        raise ConfigError(f"unknown ablation variant(s) {unknown}")
    manager = ExperimentManager(config)
    manager.write_config()
    out_dir = manager.out_dir / "ablation"
    needs_full = any(v in ("full", "zero_shot", *FUSION_ONLY_VARIANTS) for v in variants)
    trained = [v for v in TRAINING_VARIANTS if v in variants or (v == "full" and needs_full)]
    per_run: List[Dict[str, Any]] = []
    for seed in config.seeds:
        for domain_split in select_splits(manager.manifest, split):
            accuracies: Dict[str, float] = {}
            for variant in trained:
                train_config = replace(config.train, **TRAINING_VARIANTS[variant])
                record = manager.train_split(domain_split, seed, train_config, out_dir / variant)
                run = LoadedRun(load_checkpoint(record.checkpoint, manager.enc), config, domain_split, seed, manager.enc)
                if variant == "full":
                    modes = [config.fusion.mode] + [FUSION_ONLY_VARIANTS[v] for v in FUSION_ONLY_VARIANTS if v in variants]
                    evaluation = evaluate_run(run, modes)
                    accuracies["full"] = evaluation["accuracy"][config.fusion.mode]
                    for name, mode in FUSION_ONLY_VARIANTS.items():
                        if name in variants:
                            accuracies[name] = evaluation["accuracy"][mode]
                    accuracies["zero_shot"] = evaluation["accuracy"]["zero_shot"]
                else:
                    accuracies[variant] = evaluate_run(run, [config.fusion.mode])["accuracy"][config.fusion.mode]
                accuracies[f"{variant}_agreement"] = _training_agreement(record.result, domain_split)
            per_run.append({"seed": seed, "target_name": domain_split.target_name,
                            "accuracy": {k: v for k, v in accuracies.items() if k in variants or k.endswith("agreement")}})
    shown = [v for v in ABLATION_VARIANTS if v in variants]
    report = {
        "variants": shown,
        "runs": per_run,
        "summary": aggregate(per_run, shown + [f"{v}_agreement" for v in trained]),
    }
    write_json(report, out_dir / "ablation_report.json")
    return report


def _training_agreement(result: TrainResult, split: DomainSplit) -> float:
    return best_mapping_agreement(result.state.assignments, split.train.domain_ids())


def cmd_inspect_clusters(path: Union[str, Path], out_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    """Cluster diagnostics of every checkpoint's training split against annotated domains."""
    reports = []
    for checkpoint_path in collect_checkpoints(path):
        run = load_run(checkpoint_path)
        train_samples = run.split.train
        features = run.checkpoint.latent_model.domain_features(run.enc.encode_images(train_samples.samples))
        state = run.checkpoint.state
        if len(state.assignments) != len(train_samples):
            raise InvalidInputError(
                f"checkpoint {checkpoint_path} holds {len(state.assignments)} assignments for "
                f"{len(train_samples)} training samples"
            )
        report = cluster_report(state, train_samples.class_ids(), train_samples.domain_ids())
        # Share of samples whose nearest centroid still matches the stored label.
        consistency = float(np.mean(assign_latent_domains(state, features) == state.assignments))
        report.update({"seed": run.seed, "target_name": run.split.target_name,
                       "assignment_consistency": consistency, "checkpoint": str(checkpoint_path)})
        reports.append(report)
    write_json({"clusters": reports}, Path(out_dir) / "clusters_report.json")
    return reports
