"""Two-stage prompt training with adversarial latent domain learning."""
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from sklearn.metrics import mutual_info_score

from core import (
    ConfigError,
    DatasetError,
    InvalidInputError,
    TrainingDivergedError,
    allow_domain_access,
    cosine_similarity,
    numpy_generator,
    parameter_checksum,
    torch_generator,
)
from encoders import EncoderPair
from latent_domain import (
    LatentDomainModel,
    LatentDomainState,
    adversarial_loss,
    centroids_from_assignments,
    gradient_reversal,
    recluster,
)
from prompts import PromptBank, PromptMode, compute_text_features

FUSION_MODES = ("similarity", "greedy", "average", "single")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    aux_learning_rate: float = 0.05
    extractor_learning_rate: float = 0.005
    extractor_grad_clip: float = 1.0
    m1: int = 4
    m2: int = 8
    num_domains: int = 3
    tau_cls: float = 0.01
    seed: int = 0
    val_fraction: float = 0.0
    no_dap: bool = False
    no_dsp: bool = False
    no_adv: bool = False
    no_clustering: bool = False
    fusion_mode: str = "similarity"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if min(self.learning_rate, self.aux_learning_rate, self.extractor_learning_rate) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.extractor_grad_clip <= 0:
            raise ConfigError("train.extractor_grad_clip must be > 0")
        if self.m1 < 0 or self.m2 < 0:
            raise ConfigError("prompt lengths m1, m2 must be >= 0")
        if self.num_domains < 1:
            raise ConfigError("train.num_domains must be >= 1")
        if self.tau_cls <= 0:
            raise ConfigError("train.tau_cls must be > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        if self.fusion_mode.split(":")[0] not in FUSION_MODES:
            raise ConfigError(f"train.fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        return self

    def effective(self) -> "TrainConfig":
        """Resolve ablation switches into concrete lengths and fusion mode."""
        self.validate()
        resolved = replace(self)
        if self.no_dsp:
            # One shared learned prompt: nothing domain-specific to fuse.
            resolved = replace(resolved, m2=0, fusion_mode="single:0")
        if self.no_dap:
            resolved = replace(resolved, m1=0)
        return resolved

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def lambda_schedule(p: float) -> float:
    """lambda = 2 / (1 + exp(-10 p)) - 1."""
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


@dataclass
class TrainProgress:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidInputError(f"training progress must lie in [0, 1], got {self.p}")

    @property
    def lam(self) -> float:
        return lambda_schedule(self.p)


@dataclass
class TrainingBatch:
    """Frozen image features with class labels; ``indices`` point into the latent state."""
    image_features: torch.Tensor
    class_labels: torch.Tensor
    indices: torch.Tensor

    def __len__(self) -> int:
        return int(self.class_labels.shape[0])


def _latent_labels(batch: TrainingBatch, state: Optional[LatentDomainState]) -> torch.Tensor:
    if state is None:
        raise InvalidInputError("every sample needs a latent domain assignment; no state given")
    indices = batch.indices.numpy()
    if indices.size and (indices.min() < 0 or indices.max() >= len(state.assignments)):
        raise InvalidInputError("batch contains samples without a latent domain assignment")
    labels = state.assignments[indices]
    if labels.size and (labels.min() < 0 or labels.max() >= state.num_domains):
        raise InvalidInputError("batch contains unassigned samples")
    return torch.as_tensor(labels, dtype=torch.long)


def _domain_logits(batch: TrainingBatch, table_features: torch.Tensor, latent: torch.Tensor, tau: float) -> torch.Tensor:
    class_features = table_features[latent]
    return cosine_similarity(batch.image_features.unsqueeze(1), class_features) / tau


def dsp_loss_and_logits(
    batch: TrainingBatch,
    bank: PromptBank,
    state: LatentDomainState,
    enc: EncoderPair,
    tau: float = 0.01,
) -> Tuple[torch.Tensor, torch.Tensor]:
    latent = _latent_labels(batch, state)
    table = compute_text_features(bank, enc, PromptMode.DSP_ONLY)
    logits = _domain_logits(batch, table.features, latent, tau)
    return F.cross_entropy(logits, batch.class_labels, reduction="sum") / len(batch), logits


def loss_dsp(
    batch: TrainingBatch,
    bank: PromptBank,
    state: LatentDomainState,
    enc: EncoderPair,
    tau: float = 0.01,
) -> torch.Tensor:
    """Cross-entropy of each sample against its own latent domain's dsp-only prompts,
    summed over all samples and divided by the total count."""
    return dsp_loss_and_logits(batch, bank, state, enc, tau)[0]


def loss_dap(
    batch: TrainingBatch,
    bank: PromptBank,
    state: LatentDomainState,
    enc: EncoderPair,
    tau: float = 0.01,
) -> torch.Tensor:
    """Cross-entropy with full prompts; specific tokens are detached so only [v] learns."""
    latent = _latent_labels(batch, state)
    table = compute_text_features(bank, enc, PromptMode.FULL, detach_specific=True)
    logits = _domain_logits(batch, table.features, latent, tau)
    return F.cross_entropy(logits, batch.class_labels, reduction="sum") / len(batch)


@dataclass
class LossBreakdown:
    """``objective`` carries the backward contract; ``value`` is the logged total."""
    objective: torch.Tensor
    value: float
    l_dsp: float
    l_dap: float
    l_adv: Optional[float]
    lam: float


def combined_loss_value(l_dsp: float, l_dap: Optional[float], l_adv: Optional[float], lam: float) -> float:
    """Scalar L_dsp + lambda (L_dap - L_adv); a missing term counts as zero."""
    return l_dsp + lam * ((l_dap or 0.0) - (l_adv or 0.0))


def adversarial_objective(batch: TrainingBatch, latent_model: LatentDomainModel, lam: float) -> torch.Tensor:
    """L_adv with the unit-norm domain features routed through the gradient reversal
    layer: the classifier descends it while the extractor ascends lam * L_adv."""
    domain_features = latent_model.embed(batch.image_features)
    return adversarial_loss(latent_model.aux, gradient_reversal(domain_features, lam), batch.class_labels)


def total_loss(
    batch: TrainingBatch,
    bank: PromptBank,
    state: LatentDomainState,
    enc: EncoderPair,
    progress: TrainProgress,
    latent_model: Optional[LatentDomainModel] = None,
    tau: float = 0.01,
    no_adv: bool = False,
) -> LossBreakdown:
    """L = L_dsp + lambda (L_dap - L_adv).

    Backward through ``objective`` gives prompts grad(L_dsp) + lambda grad(L_dap),
    the auxiliary classifier +grad(L_adv) and the extractor -lambda grad(L_adv).
    """
    lam = progress.lam
    dsp = loss_dsp(batch, bank, state, enc, tau)
    dap = loss_dap(batch, bank, state, enc, tau)
    objective = dsp + lam * dap
    adv_value: Optional[float] = None
    if not no_adv:
        if latent_model is None:
            raise InvalidInputError("the adversarial term needs a latent domain model")
        adv = adversarial_objective(batch, latent_model, lam)
        objective = objective + adv
        adv_value = float(adv.detach())
    value = combined_loss_value(float(dsp.detach()), float(dap.detach()), adv_value, lam)
    return LossBreakdown(objective, value, float(dsp.detach()), float(dap.detach()), adv_value, lam)


@dataclass
class TrainResult:
    bank: PromptBank
    state: LatentDomainState
    latent_model: LatentDomainModel
    log: List[Dict[str, Any]] = field(default_factory=list)
    config: Optional[TrainConfig] = None


def _lr_factor(epoch: int, config: TrainConfig) -> float:
    if epoch < config.warmup_epochs:
        return config.warmup_lr / config.learning_rate
    return 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, config.epochs)))


def _make_optimizer(params, lr: float, config: TrainConfig):
    params = [p for p in params if p.numel() > 0]
    if not params:
        return None, None
    optimizer = torch.optim.SGD(params, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda epoch: _lr_factor(epoch, config))
    return optimizer, scheduler


def _batches(indices: np.ndarray, batch_size: int, seed: int, *path) -> List[np.ndarray]:
    order = torch.randperm(len(indices), generator=torch_generator(seed, "batches", *path)).numpy()
    shuffled = indices[order]
    return [shuffled[i: i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _check_finite(name: str, value: torch.Tensor, epoch: int) -> None:
    if not bool(torch.isfinite(value).all()):
        logger.error(f"{name} became non-finite at epoch {epoch}; aborting")
        raise TrainingDivergedError(f"{name} is not finite at epoch {epoch}")


def _split_validation(labels: np.ndarray, fraction: float, seed: int):
    """Deterministic per-class hold-out."""
    all_indices = np.arange(len(labels))
    if fraction <= 0:
        return all_indices, np.array([], dtype=np.int64)
    rng = numpy_generator(seed, "validation-split")
    held_out = []
    for class_id in np.unique(labels):
        members = all_indices[labels == class_id]
        count = int(round(fraction * len(members)))
        if count:
            held_out.extend(rng.permutation(members)[:count].tolist())
    held = np.array(sorted(held_out), dtype=np.int64)
    return np.setdiff1d(all_indices, held), held


class Trainer:
    """Runs ``train``: one instance per training run."""

    def __init__(self, samples: Sequence[Any], class_names: Sequence[str], config: TrainConfig, enc: EncoderPair):
        self.config = config.effective()
        self.enc = enc
        self.samples = list(samples)
        self.class_names = list(class_names)
        self._validate_dataset()

        cfg = self.config
        logger.info(f"Encoding {len(self.samples)} training images with the frozen image encoder")
        self.image_features = enc.encode_images(self.samples).detach()
        self.class_labels = torch.as_tensor([s.class_id for s in self.samples], dtype=torch.long)
        self.train_idx, self.val_idx = _split_validation(self.class_labels.numpy(), cfg.val_fraction, cfg.seed)

        self.annotations: Optional[np.ndarray] = None
        num_domains = cfg.num_domains
        if cfg.no_clustering:
            with allow_domain_access("no_clustering ablation"):
                raw = [s.annotated_domain_id for s in self.samples]
            if any(d is None for d in raw):
                raise DatasetError("the no_clustering ablation needs annotated domains on every sample")
            _, self.annotations = np.unique(np.asarray(raw), return_inverse=True)
            num_domains = int(self.annotations.max()) + 1
            logger.info(f"no_clustering: using {num_domains} annotated domains as latent domains")
        self.num_domains = num_domains

        self.bank = PromptBank(
            num_domains,
            enc.class_tokens(self.class_names),
            enc.embed_dim,
            m1=cfg.m1,
            m2=cfg.m2,
            max_context_length=enc.prompt_capacity,
            seed=cfg.seed,
        )
        self.latent_model = LatentDomainModel(enc.image_dim, len(self.class_names), seed=cfg.seed)
        self.state: Optional[LatentDomainState] = None

        self.specific_opt, self.specific_sched = (None, None)
        if not cfg.no_dsp:
            self.specific_opt, self.specific_sched = _make_optimizer(self.bank.specific_parameters(), cfg.learning_rate, cfg)
        self.agnostic_opt, self.agnostic_sched = (None, None)
        if not cfg.no_dap:
            self.agnostic_opt, self.agnostic_sched = _make_optimizer(self.bank.agnostic_parameters(), cfg.learning_rate, cfg)
        # The classifier learns faster than the extractor it plays against.
        self.aux_opt, self.aux_sched = (None, None)
        self.extractor_opt, self.extractor_sched = (None, None)
        if not cfg.no_adv:
            self.aux_opt, self.aux_sched = _make_optimizer(self.latent_model.aux.parameters(), cfg.aux_learning_rate, cfg)
            self.extractor_opt, self.extractor_sched = _make_optimizer(
                self.latent_model.extractor.parameters(), cfg.extractor_learning_rate, cfg
            )

    def _validate_dataset(self) -> None:
        num_domains = self.config.num_domains
        if len(self.samples) < num_domains:
            raise DatasetError(f"need at least {num_domains} training samples, got {len(self.samples)}")
        if len({s.class_id for s in self.samples}) < 2:
            raise DatasetError("need at least two classes in the training data")

    def _batch(self, indices: np.ndarray) -> TrainingBatch:
        index = torch.as_tensor(indices, dtype=torch.long)
        return TrainingBatch(self.image_features[index], self.class_labels[index], index)

    def _cluster(self) -> LatentDomainState:
        features = self.latent_model.domain_features(self.image_features)
        if self.annotations is not None:
            centroids = centroids_from_assignments(features, self.annotations, self.num_domains)
            inertia = float(((features - centroids[self.annotations]) ** 2).sum())
            round_index = 0 if self.state is None else self.state.round + 1
            return LatentDomainState(centroids, self.annotations.copy(), round_index, inertia)
        return recluster(features, self.num_domains, self.config.seed, self.state)

    def _stage_one(self, epoch: int, lam: float) -> Dict[str, float]:
        cfg = self.config
        adversarial = self.aux_opt is not None
        optimizers = [opt for opt in (self.specific_opt, self.aux_opt, self.extractor_opt) if opt is not None]
        dsp_sum, adv_sum, correct, seen = 0.0, 0.0, 0, 0
        for indices in _batches(self.train_idx, cfg.batch_size, cfg.seed, epoch, "stage1"):
            batch = self._batch(indices)
            for optimizer in optimizers:
                optimizer.zero_grad(set_to_none=True)
            dsp, logits = dsp_loss_and_logits(batch, self.bank, self.state, self.enc, cfg.tau_cls)
            _check_finite("L_dsp", dsp, epoch)
            objective = dsp if self.specific_opt is not None else dsp.detach()
            if adversarial:
                adv = adversarial_objective(batch, self.latent_model, lam)
                _check_finite("L_adv", adv, epoch)
                adv_sum += float(adv.detach()) * len(batch)
                objective = objective + adv
            if objective.requires_grad:
                objective.backward()
            if adversarial:
                torch.nn.utils.clip_grad_norm_(self.latent_model.extractor.parameters(), cfg.extractor_grad_clip)
            for optimizer in optimizers:
                optimizer.step()
            dsp_sum += float(dsp.detach()) * len(batch)
            correct += int((logits.detach().argmax(dim=1) == batch.class_labels).sum())
            seen += len(batch)
        return {
            "L_dsp": dsp_sum / seen,
            "L_adv": adv_sum / seen if adversarial else None,
            "train_accuracy": correct / seen,
        }

    def _stage_two(self, epoch: int, lam: float) -> Optional[float]:
        if self.agnostic_opt is None:
            return None
        cfg = self.config
        dap_sum, seen = 0.0, 0
        for indices in _batches(self.train_idx, cfg.batch_size, cfg.seed, epoch, "stage2"):
            batch = self._batch(indices)
            self.agnostic_opt.zero_grad(set_to_none=True)
            dap = loss_dap(batch, self.bank, self.state, self.enc, cfg.tau_cls)
            _check_finite("L_dap", dap, epoch)
            (lam * dap).backward()
            self.agnostic_opt.step()
            dap_sum += float(dap.detach()) * len(batch)
            seen += len(batch)
        return dap_sum / seen

    def _validation_accuracy(self) -> Optional[float]:
        if len(self.val_idx) == 0:
            return None
        features = self.latent_model.domain_features(self.image_features[torch.as_tensor(self.val_idx)])
        latent = torch.as_tensor(
            ((features[:, None, :] - self.state.centroids[None]) ** 2).sum(axis=2).argmin(axis=1),
            dtype=torch.long,
        )
        with torch.no_grad():
            table = compute_text_features(self.bank, self.enc, PromptMode.FULL)
            batch = self._batch(self.val_idx)
            logits = _domain_logits(batch, table.features, latent, self.config.tau_cls)
        return float((logits.argmax(dim=1) == batch.class_labels).float().mean())

    def _step_schedulers(self) -> None:
        for scheduler in (self.specific_sched, self.agnostic_sched, self.aux_sched, self.extractor_sched):
            if scheduler is not None:
                scheduler.step()

    def run(self) -> TrainResult:
        cfg = self.config
        encoder_checksum = parameter_checksum(self.enc)
        log: List[Dict[str, Any]] = []
        for epoch in range(cfg.epochs):
            lam = TrainProgress(epoch / cfg.epochs).lam
            self.state = self._cluster()
            self.latent_model.train()
            stage_one = self._stage_one(epoch, lam)
            l_dap = self._stage_two(epoch, lam)
            self._step_schedulers()

            record: Dict[str, Any] = {
                "epoch": epoch,
                "L_dsp": stage_one["L_dsp"],
                "L_dap": l_dap,
                "L_adv": stage_one["L_adv"],
                "lambda": lam,
                "total": combined_loss_value(stage_one["L_dsp"], l_dap, stage_one["L_adv"], lam),
                "inertia": self.state.inertia,
                "cluster_sizes": self.state.cluster_sizes(),
                "class_mutual_information": float(
                    mutual_info_score(self.class_labels.numpy(), self.state.assignments)
                ),
                "train_accuracy": stage_one["train_accuracy"],
            }
            val_accuracy = self._validation_accuracy()
            if val_accuracy is not None:
                record["val_accuracy"] = val_accuracy
            log.append(record)
            logger.info(
                f"epoch {epoch + 1}/{cfg.epochs} L_dsp={record['L_dsp']:.4f} "
                f"L_dap={record['L_dap'] if l_dap is None else round(l_dap, 4)} "
                f"L_adv={record['L_adv'] if record['L_adv'] is None else round(record['L_adv'], 4)} "
                f"lambda={lam:.4f} sizes={record['cluster_sizes']} acc={record['train_accuracy']:.3f}"
            )

        # Final full pass so centroids reflect the trained extractor.
        self.latent_model.eval()
        self.state = self._cluster()
        if parameter_checksum(self.enc) != encoder_checksum:
            raise RuntimeError("encoder parameters changed during training")
        return TrainResult(self.bank, self.state, self.latent_model, log, cfg)


def train(dataset, config: TrainConfig, enc: EncoderPair) -> TrainResult:
    """Train prompts and the latent domain model on a training split manifest."""
    return Trainer(dataset.samples, dataset.classes, config, enc).run()
