"""Inference-time prompt fusion and classification."""
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from core import (
    ConfigError,
    DEGENERATE_NORM,
    DegenerateVectorError,
    InvalidInputError,
    SimplexWeights,
    Temperature,
    cosine_similarity,
    temperature_softmax,
    validate_simplex,
    validate_temperature,
)
from encoders import EncoderPair
from latent_domain import LatentDomainModel, LatentDomainState
from prompts import PromptBank, PromptMode, TextFeatureTable, classify, compute_text_features, zero_shot_text_features

FUSION_MODES = ("similarity", "greedy", "average")


@dataclass
class FusionConfig:
    tau_fusion: Temperature = 0.1
    mode: str = "similarity"

    def validate(self, num_domains: Optional[int] = None) -> "FusionConfig":
        try:
            validate_temperature(self.tau_fusion)
        except InvalidInputError as e:
            raise ConfigError(f"fusion.tau_fusion: {e}") from e
        if self.mode in FUSION_MODES:
            return self
        if not self.mode.startswith("single:"):
            raise ConfigError(
                f"fusion.mode must be one of {FUSION_MODES} or 'single:<s>', got {self.mode!r}"
            )
        index = self.single_domain
        if index < 0 or (num_domains is not None and index >= num_domains):
            raise ConfigError(f"fusion.mode {self.mode!r} needs 0 <= s < {num_domains}")
        return self

    @property
    def single_domain(self) -> int:
        try:
            return int(self.mode.split(":", 1)[1])
        except (IndexError, ValueError) as e:
            raise ConfigError(f"fusion.mode {self.mode!r} must look like 'single:<s>'") from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def fusion_weights(domain_feature: torch.Tensor, state: LatentDomainState, cfg: FusionConfig) -> SimplexWeights:
    """alpha over latent domains for one domain feature (Dd,) or a batch (B, Dd)."""
    centroids = torch.as_tensor(state.centroids, dtype=domain_feature.dtype)
    if domain_feature.shape[-1] != centroids.shape[-1]:
        raise InvalidInputError(
            f"domain feature dim {domain_feature.shape[-1]} does not match centroid dim {centroids.shape[-1]}"
        )
    if bool((domain_feature.norm(dim=-1) <= DEGENERATE_NORM).any()):
        raise DegenerateVectorError("degenerate feature vector: domain feature is zero")
    num_domains = state.num_domains
    leading = domain_feature.shape[:-1]
    if cfg.mode == "average":
        return torch.full((*leading, num_domains), 1.0 / num_domains, dtype=domain_feature.dtype)
    if cfg.mode.startswith("single:"):
        cfg.validate(num_domains)
        alpha = torch.zeros((*leading, num_domains), dtype=domain_feature.dtype)
        alpha[..., cfg.single_domain] = 1.0
        return alpha
    cosines = cosine_similarity(domain_feature.unsqueeze(-2), centroids)
    if cfg.mode == "greedy":
        # argmax returns the first maximum: ties go to the lowest index
        best = cosines.argmax(dim=-1)
        return torch.nn.functional.one_hot(best, num_domains).to(domain_feature.dtype)
    if cfg.mode == "similarity":
        return temperature_softmax(cosines, cfg.tau_fusion)
    raise ConfigError(f"unknown fusion mode {cfg.mode!r}")


def fuse_text_features(table: TextFeatureTable, alpha: SimplexWeights) -> torch.Tensor:
    """f~_k = sum_s alpha_s f_k^s; (K, D) for one alpha, (B, K, D) for a batch."""
    if alpha.shape[-1] != table.num_domains:
        raise InvalidInputError(f"alpha has {alpha.shape[-1]} weights for {table.num_domains} latent domains")
    validate_simplex(alpha)
    fused = torch.einsum("...s,skd->...kd", alpha.to(table.features.dtype), table.features)
    if bool((fused.norm(dim=-1) <= DEGENERATE_NORM).any()):
        raise DegenerateVectorError("degenerate fusion: a fused class feature is the zero vector")
    return fused


@dataclass
class Prediction:
    probabilities: torch.Tensor
    alpha: torch.Tensor
    predicted_class: int


class FusionPredictor:
    """Trained artifacts bundled for inference; text features are encoded once."""

    def __init__(
        self,
        bank: PromptBank,
        state: LatentDomainState,
        latent_model: LatentDomainModel,
        enc: EncoderPair,
        cfg: FusionConfig,
        tau_cls: Temperature = 0.01,
    ):
        cfg.validate(state.num_domains)
        if bank.num_domains != state.num_domains:
            raise InvalidInputError(
                f"prompt bank has {bank.num_domains} latent domains but state has {state.num_domains}"
            )
        self.bank = bank
        self.state = state
        self.latent_model = latent_model
        self.enc = enc
        self.cfg = cfg
        self.tau_cls = validate_temperature(tau_cls)
        with torch.no_grad():
            self.table = compute_text_features(bank, enc, PromptMode.FULL)

    def predict_features(self, image_features: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Batch pipeline f(x) -> e(f(x)) -> alpha -> f~ -> P."""
        with torch.no_grad():
            domain_features = self.latent_model.embed(image_features.to(torch.float32)).double()
            alpha = fusion_weights(domain_features, self.state, self.cfg).float()
            fused = fuse_text_features(self.table, alpha)
            probabilities = classify(image_features, fused, self.tau_cls)
            per_domain = torch.stack(
                [classify(image_features, self.table.domain(s), self.tau_cls) for s in range(self.table.num_domains)],
                dim=1,
            )
        return {
            "alpha": alpha,
            "probabilities": probabilities,
            "predicted": probabilities.argmax(dim=-1),
            "per_domain_predicted": per_domain.argmax(dim=-1),
        }

    def predict(self, image: Any) -> Prediction:
        image_feature = self.enc.encode_images([image])
        out = self.predict_features(image_feature)
        return Prediction(out["probabilities"][0], out["alpha"][0], int(out["predicted"][0]))

    def dump_rows(self, samples: Sequence[Any]) -> List[Dict[str, Any]]:
        """Prediction dump rows in sample order."""
        if len(samples) == 0:
            return []
        out = self.predict_features(self.enc.encode_images(samples))
        rows = []
        for index, sample in enumerate(samples):
            rows.append(
                {
                    "sample_id": str(sample.sample_id),
                    "true_class": int(sample.class_id),
                    "alpha": [float(a) for a in out["alpha"][index]],
                    "per_domain_predicted_class": [int(c) for c in out["per_domain_predicted"][index]],
                    "fused_probabilities": [float(p) for p in out["probabilities"][index]],
                    "fused_predicted_class": int(out["predicted"][index]),
                }
            )
        return rows


def predict(
    image: Any,
    bank: PromptBank,
    state: LatentDomainState,
    latent_model: LatentDomainModel,
    enc: EncoderPair,
    cfg: FusionConfig,
    tau_cls: Temperature = 0.01,
) -> Prediction:
    """Class probabilities, fusion weights and predicted class (ties to the lowest index)."""
    return FusionPredictor(bank, state, latent_model, enc, cfg, tau_cls).predict(image)


def predict_zero_shot(samples: Sequence[Any], bank: PromptBank, enc: EncoderPair, tau_cls: Temperature = 0.01) -> np.ndarray:
    """Predicted classes with class tokens alone."""
    if len(samples) == 0:
        return np.array([], dtype=np.int64)
    table = zero_shot_text_features(bank, enc)
    with torch.no_grad():
        probabilities = classify(enc.encode_images(samples), table.domain(0), tau_cls)
    return probabilities.argmax(dim=-1).numpy()


def accuracy(rows: Sequence[Dict[str, Any]]) -> float:
    if not rows:
        raise InvalidInputError("accuracy needs at least one prediction")
    return float(np.mean([row["fused_predicted_class"] == row["true_class"] for row in rows]))


def fused_norm_bound_holds(fused: torch.Tensor, atol: float = 1e-6) -> bool:
    """Convex combinations of unit vectors stay inside the unit ball."""
    return bool((fused.norm(dim=-1) <= 1.0 + atol).all())
