"""Checkpoint persistence: prompts, latent domain model and state as stable JSON."""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch
from loguru import logger

from core import CheckpointError
from encoders import EncoderPair
from latent_domain import LatentDomainModel, LatentDomainState
from prompts import PromptBank

FORMAT_VERSION = 1


def _tensor_to_doc(tensor: torch.Tensor) -> Dict[str, Any]:
    data = tensor.detach().cpu()
    return {
        "dtype": str(data.dtype).replace("torch.", ""),
        "shape": list(data.shape),
        "data": [float(v) for v in data.reshape(-1).tolist()],
    }


def _tensor_from_doc(doc: Dict[str, Any], where: str) -> torch.Tensor:
    try:
        dtype = getattr(torch, doc["dtype"])
        return torch.tensor(doc["data"], dtype=dtype).reshape(doc["shape"])
    except (KeyError, AttributeError, RuntimeError, TypeError) as e:
        raise CheckpointError(f"checkpoint field {where} is not a valid tensor: {e}") from e


def _state_dict_doc(module: torch.nn.Module) -> Dict[str, Any]:
    return {name: _tensor_to_doc(tensor) for name, tensor in module.state_dict().items()}


@dataclass
class Checkpoint:
    bank: PromptBank
    latent_model: LatentDomainModel
    state: LatentDomainState
    encoder_fingerprint: Dict[str, Any]
    classes: List[str]
    config: Dict[str, Any] = field(default_factory=dict)

    def to_document(self) -> Dict[str, Any]:
        bank = self.bank
        extractor = self.latent_model.extractor
        return {
            "format_version": FORMAT_VERSION,
            "encoder_fingerprint": self.encoder_fingerprint,
            "classes": list(self.classes),
            "config": self.config,
            "prompts": {
                "m1": bank.m1,
                "m2": bank.m2,
                "embed_dim": bank.embed_dim,
                "num_domains": bank.num_domains,
                "num_classes": bank.num_classes,
                "max_context_length": bank.max_context_length,
                "seed": bank.seed,
                "tensors": _state_dict_doc(bank),
            },
            "latent_domain": {
                "image_dim": extractor.input_dim,
                "hidden_dim": extractor.hidden_dim,
                "domain_dim": extractor.output_dim,
                "num_classes": self.latent_model.aux.num_classes,
                "tensors": _state_dict_doc(self.latent_model),
                "centroids": _tensor_to_doc(torch.from_numpy(np.asarray(self.state.centroids, dtype=np.float64))),
                "assignments": [int(a) for a in self.state.assignments],
                "round": int(self.state.round),
                "inertia": float(self.state.inertia),
            },
        }

    @classmethod
    def from_document(cls, document: Dict[str, Any]) -> "Checkpoint":
        version = document.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
        try:
            prompts = document["prompts"]
            latent = document["latent_domain"]
            tensors = prompts["tensors"]
            class_tokens = [
                _tensor_from_doc(tensors[f"class_tokens_{k}"], f"prompts.class_tokens_{k}")
                for k in range(prompts["num_classes"])
            ]
            bank = PromptBank(
                prompts["num_domains"],
                class_tokens,
                prompts["embed_dim"],
                m1=prompts["m1"],
                m2=prompts["m2"],
                max_context_length=prompts["max_context_length"],
                seed=prompts["seed"],
            )
            bank.load_state_dict({name: _tensor_from_doc(doc, f"prompts.{name}") for name, doc in tensors.items()})
            model = LatentDomainModel(
                latent["image_dim"], latent["num_classes"], latent["hidden_dim"], latent["domain_dim"]
            )
            model.load_state_dict(
                {name: _tensor_from_doc(doc, f"latent_domain.{name}") for name, doc in latent["tensors"].items()}
            )
            state = LatentDomainState(
                _tensor_from_doc(latent["centroids"], "latent_domain.centroids").numpy(),
                np.asarray(latent["assignments"], dtype=np.int64),
                int(latent["round"]),
                float(latent["inertia"]),
            )
            return cls(bank, model, state, document["encoder_fingerprint"], list(document["classes"]),
                       dict(document.get("config") or {}))
        except KeyError as e:
            raise CheckpointError(f"checkpoint is missing field {e}") from e
        except RuntimeError as e:
            # load_state_dict reports missing/unexpected keys and shape mismatches
            raise CheckpointError(f"checkpoint tensors do not match the model layout: {e}") from e

    def verify_encoder(self, enc: EncoderPair) -> None:
        running = enc.fingerprint()
        if running != self.encoder_fingerprint:
            differing = sorted(k for k in set(running) | set(self.encoder_fingerprint)
                               if running.get(k) != self.encoder_fingerprint.get(k))
            raise CheckpointError(f"encoder fingerprint mismatch in {differing}; checkpoint was trained on other encoders")
        if self.bank.max_context_length > enc.prompt_capacity:
            raise CheckpointError(
                f"checkpoint prompts allow {self.bank.max_context_length} tokens but the encoder "
                f"takes at most {enc.prompt_capacity}"
            )


def dumps_checkpoint(checkpoint: Checkpoint) -> str:
    return json.dumps(checkpoint.to_document(), sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(checkpoint), encoding="utf-8")
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path: Union[str, Path], enc: Optional[EncoderPair] = None) -> Checkpoint:
    """Read a checkpoint; with ``enc`` given, a fingerprint mismatch is an error."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}") from e
    checkpoint = Checkpoint.from_document(document)
    if enc is not None:
        checkpoint.verify_encoder(enc)
    logger.debug(f"Loaded checkpoint {path} ({checkpoint.bank.num_domains} latent domains)")
    return checkpoint
