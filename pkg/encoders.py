"""Frozen image/text encoder pairs: the seeded toy pair and the CLIP adapter."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from loguru import logger
from torch import nn

from core import (
    InvalidInputError,
    MissingWeightsError,
    l2_normalize,
    parameter_checksum,
    read_guarded_domain,
    torch_generator,
)

DEFAULT_MAX_CONTEXT_LENGTH = 77
# Length of the shared text offset an anchored toy pair carries.
ANCHOR_SHIFT = 5.0


@dataclass
class BackboneConfig:
    """Backbone descriptor from the ``backbone`` config section."""
    kind: str = "toy"
    weights_path: Optional[str] = None
    model_name: str = "ViT-B-16"
    image_dim: int = 32
    embed_dim: int = 16
    payload_dim: int = 16
    max_context_length: int = DEFAULT_MAX_CONTEXT_LENGTH
    seed: int = 0
    # Only read by the external adapter; the toy pair has no preprocessing.
    preprocessing: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "BackboneConfig":
        if self.kind not in ("toy", "external"):
            raise InvalidInputError(f"backbone.kind must be 'toy' or 'external', got {self.kind!r}")
        for name in ("image_dim", "embed_dim", "payload_dim", "max_context_length"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"backbone.{name} must be >= 1")
        return self


@dataclass
class ToyImage:
    """Desk-scale stand-in for an image: a raw feature payload plus labels.

    ``true_style_id`` is generator ground truth and sits behind the
    annotated-domain guard.
    """
    sample_id: str
    payload: np.ndarray
    class_id: int
    _true_style_id: Optional[int] = field(default=None, repr=False)

    @property
    def true_style_id(self) -> Optional[int]:
        return read_guarded_domain(self._true_style_id)

    @property
    def annotated_domain_id(self) -> Optional[int]:
        return read_guarded_domain(self._true_style_id)


@dataclass
class TokenSequence:
    """Prompt token stream: ``tokens`` is (length, E)."""
    tokens: torch.Tensor
    class_token_count: int = 1

    def __len__(self) -> int:
        return int(self.tokens.shape[-2])


class EncoderPair(nn.Module):
    """Frozen image encoder f(.) and text encoder sharing a D-dim space."""

    kind = "abstract"
    # Context positions the text encoder reserves around a prompt.
    framing_tokens = 0

    def __init__(self, image_dim: int, embed_dim: int, max_context_length: int):
        super().__init__()
        self.image_dim = image_dim
        self.text_dim = image_dim
        self.embed_dim = embed_dim
        self.max_context_length = max_context_length
        self.frozen = True

    @property
    def prompt_capacity(self) -> int:
        """Longest token stream encode_text accepts."""
        return self.max_context_length - self.framing_tokens

    def freeze(self) -> "EncoderPair":
        for param in self.parameters():
            param.requires_grad_(False)
        super().train(False)
        return self

    def train(self, mode: bool = True) -> "EncoderPair":
        # Frozen contract: never switch to training mode.
        return super().train(False)

    def encode_images(self, images: Sequence[Any]) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def class_tokens(self, class_names: Sequence[str]) -> List[torch.Tensor]:
        raise NotImplementedError

    def fingerprint(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "image_dim": self.image_dim,
            "text_dim": self.text_dim,
            "embed_dim": self.embed_dim,
            "checksum": parameter_checksum(self),
        }


def toy_image_encode(payload: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """normalize(tanh(W x + b)) for one payload or a batch of payloads."""
    if payload.shape[-1] != weight.shape[1]:
        raise InvalidInputError(
            f"payload dimension {payload.shape[-1]} does not match encoder input {weight.shape[1]}"
        )
    return l2_normalize(torch.tanh(payload @ weight.T + bias))


def toy_text_encode(
    tokens: torch.Tensor,
    position_weights: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
) -> torch.Tensor:
    """Position-weighted sum of token embeddings through a fixed affine map, normalized.

    ``tokens`` is (..., L, E); gradients flow back to the token embeddings.
    """
    length = tokens.shape[-2]
    if length < 1:
        raise InvalidInputError("token sequence must contain at least one token")
    if length > position_weights.shape[0]:
        raise InvalidInputError(
            f"token sequence of length {length} exceeds max context length {position_weights.shape[0]}"
        )
    pooled = (tokens * position_weights[:length, None]).sum(dim=-2)
    return l2_normalize(pooled @ weight.T + bias)


class ToyEncoderPair(EncoderPair):
    """Seeded projection encoders for desk-scale experiments.

    With ``class_anchors`` (payload-space class concepts) the text side is
    built "pretrained": the first K columns of the text projection are the
    image features of the anchors, and class k's token selects column k,
    so an unprompted class token already points at its class's images.
    The text bias then carries ``anchor_shift`` along the first two
    columns' difference, so unprompted tokens confuse classes 0 and 1.
    """

    kind = "toy"

    def __init__(
        self,
        seed: int = 0,
        payload_dim: int = 16,
        image_dim: int = 32,
        embed_dim: int = 16,
        max_context_length: int = DEFAULT_MAX_CONTEXT_LENGTH,
        class_anchors: Optional[np.ndarray] = None,
        anchor_shift: float = ANCHOR_SHIFT,
    ):
        super().__init__(image_dim, embed_dim, max_context_length)
        self.payload_dim = payload_dim
        self.seed = seed
        gen = torch_generator(seed, "toy-encoder")
        image_weight = torch.randn(image_dim, payload_dim, generator=gen) / payload_dim ** 0.5
        image_bias = 0.1 * torch.randn(image_dim, generator=gen)
        text_weight = torch.randn(image_dim, embed_dim, generator=gen) / embed_dim ** 0.5
        text_bias = 0.01 * torch.randn(image_dim, generator=gen)
        position_weights = 1.0 + torch.arange(max_context_length, dtype=torch.float32) / max_context_length

        self.register_buffer("image_weight", image_weight)
        self.register_buffer("image_bias", image_bias)
        self.register_buffer("position_weights", position_weights)
        self.has_anchors = class_anchors is not None
        if class_anchors is not None:
            anchors = torch.as_tensor(np.asarray(class_anchors), dtype=torch.float32)
            if anchors.shape[0] > embed_dim:
                raise InvalidInputError(
                    f"{anchors.shape[0]} class anchors do not fit a {embed_dim}-dim token space"
                )
            text_weight[:, : anchors.shape[0]] = toy_image_encode(anchors, image_weight, image_bias).T
            if anchors.shape[0] >= 2 and anchor_shift:
                # Unprompted class tokens now read class-0 images as class 1.
                gap = text_weight[:, 0] - text_weight[:, 1]
                text_bias = text_bias + anchor_shift * gap / gap.norm()
        self.register_buffer("text_weight", text_weight)
        self.register_buffer("text_bias", text_bias)
        self.freeze()
        logger.debug(
            f"Toy encoder pair ready: payload={payload_dim} D={image_dim} E={embed_dim} "
            f"anchored={self.has_anchors}"
        )

    def encode_payloads(self, payloads: torch.Tensor) -> torch.Tensor:
        return toy_image_encode(payloads.to(torch.float32), self.image_weight, self.image_bias)

    def encode_images(self, images: Sequence[Any]) -> torch.Tensor:
        if len(images) == 0:
            return torch.empty(0, self.image_dim)
        payloads = []
        for image in images:
            payload = getattr(image, "payload", None)
            if payload is None:
                raise InvalidInputError(
                    "the toy encoder needs payload samples; use backbone.kind=external for image files"
                )
            payloads.append(np.asarray(payload, dtype=np.float32))
        with torch.no_grad():
            return self.encode_payloads(torch.from_numpy(np.stack(payloads)))

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        return toy_text_encode(tokens, self.position_weights, self.text_weight, self.text_bias)

    def class_tokens(self, class_names: Sequence[str]) -> List[torch.Tensor]:
        """One token per class id.

        Anchored pairs use the unit token selecting column k (divided by the
        lone-token position weight); otherwise a seeded Gaussian per class id.
        """
        tokens = []
        for class_id, _ in enumerate(class_names):
            if self.has_anchors and class_id < self.embed_dim:
                token = torch.zeros(1, self.embed_dim)
                token[0, class_id] = 1.0 / float(self.position_weights[0])
            else:
                gen = torch_generator(self.seed, "class-token", class_id)
                token = torch.randn(1, self.embed_dim, generator=gen)
            tokens.append(token)
        return tokens


class ClipEncoderPair(EncoderPair):
    """Adapter around an open_clip CLIP model (ViT-B/16 by default).

    Text encoding follows the CoOp recipe: the soft prompt embeddings and
    class-name token embeddings are framed by SOT/EOT embeddings, padded to
    the context length, run through the frozen transformer, and read out
    at the EOT position.
    """

    kind = "external"
    # SOT and EOT
    framing_tokens = 2

    def __init__(self, config: BackboneConfig):
        import open_clip  # heavy optional dependency, only on this path

        weights = Path(config.weights_path) if config.weights_path else None
        if weights is None or not weights.exists():
            raise MissingWeightsError(
                f"missing weights: no backbone weights at {config.weights_path!r}; download the "
                f"{config.model_name} CLIP checkpoint and point backbone.weights_path at it"
            )
        model, _, preprocess = open_clip.create_model_and_transforms(
            config.model_name, pretrained=str(weights)
        )
        image_dim = int(model.visual.output_dim)
        embed_dim = int(model.token_embedding.embedding_dim)
        super().__init__(image_dim, embed_dim, int(model.context_length))
        self.model = model
        self.preprocess = preprocess
        self.tokenizer = open_clip.get_tokenizer(config.model_name)
        sot, eot = self.tokenizer([""])[0][:2].tolist()
        self.sot_id, self.eot_id = int(sot), int(eot)
        self.freeze()
        logger.info(f"Loaded {config.model_name} from {weights} (D={image_dim}, E={embed_dim})")

    def encode_images(self, images: Sequence[Any]) -> torch.Tensor:
        from PIL import Image

        batch = []
        for image in images:
            path = getattr(image, "path", None)
            if path is None:
                raise InvalidInputError("the external encoder needs image files (samples with a path)")
            with Image.open(path) as handle:
                batch.append(self.preprocess(handle.convert("RGB")))
        with torch.no_grad():
            return l2_normalize(self.model.encode_image(torch.stack(batch)).float())

    def class_tokens(self, class_names: Sequence[str]) -> List[torch.Tensor]:
        tokens = []
        for name in class_names:
            ids = self.tokenizer([name.replace("_", " ") + "."])[0]
            ids = ids[1: int((ids == self.eot_id).nonzero()[0])]
            with torch.no_grad():
                tokens.append(self.model.token_embedding(ids).float())
        return tokens

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        batch, length, _ = tokens.shape
        if length > self.prompt_capacity:
            raise InvalidInputError(
                f"prompt of {length} tokens exceeds the {self.prompt_capacity} prompt positions of the "
                f"{self.max_context_length}-token context"
            )
        embed = self.model.token_embedding
        ids = torch.tensor([self.sot_id, self.eot_id, 0])
        sot, eot, pad = embed(ids).float()
        padding = self.max_context_length - length - 2
        sequence = torch.cat(
            [
                sot.expand(batch, 1, -1),
                tokens,
                eot.expand(batch, 1, -1),
                pad.expand(batch, padding, -1),
            ],
            dim=1,
        )
        x = sequence + self.model.positional_embedding.float()
        batch_first = getattr(self.model.transformer, "batch_first", False)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = self.model.transformer(x, attn_mask=self.model.attn_mask)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = self.model.ln_final(x)
        features = x[:, length + 1] @ self.model.text_projection.float()
        features = l2_normalize(features)
        return features[0] if squeeze else features


def external_encoder_adapter(
    config: BackboneConfig,
    class_anchors: Optional[np.ndarray] = None,
) -> EncoderPair:
    """Build the EncoderPair a backbone descriptor names."""
    config.validate()
    if config.kind == "toy":
        return ToyEncoderPair(
            seed=config.seed,
            payload_dim=config.payload_dim,
            image_dim=config.image_dim,
            embed_dim=config.embed_dim,
            max_context_length=config.max_context_length,
            class_anchors=class_anchors,
        )
    return ClipEncoderPair(config)
