"""Dual-part soft prompts: shared domain-agnostic tokens, per-latent-domain tokens, class tokens."""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import torch
from torch import nn

from core import (
    InvalidInputError,
    Temperature,
    cosine_similarity,
    temperature_softmax,
    torch_generator,
)
from encoders import EncoderPair, TokenSequence

PROMPT_INIT_STD = 0.02


class PromptMode(str, Enum):
    DSP_ONLY = "dsp-only"
    FULL = "full"


class PromptBank(nn.Module):
    """Learnable [v] x M1 (shared), [d^s] x M2 per latent domain, fixed [CLASS]_k tokens."""

    def __init__(
        self,
        num_domains: int,
        class_tokens: Sequence[torch.Tensor],
        embed_dim: int,
        m1: int = 4,
        m2: int = 8,
        max_context_length: int = 77,
        seed: int = 0,
        init_std: float = PROMPT_INIT_STD,
    ):
        super().__init__()
        if num_domains < 1:
            raise InvalidInputError("a prompt bank needs at least one latent domain")
        if m1 < 0 or m2 < 0:
            raise InvalidInputError(f"prompt lengths must be >= 0, got M1={m1}, M2={m2}")
        if len(class_tokens) < 1:
            raise InvalidInputError("a prompt bank needs at least one class")
        longest_class = max(int(tokens.shape[0]) for tokens in class_tokens)
        if m1 + m2 + longest_class > max_context_length:
            raise InvalidInputError(
                f"M1 + M2 + class tokens = {m1 + m2 + longest_class} exceeds the "
                f"{max_context_length}-token context"
            )
        self.m1 = m1
        self.m2 = m2
        self.embed_dim = embed_dim
        self.max_context_length = max_context_length
        self.seed = seed

        gen = torch_generator(seed, "prompt-init")
        self.agnostic = nn.Parameter(init_std * torch.randn(m1, embed_dim, generator=gen))
        self.specific = nn.ParameterList(
            nn.Parameter(init_std * torch.randn(m2, embed_dim, generator=gen)) for _ in range(num_domains)
        )
        for class_id, tokens in enumerate(class_tokens):
            if tokens.dim() != 2 or tokens.shape[1] != embed_dim:
                raise InvalidInputError(
                    f"class {class_id} tokens must be (count, {embed_dim}), got {tuple(tokens.shape)}"
                )
            self.register_buffer(f"class_tokens_{class_id}", tokens.detach().clone().float())
        self._num_classes = len(class_tokens)

    @property
    def num_domains(self) -> int:
        return len(self.specific)

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def class_token_group(self, class_id: int) -> torch.Tensor:
        return getattr(self, f"class_tokens_{class_id}")

    def agnostic_parameters(self) -> List[nn.Parameter]:
        return [self.agnostic]

    def specific_parameters(self) -> List[nn.Parameter]:
        return list(self.specific)

    def snapshot(self) -> Dict[str, torch.Tensor]:
        """Detached copy of every tensor, for readers that must not see later updates."""
        return {name: tensor.detach().clone() for name, tensor in self.state_dict().items()}


@dataclass
class TextFeatureTable:
    """f_k^s for every latent domain s and class k: ``features`` is (N_s, K, D)."""
    features: torch.Tensor

    @property
    def num_domains(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.features.shape[1])

    def domain(self, domain: int) -> torch.Tensor:
        return self.features[domain]


def assemble_prompt(
    bank: PromptBank,
    domain: int,
    class_id: int,
    mode: PromptMode = PromptMode.FULL,
    detach_specific: bool = False,
) -> TokenSequence:
    """[v]_1..[v]_M1 [d^s]_1..[d^s]_M2 [CLASS]_k (full) or without the [v] block (dsp-only)."""
    if not 0 <= domain < bank.num_domains:
        raise InvalidInputError(f"latent domain {domain} out of range [0, {bank.num_domains})")
    if not 0 <= class_id < bank.num_classes:
        raise InvalidInputError(f"class {class_id} out of range [0, {bank.num_classes})")
    mode = PromptMode(mode)
    specific = bank.specific[domain]
    if detach_specific:
        specific = specific.detach()
    class_tokens = bank.class_token_group(class_id)
    parts = [specific, class_tokens]
    if mode is PromptMode.FULL:
        parts.insert(0, bank.agnostic)
    return TokenSequence(tokens=torch.cat(parts, dim=0), class_token_count=int(class_tokens.shape[0]))


def _encode_sequences(enc: EncoderPair, sequences: List[TokenSequence]) -> torch.Tensor:
    """Encode prompts in batches of equal length, preserving input order."""
    by_length: Dict[int, List[int]] = {}
    for index, sequence in enumerate(sequences):
        by_length.setdefault(len(sequence), []).append(index)
    encoded: List[Tuple[int, torch.Tensor]] = []
    for length in sorted(by_length):
        indices = by_length[length]
        batch = torch.stack([sequences[i].tokens for i in indices])
        features = enc.encode_text(batch)
        encoded.extend(zip(indices, features))
    encoded.sort(key=lambda item: item[0])
    return torch.stack([feature for _, feature in encoded])


def compute_text_features(
    bank: PromptBank,
    enc: EncoderPair,
    mode: PromptMode = PromptMode.FULL,
    detach_specific: bool = False,
) -> TextFeatureTable:
    """Encode all N_s x K prompts; differentiable w.r.t. the prompt tokens."""
    if bank.embed_dim != enc.embed_dim:
        raise InvalidInputError(
            f"prompt embed dim {bank.embed_dim} does not match encoder embed dim {enc.embed_dim}"
        )
    sequences = [
        assemble_prompt(bank, domain, class_id, mode, detach_specific=detach_specific)
        for domain in range(bank.num_domains)
        for class_id in range(bank.num_classes)
    ]
    features = _encode_sequences(enc, sequences)
    return TextFeatureTable(features.view(bank.num_domains, bank.num_classes, -1))


def zero_shot_text_features(bank: PromptBank, enc: EncoderPair) -> TextFeatureTable:
    """Class tokens alone, no learned context: the unprompted baseline."""
    sequences = [
        TokenSequence(bank.class_token_group(k), int(bank.class_token_group(k).shape[0]))
        for k in range(bank.num_classes)
    ]
    with torch.no_grad():
        features = _encode_sequences(enc, sequences)
    return TextFeatureTable(features.unsqueeze(0))


def classify(image_feature: torch.Tensor, class_features: torch.Tensor, tau: Temperature) -> torch.Tensor:
    """P(y=k|x) = softmax_k(cos(f_k, f(x)) / tau).

    ``image_feature`` is (D,) or (B, D); ``class_features`` is (K, D) or, for
    per-sample fused features, (B, K, D).
    """
    if image_feature.shape[-1] != class_features.shape[-1]:
        raise InvalidInputError(
            f"image dim {image_feature.shape[-1]} does not match text dim {class_features.shape[-1]}"
        )
    cosines = cosine_similarity(image_feature.unsqueeze(-2), class_features)
    return temperature_softmax(cosines, tau)
