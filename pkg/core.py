"""Shared types, errors, seeded randomness and numeric primitives."""
import hashlib
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Dict, Iterable, Iterator, Mapping, Optional, Union

import numpy as np
import torch
from loguru import logger
from torch import nn

# Norm below which a vector counts as the zero vector.
DEGENERATE_NORM = 1e-12
NORMALIZATION_TOLERANCE = 1e-6

FeatureVector = torch.Tensor
SimplexWeights = torch.Tensor
Temperature = float
RngSeed = int


class LDPFError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(LDPFError, ValueError):
    """A precondition on shapes, ranges or finiteness was violated."""


class DegenerateVectorError(LDPFError, ValueError):
    """A vector with (numerically) zero norm reached a cosine or normalization."""


class ConfigError(LDPFError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class DatasetError(LDPFError, ValueError):
    """Dataset layout or content problem."""


class CheckpointError(LDPFError, ValueError):
    """Checkpoint cannot be read or does not match the running encoders."""


class DomainAccessError(LDPFError, PermissionError):
    """Training code tried to read annotated domain labels."""


class TrainingDivergedError(LDPFError, RuntimeError):
    """A loss became NaN or infinite."""


class MissingWeightsError(LDPFError, FileNotFoundError):
    """Backbone weights are not available at the configured path."""


def derive_seed(seed: RngSeed, *path: Union[str, int]) -> RngSeed:
    """Derive a 64-bit child seed from a parent seed and a purpose path.

    Workers, epochs and subsystems never share a generator; each one asks
    for ``derive_seed(seed, "purpose", index)``.
    """
    if seed < 0 or seed >= 2 ** 64:
        raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    digest = hashlib.blake2b(digest_size=8)
    digest.update(int(seed).to_bytes(8, "little"))
    for part in path:
        digest.update(b"/")
        digest.update(str(part).encode("utf-8"))
    return int.from_bytes(digest.digest(), "little")


def torch_generator(seed: RngSeed, *path: Union[str, int]) -> torch.Generator:
    generator = torch.Generator(device="cpu")
    # torch seeds are signed 64-bit on some platforms
    generator.manual_seed(derive_seed(seed, *path) & 0x7FFF_FFFF_FFFF_FFFF)
    return generator


def numpy_generator(seed: RngSeed, *path: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *path))


def validate_temperature(tau: Temperature) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidInputError(f"temperature must be a positive finite number, got {tau}")
    return tau


def validate_simplex(weights: SimplexWeights, atol: float = NORMALIZATION_TOLERANCE) -> SimplexWeights:
    """Check that the last axis of ``weights`` is a probability vector."""
    if weights.numel() == 0:
        raise InvalidInputError("simplex weights must be nonempty")
    if bool((weights < -atol).any()):
        raise InvalidInputError("simplex weights contain negative entries")
    sums = weights.sum(dim=-1).double()
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol, rtol=0.0):
        raise InvalidInputError(f"simplex weights do not sum to 1 (got {sums.tolist()})")
    return weights


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """Normalize along the last axis; zero rows are an error."""
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms <= DEGENERATE_NORM).any()):
        raise DegenerateVectorError("degenerate feature vector: cannot normalize a zero vector")
    return x / norms


def cosine_similarity(a: FeatureVector, b: FeatureVector) -> torch.Tensor:
    """dot(a, b) / (|a| |b|) along the last axis, broadcasting leading axes."""
    if a.shape[-1] != b.shape[-1]:
        raise InvalidInputError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    norm_a = a.norm(dim=-1)
    norm_b = b.norm(dim=-1)
    if bool((norm_a <= DEGENERATE_NORM).any()) or bool((norm_b <= DEGENERATE_NORM).any()):
        raise DegenerateVectorError("degenerate feature vector")
    cos = (a * b).sum(dim=-1) / (norm_a * norm_b)
    return cos.clamp(-1.0, 1.0)


def temperature_softmax(logits: torch.Tensor, tau: Temperature) -> SimplexWeights:
    """exp(l_i / tau) / sum_j exp(l_j / tau) over the last axis."""
    tau = validate_temperature(tau)
    if logits.numel() == 0 or logits.shape[-1] == 0:
        raise InvalidInputError("logits must be nonempty")
    if not bool(torch.isfinite(logits).all()):
        raise InvalidInputError("logits must be finite")
    shifted = (logits - logits.max(dim=-1, keepdim=True).values) / tau
    exp = shifted.exp()
    return exp / exp.sum(dim=-1, keepdim=True)


def parameter_checksum(source: Union[nn.Module, Mapping[str, torch.Tensor], Iterable[torch.Tensor]]) -> str:
    """SHA-256 over raw tensor bytes in a fixed order.

    Modules contribute parameters and buffers sorted by name.
    """
    if isinstance(source, nn.Module):
        named: Dict[str, torch.Tensor] = dict(source.named_parameters())
        named.update(dict(source.named_buffers()))
        tensors = [named[name] for name in sorted(named)]
    elif isinstance(source, Mapping):
        tensors = [source[name] for name in sorted(source)]
    else:
        tensors = list(source)
    digest = hashlib.sha256()
    for tensor in tensors:
        data = tensor.detach().cpu().contiguous()
        digest.update(str(tuple(data.shape)).encode("ascii"))
        digest.update(str(data.dtype).encode("ascii"))
        digest.update(data.numpy().tobytes())
    return digest.hexdigest()


_domain_access: ContextVar[bool] = ContextVar("ldpf_domain_access", default=False)


@contextmanager
def allow_domain_access(reason: str) -> Iterator[None]:
    """Open the annotated-domain guard for evaluation, diagnostics or ablations."""
    token = _domain_access.set(True)
    logger.debug(f"Annotated domain access opened: {reason}")
    try:
        yield
    finally:
        _domain_access.reset(token)


def domain_access_allowed() -> bool:
    return _domain_access.get()


def read_guarded_domain(value: Optional[int]) -> Optional[int]:
    """Return an annotated domain id, or trip the guard outside an allowed context."""
    if not _domain_access.get():
        raise DomainAccessError(
            "annotated domain labels are hidden from training; "
            "open allow_domain_access() for evaluation or the no_clustering ablation"
        )
    return value
