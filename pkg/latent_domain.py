"""Latent domain model: domain feature extractor, adversarial auxiliary classifier,
k-means clustering and Kuhn-Munkres label stabilization."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score, mutual_info_score
from sklearn.metrics.cluster import contingency_matrix
from torch import nn
from torch.autograd import Function

from core import InvalidInputError, RngSeed, derive_seed, l2_normalize, numpy_generator, torch_generator

KMEANS_MAX_ITER = 300
# Relative slack when checking that inertia never increases.
INERTIA_SLACK = 1e-9


def _init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    # Same U(-1/sqrt(fan_in), 1/sqrt(fan_in)) bound as torch's default, but seeded.
    bound = 1.0 / layer.in_features ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.uniform_(-bound, bound, generator=generator)


class DomainFeatureExtractor(nn.Module):
    """e(.): two-layer perceptron W2 relu(W1 x + b1) + b2 on frozen image features."""

    def __init__(self, input_dim: int, hidden_dim: Optional[int] = None, output_dim: Optional[int] = None, seed: RngSeed = 0):
        super().__init__()
        hidden_dim = hidden_dim or max(1, input_dim // 2)
        output_dim = output_dim or max(1, input_dim // 4)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, output_dim)
        gen = torch_generator(seed, "domain-extractor")
        _init_linear(self.fc1, gen)
        _init_linear(self.fc2, gen)

    def forward(self, image_features: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(image_features)))


class AuxiliaryClassifier(nn.Module):
    """a(.): linear map from domain features to class logits."""

    def __init__(self, input_dim: int, num_classes: int, seed: RngSeed = 0):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(input_dim, num_classes)
        _init_linear(self.fc, torch_generator(seed, "auxiliary-classifier"))

    def forward(self, domain_features: torch.Tensor) -> torch.Tensor:
        return self.fc(domain_features)


class LatentDomainModel(nn.Module):
    """Extractor e(.) and auxiliary classifier a(.) trained together."""

    def __init__(
        self,
        image_dim: int,
        num_classes: int,
        hidden_dim: Optional[int] = None,
        domain_dim: Optional[int] = None,
        seed: RngSeed = 0,
    ):
        super().__init__()
        self.extractor = DomainFeatureExtractor(image_dim, hidden_dim, domain_dim, seed=seed)
        self.aux = AuxiliaryClassifier(self.extractor.output_dim, num_classes, seed=seed)

    @property
    def domain_dim(self) -> int:
        return self.extractor.output_dim

    def embed(self, image_features: torch.Tensor) -> torch.Tensor:
        """Unit-norm e(f(x)); what the auxiliary classifier and k-means see."""
        return l2_normalize(extract_domain_feature(self.extractor, image_features))

    def domain_features(self, image_features: torch.Tensor) -> np.ndarray:
        """Unit-norm e(f(x)) for a whole set, detached, as float64 for clustering."""
        with torch.no_grad():
            return self.embed(image_features).double().numpy()


class GradientReversal(Function):
    """Identity forward; backward multiplies incoming gradients by -lambda."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def gradient_reversal(features: torch.Tensor, lam: float) -> torch.Tensor:
    lam = float(lam)
    if not np.isfinite(lam):
        raise InvalidInputError(f"gradient reversal lambda must be finite, got {lam}")
    return GradientReversal.apply(features, lam)


def extract_domain_feature(extractor: DomainFeatureExtractor, image_feature: torch.Tensor) -> torch.Tensor:
    if image_feature.shape[-1] != extractor.input_dim:
        raise InvalidInputError(
            f"image feature dim {image_feature.shape[-1]} does not match extractor input {extractor.input_dim}"
        )
    return extractor(image_feature)


def adversarial_loss(
    aux: AuxiliaryClassifier,
    domain_features: torch.Tensor,
    class_labels: torch.Tensor,
) -> torch.Tensor:
    """Mean cross-entropy of a(e(f(x))) against the class labels (L_adv)."""
    if domain_features.shape[0] == 0:
        raise InvalidInputError("adversarial loss needs a nonempty batch")
    if bool((class_labels < 0).any()) or bool((class_labels >= aux.num_classes).any()):
        raise InvalidInputError(f"class labels must lie in [0, {aux.num_classes})")
    return F.cross_entropy(aux(domain_features), class_labels)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: List[float] = field(default_factory=list)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            index = rng.choice(n, p=closest / total)
        else:
            index = rng.integers(0, n)
        centroids[i] = points[index]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _update_centroids(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Means of assigned points; an empty cluster is reseeded at the point
    farthest from its own centroid, and that point moves to it."""
    k = centroids.shape[0]
    updated = centroids.copy()
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        if counts[j] > 0:
            updated[j] = points[labels == j].mean(axis=0)
    for j in np.flatnonzero(counts == 0):
        own = ((points - updated[labels]) ** 2).sum(axis=1)
        own[counts[labels] <= 1] = -1.0
        farthest = int(np.argmax(own))
        logger.debug(f"k-means: reseeding empty cluster {j} at point {farthest}")
        counts[labels[farthest]] -= 1
        labels[farthest] = j
        counts[j] = 1
        updated[j] = points[farthest]
    return updated


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int) -> KMeansResult:
    centroids = _kmeans_plusplus(points, k, rng)
    distances = _squared_distances(points, centroids)
    labels = distances.argmin(axis=1)
    inertia = float(distances[np.arange(len(points)), labels].sum())
    trace = [inertia]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        centroids = _update_centroids(points, labels.copy(), centroids)
        distances = _squared_distances(points, centroids)
        new_labels = distances.argmin(axis=1)
        new_inertia = float(distances[np.arange(len(points)), new_labels].sum())
        if new_inertia > inertia + INERTIA_SLACK * max(1.0, inertia):
            raise RuntimeError(f"k-means inertia increased from {inertia} to {new_inertia} at iteration {n_iter}")
        trace.append(new_inertia)
        converged = np.array_equal(new_labels, labels)
        labels, inertia = new_labels, new_inertia
        if converged:
            break
    # Final centroids are the means of the final assignment.
    final = _update_centroids(points, labels, centroids)
    inertia = float(((points - final[labels]) ** 2).sum())
    return KMeansResult(final, labels.astype(np.int64), inertia, n_iter, trace)


def kmeans_cluster(
    domain_features: np.ndarray,
    k: int,
    seed: RngSeed,
    max_iter: int = KMEANS_MAX_ITER,
    n_init: int = 1,
) -> KMeansResult:
    """k-means++ seeding, then Lloyd iterations to an assignment fixpoint."""
    points = np.asarray(domain_features, dtype=np.float64)
    if points.ndim != 2:
        raise InvalidInputError("domain features must be an (n, Dd) matrix")
    n = points.shape[0]
    if k < 1 or n < k:
        raise InvalidInputError(f"k-means needs n >= k >= 1, got n={n}, k={k}")
    best: Optional[KMeansResult] = None
    for restart in range(n_init):
        result = _lloyd(points, k, numpy_generator(seed, "kmeans", restart), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def stabilize_assignment(prev_centroids: np.ndarray, new_centroids: np.ndarray) -> np.ndarray:
    """Permutation pi minimizing sum_s |prev_s - new_pi(s)|^2 (Kuhn-Munkres)."""
    prev = np.asarray(prev_centroids, dtype=np.float64)
    new = np.asarray(new_centroids, dtype=np.float64)
    if prev.shape != new.shape or prev.ndim != 2:
        raise InvalidInputError(f"centroid shapes differ: {prev.shape} vs {new.shape}")
    rows, cols = linear_sum_assignment(_squared_distances(prev, new))
    permutation = np.empty(prev.shape[0], dtype=np.int64)
    permutation[rows] = cols
    return permutation


def relabel(centroids: np.ndarray, assignments: np.ndarray, permutation: np.ndarray):
    """Apply pi: new centroid pi(s) becomes domain s, and so do its members."""
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(len(permutation))
    return centroids[permutation], inverse[assignments]


@dataclass
class LatentDomainState:
    """c_s centroids (N_s, Dd), per-training-sample latent labels and the round counter."""
    centroids: np.ndarray
    assignments: np.ndarray
    round: int = 0
    inertia: float = 0.0

    @property
    def num_domains(self) -> int:
        return int(self.centroids.shape[0])

    def cluster_sizes(self) -> List[int]:
        return np.bincount(self.assignments, minlength=self.num_domains).tolist()


def centroids_from_assignments(features: np.ndarray, assignments: np.ndarray, k: int) -> np.ndarray:
    points = np.asarray(features, dtype=np.float64)
    centroids = np.zeros((k, points.shape[1]), dtype=np.float64)
    for j in range(k):
        members = points[assignments == j]
        if len(members) == 0:
            raise InvalidInputError(f"latent domain {j} has no members")
        centroids[j] = members.mean(axis=0)
    return centroids


def recluster(
    domain_features: np.ndarray,
    k: int,
    seed: RngSeed,
    previous: Optional[LatentDomainState] = None,
) -> LatentDomainState:
    """One clustering round; identities follow the previous round's centroids."""
    round_index = 0 if previous is None else previous.round + 1
    result = kmeans_cluster(domain_features, k, derive_seed(seed, "cluster-round", round_index))
    centroids, assignments = result.centroids, result.assignments
    if previous is not None:
        permutation = stabilize_assignment(previous.centroids, centroids)
        centroids, assignments = relabel(centroids, assignments, permutation)
    return LatentDomainState(centroids, assignments, round_index, result.inertia)


def assign_latent_domain(state: LatentDomainState, domain_feature: np.ndarray) -> int:
    """Nearest centroid by Euclidean distance; ties go to the lowest index."""
    return int(assign_latent_domains(state, np.asarray(domain_feature)[None, :])[0])


def assign_latent_domains(state: LatentDomainState, domain_features: np.ndarray) -> np.ndarray:
    points = np.asarray(domain_features, dtype=np.float64)
    return _squared_distances(points, state.centroids).argmin(axis=1)


def best_mapping_agreement(assignments: np.ndarray, annotations: np.ndarray) -> float:
    """Clustering accuracy under the best cluster-to-domain mapping.

    Clusters are matched one-to-one by Kuhn-Munkres on the contingency
    matrix; clusters left over (more clusters than domains) map to their
    majority domain.
    """
    assignments = np.asarray(assignments)
    annotations = np.asarray(annotations)
    if assignments.shape != annotations.shape or assignments.size == 0:
        raise InvalidInputError("agreement needs equally long, nonempty assignment and annotation arrays")
    # Rows are clusters, columns annotated domains, both in sorted label order.
    table = contingency_matrix(assignments, annotations)
    rows, cols = linear_sum_assignment(-table)
    correct = int(table[rows, cols].sum())
    unmatched = sorted(set(range(table.shape[0])) - set(rows.tolist()))
    correct += sum(int(table[i].max()) for i in unmatched)
    return correct / len(assignments)


def cluster_report(
    state: LatentDomainState,
    class_labels: np.ndarray,
    annotations: Optional[np.ndarray] = None,
) -> Dict[str, object]:
    """Sizes, inertia, class mutual information and (if given) agreement with annotated domains."""
    report: Dict[str, object] = {
        "round": state.round,
        "num_domains": state.num_domains,
        "cluster_sizes": state.cluster_sizes(),
        "inertia": state.inertia,
        "class_mutual_information": float(mutual_info_score(class_labels, state.assignments)),
    }
    if annotations is not None:
        domains = np.unique(annotations)
        confusion = contingency_matrix(annotations, state.assignments)
        report.update(
            {
                "annotated_domains": domains.tolist(),
                "confusion": confusion.tolist(),
                "agreement": best_mapping_agreement(state.assignments, annotations),
                "adjusted_rand_index": float(adjusted_rand_score(annotations, state.assignments)),
            }
        )
    return report
