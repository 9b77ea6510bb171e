"""Dataset manifests: directory-layout image datasets, the synthetic
multi-style generator and leave-one-domain-out splits."""
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from core import DatasetError, allow_domain_access, numpy_generator, read_guarded_domain
from encoders import ToyImage

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
MANIFEST_VERSION = 1


@dataclass
class ImageFile:
    """An image on disk; the domain directory it came from is guarded."""
    sample_id: str
    path: str
    class_id: int
    _domain_id: Optional[int] = field(default=None, repr=False)

    @property
    def annotated_domain_id(self) -> Optional[int]:
        return read_guarded_domain(self._domain_id)


Sample = Union[ToyImage, ImageFile]


def _raw_domain(sample: Sample) -> Optional[int]:
    return sample._true_style_id if isinstance(sample, ToyImage) else sample._domain_id


@dataclass
class DatasetManifest:
    name: str
    classes: List[str]
    samples: List[Sample]
    annotated_domains: Optional[List[str]] = None
    source: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_domains(self) -> int:
        return len(self.annotated_domains or [])

    def validate(self) -> "DatasetManifest":
        if not self.classes:
            raise DatasetError(f"dataset {self.name!r} has no classes")
        used = {s.class_id for s in self.samples}
        if any(c < 0 or c >= len(self.classes) for c in used):
            raise DatasetError(f"dataset {self.name!r}: class ids must lie in [0, {len(self.classes)})")
        if self.annotated_domains is not None:
            with allow_domain_access("manifest validation"):
                domains = {s.annotated_domain_id for s in self.samples}
            if any(d is None or d < 0 or d >= len(self.annotated_domains) for d in domains):
                raise DatasetError(
                    f"dataset {self.name!r}: domain ids must lie in [0, {len(self.annotated_domains)})"
                )
        return self

    def domain_ids(self) -> np.ndarray:
        """Annotated domain per sample; evaluation and diagnostics only."""
        with allow_domain_access("domain ids for evaluation"):
            return np.asarray([s.annotated_domain_id for s in self.samples], dtype=np.int64)

    def class_ids(self) -> np.ndarray:
        return np.asarray([s.class_id for s in self.samples], dtype=np.int64)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "DatasetManifest":
        return DatasetManifest(
            name=name or self.name,
            classes=list(self.classes),
            samples=[self.samples[i] for i in indices],
            annotated_domains=self.annotated_domains,
            source=dict(self.source),
        )

    def to_document(self) -> Dict[str, Any]:
        rows = []
        for sample in self.samples:
            row: Dict[str, Any] = {
                "sample_id": sample.sample_id,
                "class_id": int(sample.class_id),
                "annotated_domain_id": _raw_domain(sample),
            }
            if isinstance(sample, ToyImage):
                row["payload"] = [float(v) for v in np.asarray(sample.payload, dtype=np.float64)]
            else:
                row["path"] = sample.path
            rows.append(row)
        return {
            "version": MANIFEST_VERSION,
            "name": self.name,
            "classes": list(self.classes),
            "annotated_domains": self.annotated_domains,
            "source": self.source,
            "samples": rows,
        }

    @classmethod
    def from_document(cls, document: Dict[str, Any]) -> "DatasetManifest":
        if document.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {document.get('version')!r}")
        samples: List[Sample] = []
        for index, row in enumerate(document.get("samples", [])):
            try:
                if "payload" in row:
                    samples.append(
                        ToyImage(row["sample_id"], np.asarray(row["payload"], dtype=np.float64),
                                 int(row["class_id"]), row.get("annotated_domain_id"))
                    )
                else:
                    samples.append(
                        ImageFile(row["sample_id"], row["path"], int(row["class_id"]), row.get("annotated_domain_id"))
                    )
            except KeyError as e:
                raise DatasetError(f"manifest sample {index} is missing {e}") from e
        return cls(
            name=document["name"],
            classes=list(document["classes"]),
            samples=samples,
            annotated_domains=document.get("annotated_domains"),
            source=dict(document.get("source") or {}),
        )


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_document(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    logger.debug(f"Manifest with {len(manifest)} samples written to {path}")
    return path


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing root: manifest {path} does not exist")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest {path} is not valid JSON: {e}") from e
    return DatasetManifest.from_document(document)


@dataclass
class SyntheticSpec:
    """Generator knobs; class and style directions come from one orthonormal basis."""
    n_styles: int = 3
    num_classes: int = 5
    samples_per_cell: int = 40
    payload_dim: int = 16
    noise_std: float = 0.1
    separation: float = 5.0
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.n_styles < 1 or self.num_classes < 2 or self.samples_per_cell < 1:
            raise DatasetError("synthetic spec needs n_styles >= 1, num_classes >= 2, samples_per_cell >= 1")
        if self.num_classes + self.n_styles > self.payload_dim:
            raise DatasetError(
                f"payload_dim {self.payload_dim} cannot hold {self.num_classes} class and "
                f"{self.n_styles} style directions"
            )
        if self.noise_std < 0 or self.separation <= 0:
            raise DatasetError("synthetic spec needs noise_std >= 0 and separation > 0")
        return self

    def _basis(self) -> np.ndarray:
        rng = numpy_generator(self.seed, "synthetic-basis")
        q, _ = np.linalg.qr(rng.standard_normal((self.payload_dim, self.payload_dim)))
        return q

    def class_centers(self) -> np.ndarray:
        """(K, P) centers, pairwise ``separation`` apart."""
        self.validate()
        basis = self._basis()
        return (self.separation / np.sqrt(2.0)) * basis[:, : self.num_classes].T

    def style_offsets(self) -> np.ndarray:
        self.validate()
        basis = self._basis()
        return (self.separation / np.sqrt(2.0)) * basis[:, self.num_classes: self.num_classes + self.n_styles].T

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def generate_synthetic(spec: SyntheticSpec) -> DatasetManifest:
    """payload = class_center + style_offset + N(0, noise_std^2), style id as annotated domain."""
    spec.validate()
    centers = spec.class_centers()
    offsets = spec.style_offsets()
    rng = numpy_generator(spec.seed, "synthetic-noise")
    samples: List[Sample] = []
    for style in range(spec.n_styles):
        for class_id in range(spec.num_classes):
            noise = spec.noise_std * rng.standard_normal((spec.samples_per_cell, spec.payload_dim))
            for i in range(spec.samples_per_cell):
                samples.append(
                    ToyImage(f"s{style}-c{class_id}-{i:04d}", centers[class_id] + offsets[style] + noise[i],
                             class_id, style)
                )
    logger.info(
        f"Generated synthetic dataset: {spec.n_styles} styles x {spec.num_classes} classes x "
        f"{spec.samples_per_cell} samples (seed {spec.seed})"
    )
    return DatasetManifest(
        name="synthetic",
        classes=[f"class_{k}" for k in range(spec.num_classes)],
        samples=samples,
        annotated_domains=[f"style_{s}" for s in range(spec.n_styles)],
        source={"synthetic": spec.to_dict()},
    )


def _visible_dirs(path: Path) -> List[Path]:
    return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def load_directory_dataset(root: Union[str, Path]) -> DatasetManifest:
    """Scan root/domain/class/image; every domain must have the same classes."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"missing root: dataset directory {root} does not exist")
    domains = _visible_dirs(root)
    if not domains:
        raise DatasetError(f"dataset root {root} has no domain directories")
    class_sets = {}
    for domain in domains:
        class_dirs = _visible_dirs(domain)
        if not class_dirs:
            raise DatasetError(f"domain {domain.name!r} has no class directories")
        class_sets[domain.name] = {c.name for c in class_dirs}
    classes = sorted(set().union(*class_sets.values()))
    for name, found in class_sets.items():
        if found != set(classes):
            missing = sorted(set(classes) - found)
            raise DatasetError(f"inconsistent label set: domain {name!r} lacks classes {missing}")

    class_index = {name: k for k, name in enumerate(classes)}
    samples: List[Sample] = []
    for domain_id, domain in enumerate(domains):
        for class_name in classes:
            for path in sorted((domain / class_name).iterdir()):
                if path.suffix.lower() not in IMAGE_EXTENSIONS:
                    continue
                if not os.access(path, os.R_OK):
                    raise DatasetError(f"unreadable file {path}")
                sample_id = f"{domain.name}/{class_name}/{path.name}"
                samples.append(ImageFile(sample_id, str(path), class_index[class_name], domain_id))
    logger.info(f"Loaded {len(samples)} images from {root}: {len(domains)} domains, {len(classes)} classes")
    return DatasetManifest(
        name=root.name,
        classes=classes,
        samples=samples,
        annotated_domains=[d.name for d in domains],
        source={"root": str(root)},
    )


@dataclass
class DomainSplit:
    target_domain: int
    target_name: str
    train_domains: List[int]
    train: DatasetManifest
    test: DatasetManifest


def leave_one_domain_out_splits(manifest: DatasetManifest) -> List[DomainSplit]:
    if manifest.num_domains < 2:
        raise DatasetError(f"leave-one-domain-out needs at least 2 annotated domains, got {manifest.num_domains}")
    domain_ids = manifest.domain_ids()
    splits = []
    for target, target_name in enumerate(manifest.annotated_domains):
        test_idx = np.flatnonzero(domain_ids == target)
        train_idx = np.flatnonzero(domain_ids != target)
        splits.append(
            DomainSplit(
                target_domain=target,
                target_name=target_name,
                train_domains=[d for d in range(manifest.num_domains) if d != target],
                train=manifest.subset(train_idx.tolist(), f"{manifest.name}-train-{target_name}"),
                test=manifest.subset(test_idx.tolist(), f"{manifest.name}-test-{target_name}"),
            )
        )
    return splits


def build_dataset(descriptor: Dict[str, Any]) -> DatasetManifest:
    """Resolve a ``dataset`` config section into a manifest."""
    kind = descriptor.get("kind", "synthetic")
    if kind == "synthetic":
        options = {k: v for k, v in descriptor.items() if k != "kind"}
        return generate_synthetic(SyntheticSpec(**options))
    if kind == "directory":
        if not descriptor.get("root"):
            raise DatasetError("missing root: dataset.root is not set")
        return load_directory_dataset(descriptor["root"])
    if kind == "manifest":
        if not descriptor.get("path"):
            raise DatasetError("missing root: dataset.path is not set")
        return load_manifest(descriptor["path"])
    raise DatasetError(f"unknown dataset kind {kind!r}")
