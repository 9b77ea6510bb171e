"""Selection oracle upper bound over per-domain prompt predictions."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from core import InvalidInputError

NEGATIVE_GAP_FLAG = "fusion exceeded selection oracle"
REQUIRED_FIELDS = ("sample_id", "true_class", "per_domain_predicted_class", "fused_predicted_class")


def _check_class_id(value: Any, name: str, index: int, num_classes: Optional[int]) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidInputError(f"prediction dump row {index}: {name} must be an integer class id, got {value!r}")
    if value < 0 or (num_classes is not None and value >= num_classes):
        raise InvalidInputError(f"prediction dump row {index}: class id {value} out of range [0, {num_classes})")


def _check_alpha(alpha: Any, width: int, index: int) -> None:
    if not isinstance(alpha, (list, tuple)) or len(alpha) != width:
        raise InvalidInputError(f"prediction dump row {index}: alpha must list {width} weights, got {alpha!r}")
    if any(isinstance(a, bool) or not isinstance(a, (int, float)) for a in alpha):
        raise InvalidInputError(f"prediction dump row {index}: alpha weights must be numbers, got {alpha!r}")


@dataclass
class PredictionDump:
    """Rows written by the fusion predictor.

    ``per_domain`` is (N, N_s) predicted classes, one column per latent domain.
    """
    sample_ids: List[str]
    true_class: np.ndarray
    per_domain: np.ndarray
    fused: np.ndarray
    alpha: Optional[np.ndarray] = None
    num_classes: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def num_domains(self) -> int:
        return int(self.per_domain.shape[1])

    @classmethod
    def from_rows(cls, rows: Sequence[Dict[str, Any]], num_classes: Optional[int] = None,
                  meta: Optional[Dict[str, Any]] = None) -> "PredictionDump":
        """Validate rows and build a dump; errors name the offending row."""
        if not rows:
            raise InvalidInputError("prediction dump is empty")
        width = None
        for index, row in enumerate(rows):
            if not isinstance(row, dict):
                raise InvalidInputError(f"prediction dump row {index}: expected an object, got {type(row).__name__}")
            missing = [name for name in REQUIRED_FIELDS if name not in row]
            if missing:
                raise InvalidInputError(f"prediction dump row {index}: missing field(s) {missing}")
            columns = row["per_domain_predicted_class"]
            if not isinstance(columns, (list, tuple)):
                raise InvalidInputError(
                    f"prediction dump row {index}: per_domain_predicted_class must be a list, got {columns!r}"
                )
            if width is None:
                width = len(columns)
                if width == 0:
                    raise InvalidInputError(f"prediction dump row {index}: no per-domain predictions")
            elif len(columns) != width:
                raise InvalidInputError(
                    f"prediction dump row {index}: expected {width} per-domain predictions, got {len(columns)}"
                )
            if "alpha" in row:
                _check_alpha(row["alpha"], width, index)
            for name, value in (("true_class", row["true_class"]),
                                ("fused_predicted_class", row["fused_predicted_class"]),
                                *(("per_domain_predicted_class", c) for c in columns)):
                _check_class_id(value, name, index, num_classes)
        alpha = None
        if all("alpha" in row for row in rows):
            alpha = np.asarray([row["alpha"] for row in rows], dtype=np.float64)
        return cls(
            sample_ids=[str(row["sample_id"]) for row in rows],
            true_class=np.asarray([int(row["true_class"]) for row in rows], dtype=np.int64),
            per_domain=np.asarray([row["per_domain_predicted_class"] for row in rows], dtype=np.int64),
            fused=np.asarray([int(row["fused_predicted_class"]) for row in rows], dtype=np.int64),
            alpha=alpha,
            num_classes=num_classes,
            meta=dict(meta or {}),
        )

    @classmethod
    def from_document(cls, document: Dict[str, Any]) -> "PredictionDump":
        if not isinstance(document, dict) or "rows" not in document:
            raise InvalidInputError("prediction dump document needs a 'rows' list")
        meta = {k: v for k, v in document.items() if k != "rows"}
        return cls.from_rows(document["rows"], document.get("num_classes"), meta)


def per_prompt_accuracies(dump: PredictionDump) -> List[float]:
    if len(dump) == 0:
        raise InvalidInputError("prediction dump is empty")
    correct = dump.per_domain == dump.true_class[:, None]
    return correct.mean(axis=0).tolist()


def selection_upper_bound(dump: PredictionDump) -> float:
    """Fraction of samples where at least one latent domain's prompt is right."""
    if len(dump) == 0:
        raise InvalidInputError("prediction dump is empty")
    hits = (dump.per_domain == dump.true_class[:, None]).any(axis=1)
    return float(hits.mean())


def bound_report(dump: PredictionDump) -> Dict[str, Any]:
    u_sel = selection_upper_bound(dump)
    per_prompt = per_prompt_accuracies(dump)
    fused = float((dump.fused == dump.true_class).mean())
    if u_sel + 1e-12 < max(per_prompt):
        raise AssertionError("selection bound fell below a single prompt's accuracy")
    report: Dict[str, Any] = {
        "num_samples": len(dump),
        "num_domains": dump.num_domains,
        "U_sel": u_sel,
        "fused_accuracy": fused,
        "per_prompt_accuracy": per_prompt,
        "best_prompt_accuracy": max(per_prompt),
        "gap": u_sel - fused,
        "flags": [],
    }
    if report["gap"] < 0:
        report["flags"].append(NEGATIVE_GAP_FLAG)
        logger.warning(f"{NEGATIVE_GAP_FLAG}: fused {fused:.4f} > U_sel {u_sel:.4f}")
    return report


def plot_bound_report(report: Dict[str, Any], path: Union[str, Path], title: str = "Selection oracle") -> Path:
    """Bar chart of per-prompt accuracies, fused accuracy and U_sel."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"prompt {s}" for s in range(len(report["per_prompt_accuracy"]))] + ["fused", "U_sel"]
    values = [*report["per_prompt_accuracy"], report["fused_accuracy"], report["U_sel"]]
    colors = ["#9aa5b1"] * len(report["per_prompt_accuracy"]) + ["#2b6cb0", "#c05621"]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.5))
    bars = ax.bar(labels, [100.0 * v for v in values], color=colors)
    for bar, value in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, 100.0 * value + 0.5, f"{100.0 * value:.1f}",
                ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("Accuracy (%)")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Oracle plot written to {path}")
    return path
