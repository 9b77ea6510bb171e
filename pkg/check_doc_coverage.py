#!/usr/bin/env python3
"""Check that docs/equation_map.md covers every model operation and that each entry resolves."""
import importlib
import re
import sys
from pathlib import Path
from typing import List

MAP_PATH = Path(__file__).parent / "docs" / "equation_map.md"

REQUIRED_OPERATIONS = [
    "core.cosine_similarity",
    "core.temperature_softmax",
    "encoders.toy_image_encode",
    "encoders.toy_text_encode",
    "encoders.external_encoder_adapter",
    "prompts.assemble_prompt",
    "prompts.compute_text_features",
    "prompts.classify",
    "latent_domain.extract_domain_feature",
    "latent_domain.adversarial_loss",
    "latent_domain.gradient_reversal",
    "latent_domain.kmeans_cluster",
    "latent_domain.stabilize_assignment",
    "latent_domain.assign_latent_domain",
    "training.lambda_schedule",
    "training.loss_dsp",
    "training.loss_dap",
    "training.total_loss",
    "training.train",
    "fusion.fusion_weights",
    "fusion.fuse_text_features",
    "fusion.predict",
    "oracle.selection_upper_bound",
    "oracle.bound_report",
    "data.generate_synthetic",
    "data.load_directory_dataset",
    "data.leave_one_domain_out_splits",
    "experiments.ExperimentManager.cmd_train",
    "experiments.cmd_eval",
    "experiments.cmd_oracle",
    "experiments.cmd_ablate",
    "experiments.cmd_inspect_clusters",
]

CODE_CELL = re.compile(r"^\|[^|]*\|\s*`([\w.]+)`\s*\|")


def mapped_entries(path: Path = MAP_PATH) -> List[str]:
    return [m.group(1) for line in path.read_text(encoding="utf-8").splitlines() if (m := CODE_CELL.match(line))]


def resolves(dotted: str) -> bool:
    module_name, *attrs = dotted.split(".")
    try:
        target = importlib.import_module(module_name)
    except ImportError:
        return False
    for attr in attrs:
        target = getattr(target, attr, None)
        if target is None:
            return False
    return callable(target)


def find_problems(path: Path = MAP_PATH) -> List[str]:
    entries = mapped_entries(path)
    problems = [f"not in map: {name}" for name in REQUIRED_OPERATIONS if name not in entries]
    problems += [f"does not resolve: {name}" for name in entries if not resolves(name)]
    return problems


def main() -> int:
    problems = find_problems()
    for problem in problems:
        print(problem)
    if not problems:
        print(f"{len(REQUIRED_OPERATIONS)} operations mapped")
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
