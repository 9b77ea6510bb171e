import numpy as np
import pytest
import torch

from utils import dumps_stable, format_mean_std, mean_std, read_jsonl, to_jsonable, write_jsonl


def test_mean_std_uses_sample_deviation():
    stats = mean_std([0.8, 0.9, 1.0])
    assert stats["mean"] == pytest.approx(0.9)
    assert stats["std"] == pytest.approx(0.1)
    assert stats["n"] == 3
    assert mean_std([0.5])["std"] == 0.0
    with pytest.raises(ValueError):
        mean_std([])


def test_format_mean_std():
    assert format_mean_std({"mean": 0.8513, "std": 0.0042}) == "85.13 ± 0.42"


def test_to_jsonable_handles_arrays_and_tensors():
    value = {"a": np.int64(3), "b": np.array([1.5, 2.0]), "c": torch.tensor([1, 2]), 4: (np.float32(0.5),)}
    assert to_jsonable(value) == {"a": 3, "b": [1.5, 2.0], "c": [1, 2], "4": [0.5]}


def test_dumps_stable_ignores_key_order():
    assert dumps_stable({"b": 1, "a": 2}) == dumps_stable({"a": 2, "b": 1})


def test_jsonl_round_trip(tmp_path):
    records = [{"epoch": 0, "L_dsp": 0.5}, {"epoch": 1, "L_dsp": 0.25}]
    path = write_jsonl(records, tmp_path / "log.jsonl")
    assert read_jsonl(path) == records
