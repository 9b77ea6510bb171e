import unittest

import numpy as np
import pytest

from core import InvalidInputError, numpy_generator
from oracle import (
    NEGATIVE_GAP_FLAG,
    PredictionDump,
    bound_report,
    per_prompt_accuracies,
    plot_bound_report,
    selection_upper_bound,
)


def make_rows(true_class, per_domain, fused=None):
    fused = true_class if fused is None else fused
    return [
        {
            "sample_id": f"x{i}",
            "true_class": int(t),
            "per_domain_predicted_class": [int(c) for c in columns],
            "fused_predicted_class": int(f),
        }
        for i, (t, columns, f) in enumerate(zip(true_class, per_domain, fused))
    ]


def random_dump(seed, n=40, num_domains=3, num_classes=4):
    rng = numpy_generator(seed, "dump")
    true_class = rng.integers(0, num_classes, size=n)
    per_domain = rng.integers(0, num_classes, size=(n, num_domains))
    fused = rng.integers(0, num_classes, size=n)
    return PredictionDump.from_rows(make_rows(true_class, per_domain, fused), num_classes)


class TestSelectionUpperBound(unittest.TestCase):
    def test_four_sample_example(self):
        # A: both right, B: only the first, C: only the second, D: neither
        dump = PredictionDump.from_rows(make_rows([0, 1, 2, 3], [[0, 0], [1, 0], [0, 2], [0, 0]]))
        self.assertEqual(selection_upper_bound(dump), 0.75)
        self.assertEqual(per_prompt_accuracies(dump), [0.5, 0.5])

    def test_all_correct(self):
        dump = PredictionDump.from_rows(make_rows([0, 1, 2], [[0, 0], [1, 1], [2, 2]]))
        self.assertEqual(selection_upper_bound(dump), 1.0)

    def test_single_domain_equals_its_accuracy(self):
        dump = PredictionDump.from_rows(make_rows([0, 1, 2, 1], [[0], [0], [2], [1]]))
        self.assertEqual(selection_upper_bound(dump), per_prompt_accuracies(dump)[0])

    def test_empty_dump(self):
        with self.assertRaises(InvalidInputError):
            PredictionDump.from_rows([])


@pytest.mark.parametrize("seed", range(20))
def test_bound_matches_a_row_scan(seed):
    dump = random_dump(seed)
    hits = 0
    for t, columns in zip(dump.true_class, dump.per_domain):
        hits += int(any(c == t for c in columns))
    assert selection_upper_bound(dump) == pytest.approx(hits / len(dump))
    assert selection_upper_bound(dump) >= max(per_prompt_accuracies(dump))


@pytest.mark.parametrize("seed", range(10))
def test_bound_ignores_column_order(seed):
    dump = random_dump(seed)
    order = numpy_generator(seed, "permute").permutation(dump.num_domains)
    shuffled = PredictionDump(dump.sample_ids, dump.true_class, dump.per_domain[:, order], dump.fused)
    assert selection_upper_bound(shuffled) == selection_upper_bound(dump)


@pytest.mark.parametrize("seed", range(10))
def test_bound_grows_with_more_prompts(seed):
    dump = random_dump(seed, num_domains=4)
    previous = 0.0
    for width in range(1, 5):
        narrower = PredictionDump(dump.sample_ids, dump.true_class, dump.per_domain[:, :width], dump.fused)
        bound = selection_upper_bound(narrower)
        assert bound >= previous
        previous = bound


class TestBoundReport(unittest.TestCase):
    def test_fields(self):
        dump = PredictionDump.from_rows(make_rows([0, 1, 2, 3], [[0, 0], [1, 0], [0, 2], [0, 0]], [0, 1, 0, 0]))
        report = bound_report(dump)
        self.assertEqual(report["num_samples"], 4)
        self.assertEqual(report["num_domains"], 2)
        self.assertEqual(report["U_sel"], 0.75)
        self.assertEqual(report["fused_accuracy"], 0.5)
        self.assertEqual(report["best_prompt_accuracy"], 0.5)
        self.assertAlmostEqual(report["gap"], 0.25)
        self.assertEqual(report["flags"], [])

    def test_negative_gap_is_flagged(self):
        dump = PredictionDump.from_rows(make_rows([0, 1], [[1], [1]], [0, 1]))
        report = bound_report(dump)
        self.assertLess(report["gap"], 0)
        self.assertEqual(report["flags"], [NEGATIVE_GAP_FLAG])


class TestMalformedDumps(unittest.TestCase):
    def test_missing_field_names_the_row(self):
        rows = make_rows([0, 1], [[0, 1], [1, 1]])
        del rows[1]["fused_predicted_class"]
        with self.assertRaisesRegex(InvalidInputError, "row 1"):
            PredictionDump.from_rows(rows)

    def test_ragged_columns(self):
        rows = make_rows([0, 1], [[0, 1], [1, 1]])
        rows[1]["per_domain_predicted_class"] = [1]
        with self.assertRaisesRegex(InvalidInputError, "row 1"):
            PredictionDump.from_rows(rows)

    def test_class_out_of_range(self):
        rows = make_rows([0, 5], [[0, 1], [1, 1]])
        with self.assertRaisesRegex(InvalidInputError, "row 1"):
            PredictionDump.from_rows(rows, num_classes=3)

    def test_wrongly_typed_values_name_the_row(self):
        for field, value in (("per_domain_predicted_class", 3), ("true_class", "cat"),
                             ("per_domain_predicted_class", [0, None]), ("fused_predicted_class", True)):
            rows = make_rows([0, 1], [[0, 1], [1, 1]])
            rows[1][field] = value
            with self.subTest(field=field, value=value):
                with self.assertRaisesRegex(InvalidInputError, "row 1"):
                    PredictionDump.from_rows(rows)

    def test_malformed_alpha_names_the_row(self):
        rows = make_rows([0, 1], [[0, 1], [1, 1]])
        rows[0]["alpha"] = [0.5, 0.5]
        rows[1]["alpha"] = [0.5, "half"]
        with self.assertRaisesRegex(InvalidInputError, "row 1"):
            PredictionDump.from_rows(rows)

    def test_document_needs_rows(self):
        with self.assertRaises(InvalidInputError):
            PredictionDump.from_document({"num_classes": 3})
        dump = PredictionDump.from_document({"num_classes": 2, "target": "style_0", "rows": make_rows([0], [[0]])})
        self.assertEqual(dump.meta, {"num_classes": 2, "target": "style_0"})


def test_plot_writes_png(tmp_path):
    report = bound_report(PredictionDump.from_rows(make_rows([0, 1, 2], [[0, 1], [1, 1], [0, 0]])))
    path = plot_bound_report(report, tmp_path / "plots" / "oracle.png")
    assert path.exists()
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
