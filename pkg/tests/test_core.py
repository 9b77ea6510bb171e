import math
import unittest

import numpy as np
import pytest
import torch

from core import (
    DegenerateVectorError,
    DomainAccessError,
    InvalidInputError,
    allow_domain_access,
    cosine_similarity,
    derive_seed,
    domain_access_allowed,
    l2_normalize,
    parameter_checksum,
    temperature_softmax,
    torch_generator,
    validate_simplex,
)
from encoders import ToyImage


class TestSeeds(unittest.TestCase):
    def test_derive_seed_is_deterministic(self):
        self.assertEqual(derive_seed(7, "kmeans", 1), derive_seed(7, "kmeans", 1))

    def test_derive_seed_separates_purposes(self):
        self.assertNotEqual(derive_seed(7, "kmeans", 1), derive_seed(7, "kmeans", 2))
        self.assertNotEqual(derive_seed(7, "kmeans"), derive_seed(8, "kmeans"))

    def test_derive_seed_rejects_negative(self):
        with self.assertRaises(InvalidInputError):
            derive_seed(-1)

    def test_torch_generator_reproducible(self):
        a = torch.randn(5, generator=torch_generator(1, "x"))
        b = torch.randn(5, generator=torch_generator(1, "x"))
        self.assertTrue(torch.equal(a, b))


class TestTemperatureSoftmax(unittest.TestCase):
    def test_sums_to_one(self):
        logits = torch.randn(4, 7, generator=torch_generator(0, "t"))
        probs = temperature_softmax(logits, 0.5)
        self.assertTrue(torch.allclose(probs.sum(dim=-1), torch.ones(4), atol=1e-6))

    def test_shift_invariant(self):
        logits = torch.tensor([0.3, -1.2, 2.0])
        self.assertTrue(torch.allclose(temperature_softmax(logits, 0.1), temperature_softmax(logits + 5.0, 0.1), atol=1e-6))

    def test_known_value(self):
        probs = temperature_softmax(torch.tensor([1.0, 0.0, 0.0]), 1.0)
        expected = math.e / (math.e + 2)
        self.assertAlmostEqual(float(probs[0]), expected, places=5)

    def test_large_logits_do_not_overflow(self):
        probs = temperature_softmax(torch.tensor([1.0, 0.9]), 1e-4)
        self.assertTrue(bool(torch.isfinite(probs).all()))
        self.assertAlmostEqual(float(probs[0]), 1.0, places=6)

    def test_rejects_bad_temperature(self):
        for tau in (0.0, -1.0, float("nan")):
            with self.assertRaises(InvalidInputError):
                temperature_softmax(torch.tensor([1.0]), tau)

    def test_rejects_empty_and_nonfinite(self):
        with self.assertRaises(InvalidInputError):
            temperature_softmax(torch.tensor([]), 1.0)
        with self.assertRaises(InvalidInputError):
            temperature_softmax(torch.tensor([1.0, float("inf")]), 1.0)


class TestVectors(unittest.TestCase):
    def test_cosine_of_orthogonal_and_parallel(self):
        self.assertAlmostEqual(float(cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0]))), 0.0)
        self.assertAlmostEqual(float(cosine_similarity(torch.tensor([2.0, 2.0]), torch.tensor([1.0, 1.0]))), 1.0, places=6)

    def test_cosine_broadcasts(self):
        a = torch.randn(3, 1, 4, generator=torch_generator(0, "a"))
        b = torch.randn(5, 4, generator=torch_generator(0, "b"))
        self.assertEqual(tuple(cosine_similarity(a, b).shape), (3, 5))

    def test_cosine_degenerate(self):
        with self.assertRaises(DegenerateVectorError) as context:
            cosine_similarity(torch.zeros(3), torch.ones(3))
        self.assertIn("degenerate feature vector", str(context.exception))

    def test_cosine_dimension_mismatch(self):
        with self.assertRaises(InvalidInputError):
            cosine_similarity(torch.ones(3), torch.ones(4))

    def test_l2_normalize(self):
        x = l2_normalize(torch.tensor([[3.0, 4.0]]))
        self.assertTrue(torch.allclose(x, torch.tensor([[0.6, 0.8]])))
        with self.assertRaises(DegenerateVectorError):
            l2_normalize(torch.zeros(2, 2))

    def test_validate_simplex(self):
        validate_simplex(torch.tensor([0.2, 0.8]))
        with self.assertRaises(InvalidInputError):
            validate_simplex(torch.tensor([0.5, 0.6]))
        with self.assertRaises(InvalidInputError):
            validate_simplex(torch.tensor([1.5, -0.5]))


def test_parameter_checksum_tracks_changes():
    module = torch.nn.Linear(3, 2)
    before = parameter_checksum(module)
    assert parameter_checksum(module) == before
    with torch.no_grad():
        module.weight[0, 0] += 1.0
    assert parameter_checksum(module) != before


def test_parameter_checksum_ignores_mapping_order():
    a, b = torch.ones(2), torch.zeros(3)
    assert parameter_checksum({"a": a, "b": b}) == parameter_checksum({"b": b, "a": a})


def test_domain_guard_trips_outside_allowed_context():
    image = ToyImage("x", np.zeros(4), 0, 2)
    assert not domain_access_allowed()
    with pytest.raises(DomainAccessError):
        _ = image.annotated_domain_id
    with pytest.raises(DomainAccessError):
        _ = image.true_style_id


def test_domain_guard_opens_and_closes():
    image = ToyImage("x", np.zeros(4), 0, 2)
    with allow_domain_access("test"):
        assert domain_access_allowed()
        assert image.annotated_domain_id == 2
    assert not domain_access_allowed()
