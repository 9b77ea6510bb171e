import math
import unittest
from unittest.mock import patch

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import core
from core import ConfigError, DatasetError, InvalidInputError, parameter_checksum
from data import SyntheticSpec, generate_synthetic
from encoders import ToyEncoderPair
from latent_domain import LatentDomainModel, LatentDomainState, adversarial_loss
from prompts import PromptBank, PromptMode, compute_text_features
from training import (
    TrainConfig,
    Trainer,
    TrainingBatch,
    TrainProgress,
    combined_loss_value,
    lambda_schedule,
    loss_dap,
    loss_dsp,
    total_loss,
    train,
)


def make_problem(m1=4, m2=8, seed=0):
    spec = SyntheticSpec(n_styles=2, num_classes=3, samples_per_cell=2, seed=seed)
    manifest = generate_synthetic(spec)
    enc = ToyEncoderPair(seed=seed, class_anchors=spec.class_centers())
    features = enc.encode_images(manifest.samples)
    labels = torch.as_tensor(manifest.class_ids(), dtype=torch.long)
    batch = TrainingBatch(features, labels, torch.arange(len(labels)))
    state = LatentDomainState(np.zeros((2, 4)), np.arange(len(labels)) % 2)
    bank = PromptBank(2, enc.class_tokens(manifest.classes), enc.embed_dim, m1=m1, m2=m2, seed=seed)
    return enc, bank, batch, state


class TestLambdaSchedule(unittest.TestCase):
    def test_known_values(self):
        self.assertEqual(lambda_schedule(0.0), 0.0)
        self.assertAlmostEqual(lambda_schedule(1.0), 0.99991, places=5)
        self.assertAlmostEqual(lambda_schedule(0.5), 0.98661, places=5)

    def test_strictly_increasing(self):
        values = [lambda_schedule(p) for p in np.linspace(0.0, 1.0, 50)]
        self.assertTrue(all(b > a for a, b in zip(values, values[1:])))

    def test_progress_bounds(self):
        self.assertEqual(TrainProgress(0.0).lam, 0.0)
        for bad in (-0.1, 1.1):
            with self.assertRaises(InvalidInputError):
                TrainProgress(bad)


class TestTrainConfig(unittest.TestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual((config.m1, config.m2, config.num_domains, config.epochs), (4, 8, 3, 30))
        self.assertEqual(config.tau_cls, 0.01)

    def test_validation(self):
        for bad in (TrainConfig(epochs=-1), TrainConfig(batch_size=0), TrainConfig(fusion_mode="bogus"),
                    TrainConfig(tau_cls=0.0), TrainConfig(val_fraction=1.0), TrainConfig(aux_learning_rate=0.0),
                    TrainConfig(extractor_learning_rate=0.0), TrainConfig(extractor_grad_clip=0.0)):
            with self.assertRaises(ConfigError):
                bad.validate()

    def test_effective_resolves_ablations(self):
        no_dsp = TrainConfig(no_dsp=True).effective()
        self.assertEqual((no_dsp.m2, no_dsp.fusion_mode), (0, "single:0"))
        no_dap = TrainConfig(no_dap=True).effective()
        self.assertEqual((no_dap.m1, no_dap.m2), (0, 8))
        self.assertEqual(TrainConfig().effective(), TrainConfig())


class TestLosses(unittest.TestCase):
    def setUp(self):
        self.enc, self.bank, self.batch, self.state = make_problem()

    def test_huge_temperature_gives_ln_k(self):
        value = loss_dsp(self.batch, self.bank, self.state, self.enc, tau=1e6)
        self.assertAlmostEqual(float(value), math.log(3), places=5)

    def test_single_sample_is_plain_cross_entropy(self):
        one = TrainingBatch(self.batch.image_features[:1], self.batch.class_labels[:1], self.batch.indices[:1])
        value = loss_dsp(one, self.bank, self.state, self.enc, tau=0.5)
        table = compute_text_features(self.bank, self.enc, PromptMode.DSP_ONLY)
        logits = core.cosine_similarity(one.image_features[0], table.features[0]) / 0.5
        expected = F.cross_entropy(logits[None], one.class_labels)
        self.assertAlmostEqual(float(value), float(expected), places=5)

    def test_unassigned_samples_are_rejected(self):
        state = LatentDomainState(self.state.centroids, np.full(len(self.state.assignments), -1))
        with self.assertRaises(InvalidInputError):
            loss_dsp(self.batch, self.bank, state, self.enc)
        short = LatentDomainState(self.state.centroids, self.state.assignments[:3])
        with self.assertRaises(InvalidInputError):
            loss_dap(self.batch, self.bank, short, self.enc)
        with self.assertRaises(InvalidInputError):
            loss_dsp(self.batch, self.bank, None, self.enc)

    def test_empty_agnostic_block_makes_dap_equal_dsp(self):
        enc, bank, batch, state = make_problem(m1=0)
        dsp = loss_dsp(batch, bank, state, enc, tau=0.1)
        dap = loss_dap(batch, bank, state, enc, tau=0.1)
        self.assertAlmostEqual(float(dsp), float(dap), places=6)

    def test_dap_does_not_reach_specific_tokens(self):
        loss_dap(self.batch, self.bank, self.state, self.enc, tau=0.1).backward()
        self.assertIsNotNone(self.bank.agnostic.grad)
        self.assertTrue(all(p.grad is None for p in self.bank.specific))


def test_total_loss_at_start_is_dsp():
    enc, bank, batch, state = make_problem()
    model = LatentDomainModel(enc.image_dim, 3, seed=0)
    breakdown = total_loss(batch, bank, state, enc, TrainProgress(0.0), model, tau=0.1)
    assert breakdown.lam == 0.0
    assert breakdown.value == pytest.approx(breakdown.l_dsp, abs=1e-12)


def test_total_loss_value_and_no_adv():
    enc, bank, batch, state = make_problem()
    model = LatentDomainModel(enc.image_dim, 3, seed=0)
    progress = TrainProgress(0.5)
    full = total_loss(batch, bank, state, enc, progress, model, tau=0.1)
    assert full.value == pytest.approx(full.l_dsp + progress.lam * (full.l_dap - full.l_adv), rel=1e-9)
    no_adv = total_loss(batch, bank, state, enc, progress, tau=0.1, no_adv=True)
    assert no_adv.l_adv is None
    assert no_adv.value == pytest.approx(no_adv.l_dsp + progress.lam * no_adv.l_dap, rel=1e-9)
    with pytest.raises(InvalidInputError):
        total_loss(batch, bank, state, enc, progress, None, tau=0.1)


def test_total_loss_backward_contract():
    enc, bank, batch, state = make_problem()
    model = LatentDomainModel(enc.image_dim, 3, seed=0)
    progress = TrainProgress(0.3)
    lam = progress.lam
    total_loss(batch, bank, state, enc, progress, model, tau=0.1).objective.backward()
    aux_grads = [p.grad.clone() for p in model.aux.parameters()]
    extractor_grads = [p.grad.clone() for p in model.extractor.parameters()]
    specific_grad = bank.specific[0].grad.clone()
    agnostic_grad = bank.agnostic.grad.clone()

    model.zero_grad(set_to_none=True)
    bank.zero_grad(set_to_none=True)
    adversarial_loss(model.aux, model.embed(batch.image_features), batch.class_labels).backward()
    for got, plain in zip(aux_grads, model.aux.parameters()):
        assert torch.allclose(got, plain.grad, rtol=1e-5, atol=1e-8)
    for got, plain in zip(extractor_grads, model.extractor.parameters()):
        assert torch.allclose(got, -lam * plain.grad, rtol=1e-5, atol=1e-8)

    loss_dsp(batch, bank, state, enc, tau=0.1).backward()
    assert torch.allclose(specific_grad, bank.specific[0].grad, rtol=1e-5, atol=1e-8)
    assert bank.agnostic.grad is None
    loss_dap(batch, bank, state, enc, tau=0.1).backward()
    assert torch.allclose(agnostic_grad, lam * bank.agnostic.grad, rtol=1e-5, atol=1e-8)


class TestTrainer:
    def test_zero_epochs_returns_initial_prompts(self, small_split, toy_encoder):
        result = train(small_split.train, TrainConfig(epochs=0), toy_encoder)
        fresh = PromptBank(3, toy_encoder.class_tokens(small_split.train.classes), toy_encoder.embed_dim, seed=0)
        assert result.log == []
        assert parameter_checksum(result.bank) == parameter_checksum(fresh)
        assert len(result.state.assignments) == len(small_split.train)

    def test_log_records(self, small_split, toy_encoder, quick_config):
        result = train(small_split.train, quick_config, toy_encoder)
        assert [r["epoch"] for r in result.log] == [0, 1]
        for record in result.log:
            for key in ("L_dsp", "L_dap", "L_adv", "lambda", "total", "inertia", "cluster_sizes",
                        "class_mutual_information", "train_accuracy"):
                assert key in record
            assert all(math.isfinite(record[k]) for k in ("L_dsp", "L_dap", "L_adv", "total"))
            assert sum(record["cluster_sizes"]) == len(small_split.train)
        assert result.log[0]["lambda"] == 0.0
        assert result.log[1]["lambda"] == pytest.approx(lambda_schedule(0.5))

    def test_runs_are_deterministic(self, small_split, toy_encoder, quick_config):
        first = train(small_split.train, quick_config, toy_encoder)
        second = train(small_split.train, quick_config, toy_encoder)
        assert parameter_checksum(first.bank) == parameter_checksum(second.bank)
        assert parameter_checksum(first.latent_model) == parameter_checksum(second.latent_model)
        assert np.array_equal(first.state.assignments, second.state.assignments)
        assert first.log == second.log

    def test_encoder_stays_frozen(self, small_split, toy_encoder, quick_config):
        before = parameter_checksum(toy_encoder)
        train(small_split.train, quick_config, toy_encoder)
        assert parameter_checksum(toy_encoder) == before

    def test_stages_update_disjoint_parameters(self, small_split, toy_encoder, quick_config):
        trainer = Trainer(small_split.train.samples, small_split.train.classes, quick_config, toy_encoder)
        trainer.state = trainer._cluster()
        agnostic = parameter_checksum([trainer.bank.agnostic])
        specific = parameter_checksum(list(trainer.bank.specific))
        latent = parameter_checksum(trainer.latent_model)

        trainer._stage_one(0, 0.5)
        assert parameter_checksum([trainer.bank.agnostic]) == agnostic
        assert parameter_checksum(list(trainer.bank.specific)) != specific
        assert parameter_checksum(trainer.latent_model) != latent

        specific = parameter_checksum(list(trainer.bank.specific))
        latent = parameter_checksum(trainer.latent_model)
        trainer._stage_two(0, 0.5)
        assert parameter_checksum([trainer.bank.agnostic]) != agnostic
        assert parameter_checksum(list(trainer.bank.specific)) == specific
        assert parameter_checksum(trainer.latent_model) == latent

    def test_stage_one_clips_extractor_gradients(self, small_split, toy_encoder, quick_config):
        trainer = Trainer(small_split.train.samples, small_split.train.classes, quick_config, toy_encoder)
        trainer.state = trainer._cluster()
        assert trainer.aux_opt.param_groups[0]["initial_lr"] == pytest.approx(0.05)
        assert trainer.extractor_opt.param_groups[0]["initial_lr"] == pytest.approx(0.005)
        with patch("torch.nn.utils.clip_grad_norm_", wraps=torch.nn.utils.clip_grad_norm_) as clip:
            trainer._stage_one(0, 0.5)
        assert clip.call_count > 0
        assert all(call.args[1] == quick_config.extractor_grad_clip for call in clip.call_args_list)

    def test_no_adv_leaves_domain_model_untouched(self, small_split, toy_encoder, quick_config):
        config = TrainConfig(**{**quick_config.to_dict(), "no_adv": True})
        result = train(small_split.train, config, toy_encoder)
        fresh = LatentDomainModel(toy_encoder.image_dim, small_split.train.num_classes, seed=0)
        assert parameter_checksum(result.latent_model) == parameter_checksum(fresh)
        assert all(record["L_adv"] is None for record in result.log)

    def test_no_dap_skips_stage_two(self, small_split, toy_encoder, quick_config):
        config = TrainConfig(**{**quick_config.to_dict(), "no_dap": True})
        result = train(small_split.train, config, toy_encoder)
        assert result.bank.m1 == 0
        assert all(record["L_dap"] is None for record in result.log)

    def test_validation_split_reports_accuracy(self, small_split, toy_encoder, quick_config):
        config = TrainConfig(**{**quick_config.to_dict(), "val_fraction": 0.25})
        result = train(small_split.train, config, toy_encoder)
        assert all(0.0 <= record["val_accuracy"] <= 1.0 for record in result.log)

    def test_training_never_reads_domains(self, small_split, toy_encoder, quick_config):
        with patch("training.allow_domain_access", wraps=core.allow_domain_access) as guard:
            train(small_split.train, quick_config, toy_encoder)
        guard.assert_not_called()

    def test_no_clustering_uses_annotations(self, small_split, toy_encoder, quick_config):
        config = TrainConfig(**{**quick_config.to_dict(), "no_clustering": True})
        with patch("training.allow_domain_access", wraps=core.allow_domain_access) as guard:
            result = train(small_split.train, config, toy_encoder)
        guard.assert_called_once()
        _, expected = np.unique(small_split.train.domain_ids(), return_inverse=True)
        assert np.array_equal(result.state.assignments, expected)
        assert result.state.num_domains == 2

    def test_degenerate_datasets(self, small_split, toy_encoder, quick_config):
        one_class = small_split.train.subset(np.flatnonzero(small_split.train.class_ids() == 0).tolist())
        with pytest.raises(DatasetError):
            train(one_class, quick_config, toy_encoder)
        with pytest.raises(DatasetError):
            train(small_split.train.subset([0, 20]), quick_config, toy_encoder)


class FramedToyEncoderPair(ToyEncoderPair):
    framing_tokens = 2


def test_prompt_bank_uses_the_encoder_prompt_capacity(small_split, small_spec):
    enc = FramedToyEncoderPair(seed=0, max_context_length=15, class_anchors=small_spec.class_centers())
    trainer = Trainer(small_split.train.samples, small_split.train.classes, TrainConfig(epochs=0), enc)
    assert trainer.bank.max_context_length == 13
    tight = FramedToyEncoderPair(seed=0, max_context_length=14, class_anchors=small_spec.class_centers())
    with pytest.raises(InvalidInputError, match="exceeds the 12-token context"):
        Trainer(small_split.train.samples, small_split.train.classes, TrainConfig(epochs=0), tight)


def test_logged_total_uses_the_combined_loss(small_split, toy_encoder, quick_config):
    result = train(small_split.train, quick_config, toy_encoder)
    for record in result.log:
        expected = record["L_dsp"] + record["lambda"] * (record["L_dap"] - record["L_adv"])
        assert record["total"] == pytest.approx(expected, rel=1e-12)
        assert record["total"] == combined_loss_value(record["L_dsp"], record["L_dap"], record["L_adv"], record["lambda"])
    assert combined_loss_value(1.5, None, None, 0.7) == 1.5
