import json
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import typer
from loguru import logger
from typer.testing import CliRunner

from main import EXIT_USAGE, USAGE_ERRORS, app, fail, main


class TestMainCLI(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        # One zero-epoch training run shared by the read-only commands.
        cls.runner = CliRunner()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.run_dir = Path(cls._tmp.name) / "run"
        cls.train_result = cls.runner.invoke(
            app, ['train', '--epochs', '0', '--seed', '0', '--split', 'style_0', '--out', str(cls.run_dir)]
        )

    @classmethod
    def tearDownClass(cls):
        logger.remove()
        cls._tmp.cleanup()

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp(dir=self._tmp.name))

    def test_train_writes_run_files(self):
        self.assertEqual(self.train_result.exit_code, 0, self.train_result.output)
        self.assertIn('Wrote 1 checkpoint(s)', self.train_result.output)
        self.assertTrue((self.run_dir / 'config.yaml').exists())
        self.assertTrue((self.run_dir / 'manifest.json').exists())
        self.assertTrue((self.run_dir / 'seed_0' / 'style_0' / 'checkpoint.json').exists())
        self.assertTrue((self.run_dir / 'seed_0' / 'style_0' / 'train_log.jsonl').exists())
        runs = json.loads((self.run_dir / 'runs.json').read_text())
        self.assertEqual(runs['runs'][0]['target_name'], 'style_0')

    def test_train_missing_dataset_root(self):
        result = self.runner.invoke(app, ['train', '--dataset', str(self.tmp / 'nowhere'), '--out', str(self.tmp)])
        self.assertEqual(result.exit_code, 1)
        self.assertIn('missing root', result.output)

    def test_train_bogus_fusion_mode(self):
        result = self.runner.invoke(app, ['train', '--fusion-mode', 'bogus', '--out', str(self.tmp)])
        self.assertEqual(result.exit_code, 1)
        self.assertIn('fusion.mode', result.output)

    def test_train_unknown_split(self):
        result = self.runner.invoke(
            app, ['train', '--epochs', '0', '--split', 'style_9', '--out', str(self.tmp)]
        )
        self.assertEqual(result.exit_code, 1)
        self.assertIn('unknown split', result.output)

    def test_eval_then_oracle(self):
        out = self.tmp / 'eval'
        result = self.runner.invoke(app, ['eval', str(self.run_dir), '--split', 'style_0', '--out', str(out)])
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads((out / 'eval_report.json').read_text())
        self.assertEqual(report['fusion_modes'], ['similarity', 'greedy', 'average'])
        self.assertIn('zero_shot', report['summary'])
        dump = out / 'predictions' / 'style_0_seed0_similarity.json'
        self.assertEqual(len(json.loads(dump.read_text())['rows']), 200)

        result = self.runner.invoke(app, ['oracle', str(dump), '--plot'])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn('U_sel', result.output)
        oracle = json.loads((dump.parent / 'oracle_style_0_seed0_similarity.json').read_text())
        self.assertGreaterEqual(oracle['U_sel'], oracle['best_prompt_accuracy'])
        self.assertTrue((dump.parent / 'oracle_style_0_seed0_similarity.png').exists())

    def test_eval_unknown_split(self):
        result = self.runner.invoke(app, ['eval', str(self.run_dir), '--split', 'style_2', '--out', str(self.tmp)])
        self.assertEqual(result.exit_code, 1)

    def test_oracle_malformed_dump(self):
        dump = self.tmp / 'bad.json'
        dump.write_text(json.dumps({'rows': [{'sample_id': 'a'}]}))
        result = self.runner.invoke(app, ['oracle', str(dump)])
        self.assertEqual(result.exit_code, 1)
        self.assertIn('row 0', result.output)

    def test_inspect_clusters(self):
        result = self.runner.invoke(app, ['inspect-clusters', str(self.run_dir), '--out', str(self.tmp)])
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads((self.tmp / 'clusters_report.json').read_text())
        cluster = report['clusters'][0]
        self.assertEqual(sum(cluster['cluster_sizes']), 400)
        self.assertEqual(cluster['assignment_consistency'], 1.0)
        for key in ('agreement', 'adjusted_rand_index', 'class_mutual_information'):
            self.assertIn(key, cluster)

    def test_ablate(self):
        out = self.tmp / 'ablate'
        result = self.runner.invoke(app, [
            'ablate', '--epochs', '1', '--split', 'style_0', '--seed', '0',
            '--variant', 'full', '--variant', 'no_dsp', '--out', str(out),
        ])
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads((out / 'ablation' / 'ablation_report.json').read_text())
        self.assertEqual(report['variants'], ['full', 'no_dsp'])
        for key in ('full', 'no_dsp', 'full_agreement', 'no_dsp_agreement'):
            self.assertIn(key, report['summary'])

    def test_ablate_unknown_variant(self):
        result = self.runner.invoke(app, ['ablate', '--variant', 'no_prompts', '--out', str(self.tmp)])
        self.assertEqual(result.exit_code, 1)


def test_console_script_maps_usage_errors(tmp_path):
    with patch.object(sys, 'argv', ['ldpf', 'train', '--no-such-flag']):
        try:
            main()
        except SystemExit as e:
            assert e.code == 1
        else:
            raise AssertionError("main() did not exit")
    logger.remove()


def test_typer_usage_errors_exit_with_usage_code():
    assert any(isinstance(typer.BadParameter("bad"), cls) for cls in USAGE_ERRORS)
    try:
        fail(typer.BadParameter("bad value"))
    except typer.Exit as e:
        assert e.exit_code == EXIT_USAGE
    else:
        raise AssertionError("fail() did not exit")
    logger.remove()


def test_console_script_runtime_config_error(tmp_path):
    with patch.object(sys, 'argv', ['ldpf', 'train', '--dataset', str(tmp_path / 'absent'), '--out', str(tmp_path)]):
        try:
            main()
        except SystemExit as e:
            assert e.code == 1
        else:
            raise AssertionError("main() did not exit")
    logger.remove()


if __name__ == '__main__':
    unittest.main()
