from json import loads
from logging import disable as set_logger, INFO, CRITICAL
from os import path
from pathlib import Path
from shutil import rmtree
from unittest import TestCase
from unittest.mock import patch

from click.testing import CliRunner

from sparsevd.cli import (
        cli, CHECKPOINT_ERROR, CONFIG_ERROR, DATA_ERROR, DIVERGENCE, OK)
from sparsevd.utils.datatext import generate_dataset
from sparsevd.utils.validation import DivergenceError

TEMPORARY_DATA_DIR = './tests/tmp/'
DATA_PREFIX = ''.join([TEMPORARY_DATA_DIR, 'data/corpus'])
SIZES = {'train': 3000, 'valid': 500, 'test': 500}
RUN_SETTINGS = ('TASK=charlm', 'DATA={}'.format(DATA_PREFIX),
                'SEQ_LENGTH=20', 'HIDDEN_SIZE=8', 'BATCH_SIZE=32',
                'EPOCHS=2', 'LEARNING_RATE=0.01', 'CLIP_THRESHOLD=1')
MANIFEST_FIELDS = ('runId', 'startedAt', 'finishedAt', 'config',
                   'finalMetrics', 'bestEpoch', 'artifacts', 'versions')


def read(filename):
    with open(filename, 'rb') as file:
        return file.read()


class TestCliTrain(TestCase):
    '''Tests for sparsevd train'''

    def setUp(self):
        # susspress logging messages
        set_logger(CRITICAL)
        # create temporary data dir
        Path(TEMPORARY_DATA_DIR).mkdir(exist_ok=True)
        Path(path.dirname(DATA_PREFIX)).mkdir(exist_ok=True)
        generate_dataset('charlm', DATA_PREFIX, SIZES, seed=0)
        self.runner = CliRunner()

    def tearDown(self):
        # set logging to INFO
        set_logger(INFO)
        # remove temporary data dir
        rmtree(TEMPORARY_DATA_DIR, ignore_errors=True)

    def train(self, name, *options):
        out_dir = ''.join([TEMPORARY_DATA_DIR, name])
        result = self.runner.invoke(
                cli, ['train', '--out', out_dir] + list(RUN_SETTINGS) +
                list(options))
        return result, out_dir

    def test_train_sparse_vd(self):
        result, out_dir = self.train('sparse', 'MODE=sparse-vd')

        self.assertEqual(result.exit_code, OK, result.output)
        self.assertIn('checkpoint:', result.output)
        with open(path.join(out_dir, 'manifest.json')) as file:
            manifest = loads(file.read())
        for field in MANIFEST_FIELDS:
            self.assertIn(field, manifest)
        self.assertEqual(len(manifest['runId']), 7)
        self.assertEqual(manifest['bestEpoch'], 2)
        self.assertEqual(manifest['config']['mode'], 'sparse-vd')
        self.assertEqual(manifest['finalMetrics']['epoch'], 2)
        self.assertIsNotNone(manifest['finalMetrics']['sparsityH'])
        for artifact in manifest['artifacts'].values():
            self.assertTrue(path.exists(artifact))
        self.assertIn('numpy', manifest['versions'])

    def test_train_writes_every_epoch(self):
        result, out_dir = self.train('dense', 'MODE=none')

        self.assertEqual(result.exit_code, OK, result.output)
        with open(path.join(out_dir, 'metrics.jsonl')) as file:
            records = [loads(line) for line in file]
        self.assertEqual([record['epoch'] for record in records], [0, 1, 2])
        self.assertIsNone(records[0]['trainLoss'])
        self.assertIsNone(records[-1]['testQualityPruned'])
        self.assertTrue(path.isfile(path.join(out_dir, 'best.npz')))

    def test_train_manifest_follows_best_checkpoint(self):
        result, out_dir = self.train('dense', 'MODE=none')

        self.assertEqual(result.exit_code, OK, result.output)
        with open(path.join(out_dir, 'manifest.json')) as file:
            manifest = loads(file.read())
        final = manifest['finalMetrics']
        self.assertTrue(manifest['artifacts']['checkpoint'].endswith(
            'best.npz'))
        self.assertEqual(final['epoch'], manifest['bestEpoch'])
        self.assertIn('test bpc: {}'.format(final['testQuality']),
                      result.output)

    def test_train_is_deterministic(self):
        first, first_dir = self.train('first', 'MODE=sparse-vd', '--seed',
                                      '4')
        second, second_dir = self.train('second', 'MODE=sparse-vd',
                                        '--seed', '4')

        self.assertEqual(first.exit_code, OK, first.output)
        self.assertEqual(second.exit_code, OK, second.output)
        self.assertEqual(read(path.join(first_dir, 'metrics.jsonl')),
                         read(path.join(second_dir, 'metrics.jsonl')))

    def test_train_seed_changes_run(self):
        first, first_dir = self.train('first', '--seed', '1')
        second, second_dir = self.train('second', '--seed', '2')

        self.assertEqual(first.exit_code, OK, first.output)
        self.assertEqual(second.exit_code, OK, second.output)
        self.assertNotEqual(read(path.join(first_dir, 'metrics.jsonl')),
                            read(path.join(second_dir, 'metrics.jsonl')))

    def test_train_config_echo_reruns(self):
        result, out_dir = self.train('first', 'MODE=vbd')
        echo = path.join(out_dir, 'config.cfg')
        again = ''.join([TEMPORARY_DATA_DIR, 'again'])

        rerun = self.runner.invoke(
                cli, ['train', '--config', echo, '--out', again])

        self.assertEqual(result.exit_code, OK, result.output)
        self.assertEqual(rerun.exit_code, OK, rerun.output)
        self.assertEqual(read(path.join(out_dir, 'metrics.jsonl')),
                         read(path.join(again, 'metrics.jsonl')))

    def test_train_init_from(self):
        result, out_dir = self.train('dense', 'MODE=none')
        checkpoint = path.join(out_dir, 'checkpoint.npz')

        sparse, _ = self.train('sparse', 'MODE=sparse-vd', '--init-from',
                               checkpoint)

        self.assertEqual(result.exit_code, OK, result.output)
        self.assertEqual(sparse.exit_code, OK, sparse.output)

    def test_train_init_from_missing(self):
        result, _ = self.train('sparse', 'MODE=sparse-vd', '--init-from',
                               ''.join([TEMPORARY_DATA_DIR, 'none.npz']))

        self.assertEqual(result.exit_code, CHECKPOINT_ERROR)

    def test_train_zero_learning_rate(self):
        result, out_dir = self.train('broken', 'learningRate=0')

        self.assertEqual(result.exit_code, CONFIG_ERROR)
        self.assertIn('LEARNING_RATE', result.output)
        self.assertFalse(path.exists(path.join(out_dir, 'metrics.jsonl')))

    def test_train_malformed_override(self):
        result, _ = self.train('broken', 'EPOCHS')

        self.assertEqual(result.exit_code, CONFIG_ERROR)

    def test_train_unknown_key(self):
        result, _ = self.train('broken', 'DROPOUT=0.5')

        self.assertEqual(result.exit_code, CONFIG_ERROR)
        self.assertIn('DROPOUT', result.output)

    def test_train_missing_data(self):
        result, _ = self.train(
                'broken', 'DATA={}'.format(
                    ''.join([TEMPORARY_DATA_DIR, 'missing'])))

        self.assertEqual(result.exit_code, DATA_ERROR)

    def test_train_divergence(self):
        with patch('sparsevd.utils.trainer.train_epoch') as train_epoch:
            train_epoch.side_effect = DivergenceError('non-finite loss')
            result, out_dir = self.train('diverged', 'MODE=sparse-vd')

        self.assertEqual(result.exit_code, DIVERGENCE)
        self.assertIn('non-finite loss', result.output)
        self.assertTrue(path.isfile(path.join(out_dir, 'checkpoint.npz')))
        self.assertFalse(path.exists(path.join(out_dir, 'manifest.json')))
