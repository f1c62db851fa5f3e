from dataclasses import replace
from logging import disable as set_logger, INFO, CRITICAL
from os import path
from pathlib import Path
from shutil import rmtree
from unittest import TestCase
from unittest.mock import patch

import numpy as np
from scipy.special import log_softmax

from sparsevd.utils.config import TrainConfig
from sparsevd.utils.datatext import (
        build_vocab, CharBatch, DataError, RegBatch, TaskData)
from sparsevd.utils.ndmath import backward, Graph, Rng, ShapeError, Tensor
from sparsevd.utils.sparsity import (
        compute_log_alpha, kl_total, LOG_ALPHA_CLAMP)
from sparsevd.utils.trainer import (
        adam_step, build_model, clip_gradients, elbo_loss, evaluate,
        init_from_checkpoint, load_checkpoint, model_from_checkpoint,
        named_gradients, save_checkpoint, train, AdamState, CheckpointError,
        DivergenceError, TrainResult)
from sparsevd.utils.varlayers import NoisePlan, SequenceModel

TEMPORARY_DATA_DIR = './tests/tmp/'
TEXT = 'the quick brown fox jumps over the lazy dog. ' * 6


def char_data(text=TEXT, seq_length=10, splits=('train', 'valid', 'test')):
    vocab = build_vocab(text)
    encoded = vocab.encode(text)
    return TaskData('charlm', vocab, {split: encoded for split in splits},
                    seq_length)


def sentiment_data(count=40, length=6, seed=0):
    rng = Rng(seed)
    vocab = build_vocab(['w{}'.format(i) for i in range(10)])
    inputs = rng.integers(0, 10, (count, length))
    lengths = rng.integers(1, length + 1, count)
    for row, size in enumerate(lengths):
        inputs[row, size:] = vocab.pad
    targets = (inputs == 0).sum(axis=1) / length
    split = (inputs, targets, lengths)
    return TaskData('sentiment', vocab,
                    {'train': split, 'valid': split, 'test': split}, length)


def numeric_gradient(model, loss_of, step=1e-5):
    grads = {}
    for name, tensor in model.named_parameters().items():
        grad = np.zeros(tensor.shape)
        for index in np.ndindex(*tensor.shape):
            original = tensor.values[index]
            tensor.values[index] = original + step
            upper = loss_of()
            tensor.values[index] = original - step
            lower = loss_of()
            tensor.values[index] = original
            grad[index] = (upper - lower) / (2 * step)
        grads[name] = grad
    return grads


class TestUtilsTrainer(TestCase):
    '''Tests for sparsevd.utils.trainer'''

    def setUp(self):
        # susspress logging messages
        set_logger(CRITICAL)
        # create temporary data dir
        Path(TEMPORARY_DATA_DIR).mkdir(exist_ok=True)

    def tearDown(self):
        # set logging to INFO
        set_logger(INFO)
        # remove temporary data dir
        rmtree(TEMPORARY_DATA_DIR, ignore_errors=True)

    def config(self, **values):
        defaults = {'task': 'charlm', 'hidden_size': 8, 'seq_length': 10,
                    'batch_size': 4, 'epochs': 2, 'learning_rate': 0.01,
                    'clip_threshold': 1.0, 'seed': 3}
        defaults.update(values)
        return replace(TrainConfig(), **defaults).validate()

    def test_elbo_plain_nll(self):
        model = SequenceModel.build('charlm', 5, 4, None, NoisePlan(),
                                    Rng(0))
        batch = CharBatch(inputs=np.array([[0, 1, 2], [3, 4, 0]]),
                          targets=np.array([[1, 2, 3], [4, 0, 1]]))

        loss, parts = elbo_loss(model, batch, 10, kl_scale=0.0)

        log_probs = log_softmax(model.predict(batch), axis=2)
        t, b = np.indices((3, 2))
        expected = -log_probs[t, b, batch.targets.T].sum() / 2
        self.assertAlmostEqual(loss.item(), expected, places=12)
        self.assertEqual(parts['kl'], 0.0)

    def test_elbo_perfect_predictions(self):
        model = SequenceModel.build('sentiment', 6, 4, 3,
                                    NoisePlan(lstm='sparse-vd'), Rng(0))
        model.head.mean.values[...] = 0.0
        model.head_bias.values[...] = 0.4
        batch = RegBatch(inputs=np.array([[1, 2], [3, 5]]),
                         targets=np.array([0.4, 0.4]),
                         lengths=np.array([2, 1]))
        noise = model.sample_noise(2, Rng(1))

        loss, parts = elbo_loss(model, batch, 50, 1.0, noise)

        kl = kl_total(model.variational_weights()).item() / 50
        self.assertAlmostEqual(parts['nll'], 0.0, places=20)
        self.assertAlmostEqual(loss.item(), kl, places=12)

    def test_elbo_hand_composition(self):
        model = SequenceModel.build(
                'charlm', 5, 3, None,
                NoisePlan(lstm='sparse-vd', head='sparse-vd'), Rng(2))
        batch = CharBatch(inputs=np.array([[0, 1, 2, 3], [4, 3, 2, 1]]),
                          targets=np.array([[1, 2, 3, 4], [3, 2, 1, 0]]))
        noise = model.sample_noise(2, Rng(3))

        loss, parts = elbo_loss(model, batch, 7, 0.5, noise)

        logits = np.stack([o.values for o in model.forward(batch, noise)])
        log_probs = log_softmax(logits, axis=2)
        nll = 0.0
        for item in range(2):
            for t in range(4):
                nll -= log_probs[t, item, batch.targets[item, t]]
        kl = kl_total(model.variational_weights()).item()
        self.assertAlmostEqual(loss.item(), nll / 2 + 0.5 * kl / 7,
                               places=10)
        self.assertAlmostEqual(parts['kl'], 0.5 * kl / 7, places=12)

    def test_elbo_weight_decay_term(self):
        config = self.config(mode='vbd', vbd_rate=0.25, vbd_scope='hidden')
        model = build_model(config, 5, Rng(0))
        batch = CharBatch(inputs=np.array([[0, 1, 2]]),
                          targets=np.array([[1, 2, 3]]))
        noise = model.sample_noise(1, Rng(4))

        plain, _ = elbo_loss(model, batch, 10, 1.0, noise)
        decayed, parts = elbo_loss(model, batch, 10, 1.0, noise, 0.01)

        penalty = 0.01 * sum(float(np.sum(w.values ** 2))
                             for _, w in model.deterministic_weights())
        self.assertGreater(penalty, 0.0)
        self.assertAlmostEqual(parts['l2'], penalty, places=12)
        self.assertAlmostEqual(decayed.item() - plain.item(), penalty,
                               places=10)

    def test_elbo_rejects_empty_dataset(self):
        model = SequenceModel.build('charlm', 5, 3, None, NoisePlan(), Rng(0))

        with self.assertRaises(ValueError):
            elbo_loss(model, None, 0)

    def test_elbo_non_finite_loss(self):
        model = SequenceModel.build('charlm', 5, 3, None, NoisePlan(), Rng(0))
        model.head_bias.values[0] = np.nan
        batch = CharBatch(inputs=np.array([[0, 1]]),
                          targets=np.array([[1, 2]]))

        with self.assertRaises(DivergenceError):
            elbo_loss(model, batch, 1)

    def test_gradients_match_finite_differences(self):
        model = SequenceModel.build(
                'charlm', 8, 4, None,
                NoisePlan(lstm='sparse-vd', head='sparse-vd'), Rng(5))
        batch = CharBatch(inputs=np.array([[0, 5, 7], [3, 3, 1]]),
                          targets=np.array([[5, 7, 2], [3, 1, 6]]))
        noise = model.sample_noise(2, Rng(6))

        def loss_of():
            return elbo_loss(model, batch, 20, 1.0, noise)[0].item()

        with Graph() as graph:
            loss, _ = elbo_loss(model, batch, 20, 1.0, noise)
        analytic = named_gradients(model, backward(graph, loss))
        numeric = numeric_gradient(model, loss_of)

        self.assertEqual(set(analytic), set(numeric))
        for name, grad in numeric.items():
            scale = max(np.linalg.norm(analytic[name]),
                        np.linalg.norm(grad), 1e-8)
            error = np.linalg.norm(analytic[name] - grad) / scale
            self.assertLessEqual(error, 1e-5, name)

    def test_adam_first_step(self):
        theta = Tensor([0.0], parameter=True)
        state = AdamState()

        adam_step({'theta': theta}, {'theta': np.array([2.0])}, state, 0.001)

        self.assertAlmostEqual(theta.values[0], -0.001, places=9)
        self.assertEqual(state.step, 1)

    def test_adam_zero_gradient(self):
        theta = Tensor([0.5, -1.0], parameter=True)

        adam_step({'theta': theta}, {'theta': np.zeros(2)}, AdamState(), 0.1)

        self.assertEqual(theta.values.tolist(), [0.5, -1.0])

    def test_adam_nan_aborts_step(self):
        a = Tensor([1.0], parameter=True)
        b = Tensor([2.0], parameter=True)
        state = AdamState()

        with self.assertRaises(DivergenceError):
            adam_step({'a': a, 'b': b},
                      {'a': np.array([1.0]), 'b': np.array([np.nan])},
                      state, 0.1)

        self.assertEqual(a.values.tolist(), [1.0])
        self.assertEqual(state.step, 0)

    def test_adam_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            adam_step({'a': Tensor([1.0], parameter=True)},
                      {'a': np.ones(2)}, AdamState(), 0.1)

    def test_adam_determinism(self):
        def run():
            theta = Tensor(Rng(1).normal((3,)), parameter=True)
            state = AdamState()
            rng = Rng(2)
            for _ in range(20):
                adam_step({'t': theta}, {'t': rng.normal((3,))}, state, 0.01)
            return theta.values

        self.assertTrue(np.array_equal(run(), run()))

    def test_clip_gradients(self):
        grads = {'a': np.array([3.0]), 'b': np.array([4.0])}

        clipped, norm = clip_gradients(grads, 1.0)
        unchanged, _ = clip_gradients(grads, 5.0)

        self.assertEqual(norm, 5.0)
        self.assertAlmostEqual(clipped['a'][0], 0.6)
        self.assertAlmostEqual(clipped['b'][0], 0.8)
        self.assertIs(unchanged, grads)
        with self.assertRaises(ValueError):
            clip_gradients(grads, 0.0)

    def test_clip_gradients_bounds_norm(self):
        rng = Rng(9)
        for _ in range(1000):
            grads = {'a': rng.normal((3, 2)) * 10, 'b': rng.normal((4,))}
            threshold = rng.uniform((), 0.01, 5.0)

            clipped, norm = clip_gradients(grads, threshold)

            total_norm = np.sqrt(sum(np.sum(g ** 2)
                                     for g in clipped.values()))
            self.assertLessEqual(total_norm, threshold * (1 + 1e-12))
            if norm > threshold:
                ratio = clipped['a'] / grads['a']
                self.assertTrue(np.allclose(ratio, ratio.flat[0]))

    def kl_pressure(self, learning_rate, steps=200):
        '''log alpha of every weight after each likelihood-free Adam step'''
        model = SequenceModel.build('charlm', 5, 3, None,
                                    NoisePlan(lstm='sparse-vd',
                                              head='sparse-vd'), Rng(0))
        rng = Rng(1)
        for _, vw in model.named_weights():
            vw.mean.values[...] = 1.0 + 0.1 * rng.uniform(vw.shape)
        params = model.named_parameters()
        state = AdamState()

        def log_alphas():
            return np.concatenate([compute_log_alpha(vw).values.ravel()
                                   for _, vw in model.named_weights()])

        history = [log_alphas()]
        for _ in range(steps):
            with Graph() as graph:
                loss, _ = elbo_loss(model, None, 1, 1.0)
            grads = named_gradients(model, backward(graph, loss))
            adam_step(params, grads, state, learning_rate)
            history.append(log_alphas())
        return np.array(history)

    def test_kl_pressure_raises_log_alpha(self):
        history = self.kl_pressure(0.001)

        self.assertTrue((np.diff(history, axis=0) >= 0).all())
        self.assertTrue((history[-1] > history[0]).all())

    def test_kl_pressure_reaches_clamp(self):
        history = self.kl_pressure(0.3)

        self.assertTrue((history[-1] >= LOG_ALPHA_CLAMP).all())

    def test_checkpoint_round_trip(self):
        config = self.config(mode='sparse-vd', sparse_dense=True)
        model = build_model(config, 6, Rng(0))
        filename = path.join(TEMPORARY_DATA_DIR, 'checkpoint.npz')

        save_checkpoint(model, filename, config, 4, list('abcde'))
        checkpoint = load_checkpoint(filename)
        restored = model_from_checkpoint(checkpoint)

        self.assertEqual(checkpoint.epoch, 4)
        self.assertEqual(checkpoint.config, config)
        self.assertEqual(checkpoint.symbols, list('abcde'))
        self.assertTrue(checkpoint.has_posterior())
        for name, tensor in model.named_parameters().items():
            self.assertTrue(np.array_equal(
                tensor.values, restored.named_parameters()[name].values))

    def test_dense_checkpoint_has_no_posterior(self):
        config = self.config()
        filename = path.join(TEMPORARY_DATA_DIR, 'dense.npz')

        save_checkpoint(build_model(config, 6, Rng(0)), filename, config, 1,
                        list('abcde'))

        self.assertFalse(load_checkpoint(filename).has_posterior())

    def test_load_checkpoint_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(path.join(TEMPORARY_DATA_DIR, 'missing.npz'))

    def test_init_from_checkpoint(self):
        source_config = self.config(mode='vbd', vbd_rate=0.25)
        source = build_model(source_config, 6, Rng(0))
        filename = path.join(TEMPORARY_DATA_DIR, 'pretrained.npz')
        save_checkpoint(source, filename, source_config, 3, list('abcde'))
        target = build_model(self.config(mode='sparse-vd'), 6, Rng(1))
        state = AdamState(step=17, first={'x': np.zeros(1)})

        init_from_checkpoint(target, load_checkpoint(filename), state)

        for (name, vw), (_, pretrained) in zip(target.named_weights(),
                                               source.named_weights()):
            self.assertTrue(np.array_equal(vw.mean.values,
                                           pretrained.mean.values), name)
            self.assertTrue((vw.log_sigma2.values == -6.0).all())
        self.assertEqual(state.step, 0)
        self.assertEqual(state.first, {})

    def test_init_from_checkpoint_shape_mismatch(self):
        config = self.config()
        filename = path.join(TEMPORARY_DATA_DIR, 'small.npz')
        save_checkpoint(build_model(config, 6, Rng(0)), filename, config, 1,
                        list('abcde'))
        target = build_model(replace(config, hidden_size=5), 6, Rng(0))

        with self.assertRaises(CheckpointError) as context:
            init_from_checkpoint(target, load_checkpoint(filename))

        self.assertIn('lstm.i.wh.mean', str(context.exception))
        self.assertIn('(8, 8)', str(context.exception))

    def test_evaluate_uniform_predictor(self):
        symbols = [chr(ord('!') + i) for i in range(49)]
        text = ''.join(symbols) * 3
        data = char_data(text, seq_length=20)
        model = build_model(self.config(seq_length=20), data.vocab_size,
                            Rng(0))
        model.head.mean.values[...] = 0.0
        model.head_bias.values[...] = 0.0

        bpc = evaluate(model, data, 'test')

        self.assertEqual(data.vocab_size, 50)
        self.assertAlmostEqual(bpc, np.log2(50), places=10)
        self.assertAlmostEqual(bpc, 5.6439, places=4)

    def test_evaluate_perfect_regression(self):
        data = sentiment_data()
        inputs, _, lengths = data.splits['test']
        data.splits['test'] = (inputs, np.full(len(lengths), 0.25), lengths)
        model = build_model(self.config(task='sentiment', embed_size=3),
                            data.vocab_size, Rng(0))
        model.head.mean.values[...] = 0.0
        model.head_bias.values[...] = 0.25

        self.assertEqual(evaluate(model, data, 'test'), 0.0)

    def test_evaluate_missing_split(self):
        data = char_data(splits=('train',))
        model = build_model(self.config(), data.vocab_size, Rng(0))

        with self.assertRaises(DataError):
            evaluate(model, data, 'valid')

    def test_train_overfits_single_sequence(self):
        data = char_data(TEXT[:21], seq_length=20)
        config = self.config(seq_length=20, batch_size=1, epochs=10,
                             learning_rate=0.005, early_stopping=False)

        result = train(config, data, TEMPORARY_DATA_DIR)

        losses = [record['trainLoss'] for record in result.records[1:]]
        self.assertEqual(len(losses), 10)
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])))

    def test_train_outputs(self):
        data = char_data()
        config = self.config(mode='sparse-vd', sparse_dense=True)

        result = train(config, data, TEMPORARY_DATA_DIR)

        self.assertIsInstance(result, TrainResult)
        self.assertTrue(path.isfile(result.checkpoint))
        self.assertTrue(path.isfile(result.metrics))
        self.assertEqual([r['epoch'] for r in result.records], [0, 1, 2])
        self.assertIsNone(result.records[0]['trainLoss'])
        final = result.final_metrics
        for key in ('sparsityX', 'sparsityH', 'sparsityY',
                    'validQualityPruned', 'testQualityPruned'):
            self.assertIsNotNone(final[key], key)
        self.assertIsNone(final['wallClock'])
        self.assertEqual(load_checkpoint(result.checkpoint).epoch, 2)

    def test_train_is_deterministic(self):
        data = char_data()
        config = self.config(mode='sparse-vd', sparse_dense=True)
        first = path.join(TEMPORARY_DATA_DIR, 'first')
        second = path.join(TEMPORARY_DATA_DIR, 'second')

        train(config, data, first)
        train(config, data, second)

        with open(path.join(first, 'metrics.jsonl'), 'rb') as a, \
                open(path.join(second, 'metrics.jsonl'), 'rb') as b:
            self.assertEqual(a.read(), b.read())

    def test_train_early_stopping_keeps_best(self):
        data = char_data()
        config = self.config(epochs=3)

        result = train(config, data, TEMPORARY_DATA_DIR)

        qualities = [r['validQuality'] for r in result.records[1:]]
        self.assertTrue(result.checkpoint.endswith('best.npz'))
        self.assertEqual(result.best_epoch,
                         1 + int(np.argmin(qualities)))
        self.assertEqual(load_checkpoint(result.checkpoint).epoch,
                         result.best_epoch)

    def test_train_early_stopping_final_metrics(self):
        data = char_data()
        qualities = [0.5, 0.3, 0.1, 0.4]

        def record_of(model, data, config, epoch, train_loss, kl_scale,
                      started=None):
            return {'epoch': epoch, 'trainLoss': train_loss,
                    'validQuality': qualities[epoch],
                    'testQuality': qualities[epoch] + 1.0}

        with patch('sparsevd.utils.trainer.train_epoch', return_value=1.0), \
                patch('sparsevd.utils.trainer.metrics_record',
                      side_effect=record_of):
            result = train(self.config(epochs=3), data, TEMPORARY_DATA_DIR)

        self.assertEqual(result.best_epoch, 2)
        self.assertEqual(result.final_metrics['epoch'], 2)
        self.assertAlmostEqual(result.final_metrics['testQuality'], 1.1)
        self.assertEqual(result.records[-1]['epoch'], 3)
        self.assertEqual(load_checkpoint(result.checkpoint).epoch, 2)

    def test_train_final_metrics_without_early_stopping(self):
        data = char_data()

        result = train(self.config(early_stopping=False), data,
                       TEMPORARY_DATA_DIR)

        self.assertTrue(result.checkpoint.endswith('checkpoint.npz'))
        self.assertIs(result.final_metrics, result.records[-1])

    def test_train_from_pretrained_keeps_quality(self):
        data = char_data()
        pretrain = train(self.config(epochs=2, early_stopping=False), data,
                         path.join(TEMPORARY_DATA_DIR, 'dense'))
        checkpoint = load_checkpoint(pretrain.checkpoint)
        expected = evaluate(model_from_checkpoint(checkpoint), data, 'valid')
        config = self.config(mode='sparse-vd', sparse_dense=True, epochs=1,
                             init_from=pretrain.checkpoint)

        result = train(config, data, path.join(TEMPORARY_DATA_DIR, 'sparse'))

        self.assertAlmostEqual(result.records[0]['validQuality'], expected,
                               delta=1e-10)

    def test_train_divergence_keeps_last_checkpoint(self):
        data = char_data()

        with patch('sparsevd.utils.trainer.train_epoch',
                   side_effect=DivergenceError('nan')):
            with self.assertRaises(DivergenceError) as context:
                train(self.config(), data, TEMPORARY_DATA_DIR)

        self.assertTrue(path.isfile(context.exception.checkpoint))
        self.assertEqual(load_checkpoint(context.exception.checkpoint).epoch,
                         0)

    def test_train_kl_warmup_recorded(self):
        data = char_data()
        config = self.config(mode='sparse-vd', kl_warmup_epochs=2, epochs=2)

        result = train(config, data, TEMPORARY_DATA_DIR)

        self.assertEqual([r['klScale'] for r in result.records],
                         [0.0, 0.5, 1.0])
