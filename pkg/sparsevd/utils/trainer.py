from dataclasses import asdict, dataclass, field, replace
from logging import getLogger
from math import log as ln
from os import path
from time import perf_counter

import numpy as np
from scipy.special import log_softmax

from sparsevd.utils.config import TrainConfig
from sparsevd.utils.datatext import DataError
from sparsevd.utils.file import (
        load_container, make_dir, save_container, ContainerError)
from sparsevd.utils.logs import format_record
from sparsevd.utils.ndmath import (
        add, backward, mul, softmax_cross_entropy, square, sub, total, Graph,
        Rng, ShapeError, Tensor)
from sparsevd.utils.sparsity import (
        kl_total, masks_for, prune_model, sparsity_report, DEFAULT_THRESHOLD)
from sparsevd.utils.validation import (
        check_finite, check_gradients, DivergenceError)
from sparsevd.utils.varlayers import LOG_SIGMA2_INIT, SequenceModel

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8
EVAL_BATCH_SIZE = 256
CHECKPOINT_KIND = 'checkpoint'
CHECKPOINT_FILE = 'checkpoint.npz'
BEST_FILE = 'best.npz'
METRICS_FILE = 'metrics.jsonl'
# seed streams
INIT_STREAM, NOISE_STREAM, SHUFFLE_STREAM = 0, 1, 2


# Exceptions
class CheckpointError(Exception):
    '''Error class for checkpoints that do not fit the model'''
    pass


@dataclass
class AdamState:
    '''First/second moments keyed by parameter name'''
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = EPSILON
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def reset(self):
        self.step = 0
        self.first.clear()
        self.second.clear()
        return self


@dataclass
class Checkpoint:
    arrays: dict
    meta: dict

    @property
    def config(self):
        return replace(TrainConfig(), **self.meta['config'])

    @property
    def epoch(self):
        return self.meta['epoch']

    @property
    def symbols(self):
        return self.meta['vocab']

    def has_posterior(self):
        return any(name.endswith('.log_sigma2') for name in self.arrays)


@dataclass
class TrainResult:
    checkpoint: str
    last_checkpoint: str
    metrics: str
    records: list
    best_epoch: int = None

    @property
    def final_metrics(self):
        '''Record of the epoch whose weights `checkpoint` holds'''
        for record in self.records:
            if record['epoch'] == self.best_epoch:
                return record
        return self.records[-1]


@check_finite
def elbo_loss(model, batch, dataset_size, kl_scale=1.0, noise=None,
              weight_decay=0.0, logger=getLogger()):
    '''Single-sample minibatch objective (minimized).

    loss = mean NLL per sequence + kl_scale * KL / dataset_size
           + weight_decay * sum of squared deterministic weights

    `batch` None drops the likelihood term. Returns (loss, parts).'''
    if dataset_size <= 0:
        raise ValueError('dataset size must be positive: {}'.format(
            dataset_size))

    loss = Tensor(0.0)
    parts = {'nll': 0.0, 'kl': 0.0, 'l2': 0.0}

    if batch is not None:
        outputs = model.forward(batch, noise)
        batch_size = len(batch)
        if model.task == 'charlm':
            nll = Tensor(0.0)
            for t, logits in enumerate(outputs):
                nll = add(nll, total(softmax_cross_entropy(
                    logits, batch.targets[:, t])))
            nll = mul(nll, 1.0 / batch_size)
        else:
            error = sub(outputs, np.asarray(batch.targets)[:, None])
            nll = mul(total(square(error)), 1.0 / batch_size)
        loss = add(loss, nll)
        parts['nll'] = nll.item()

    variational = model.variational_weights()
    if kl_scale > 0 and variational:
        kl = mul(kl_total(variational), kl_scale / dataset_size)
        loss = add(loss, kl)
        parts['kl'] = kl.item()

    if weight_decay > 0:
        l2 = Tensor(0.0)
        for _, weight in model.deterministic_weights():
            l2 = add(l2, total(square(weight)))
        l2 = mul(l2, weight_decay)
        loss = add(loss, l2)
        parts['l2'] = l2.item()

    logger.debug('elbo parts: {}'.format(parts))
    return loss, parts


def clip_gradients(grads, threshold):
    '''Global-norm clipping; returns (grads, norm before clipping)'''
    if not threshold > 0:
        raise ValueError('clip threshold must be positive: {}'.format(
            threshold))
    norm = float(np.sqrt(sum(np.sum(np.square(g)) for g in grads.values())))
    if norm <= threshold:
        return grads, norm
    scale = threshold / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adam_step(params, grads, state, lr, logger=getLogger()):
    '''Bias-corrected Adam update of `params` in place.

    Parameters without a gradient get a zero gradient. Nothing is updated
    when any gradient is NaN/Inf.'''
    check_gradients(grads, logger=logger)
    for name, grad in grads.items():
        if name not in params:
            raise KeyError('gradient for unknown parameter: {}'.format(name))
        if np.shape(grad) != params[name].shape:
            raise ShapeError('gradient {} for {} of shape {}'.format(
                np.shape(grad), name, params[name].shape))

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(param.shape)
        first = state.first.get(name, np.zeros(param.shape))
        second = state.second.get(name, np.zeros(param.shape))
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad ** 2
        state.first[name], state.second[name] = first, second
        param.values -= lr * (first / correction1) / (
                np.sqrt(second / correction2) + state.epsilon)
    return params


def named_gradients(model, grads):
    '''Re-keys backward() output by parameter name'''
    return {name: grads[tensor]
            for name, tensor in model.named_parameters().items()
            if tensor in grads}


def build_model(config, vocab_size, rng):
    return SequenceModel.build(config.task, vocab_size, config.hidden_size,
                               config.embed_size, config.noise_plan(), rng,
                               config.log_sigma2_init)


def save_checkpoint(model, filename, config, epoch, symbols,
                    logger=getLogger()):
    '''Named tensors plus config echo, epoch and vocabulary'''
    arrays = {name: tensor.values
              for name, tensor in model.named_parameters().items()}
    meta = {'kind': CHECKPOINT_KIND,
            'task': model.task,
            'epoch': epoch,
            'config': asdict(config),
            'vocab': list(symbols)}
    return save_container(filename, arrays, meta, logger=logger)


def load_checkpoint(filename, logger=getLogger()):
    try:
        arrays, meta = load_container(filename, logger=logger)
    except ContainerError as e:
        raise CheckpointError(str(e))
    if meta.get('kind') != CHECKPOINT_KIND:
        raise CheckpointError('{} is not a checkpoint'.format(filename))
    return Checkpoint(arrays, meta)


def model_from_checkpoint(checkpoint):
    '''Rebuilds the saved model'''
    config = checkpoint.config
    vocab_size = len(checkpoint.symbols) + (
            1 if config.task == 'charlm' else 2)
    model = build_model(config, vocab_size, Rng(config.seed, INIT_STREAM))
    params = model.named_parameters()
    problems = diagnose(params, checkpoint.arrays, params)
    if problems:
        raise CheckpointError('; '.join(problems))
    for name, tensor in params.items():
        tensor.values[...] = checkpoint.arrays[name]
    return model


def diagnose(expected, arrays, names):
    problems = []
    for name in names:
        if name not in arrays:
            problems.append('{}: missing'.format(name))
        elif arrays[name].shape != expected[name].shape:
            problems.append('{}: checkpoint {} vs model {}'.format(
                name, arrays[name].shape, expected[name].shape))
    return problems


def init_from_checkpoint(model, checkpoint, state=None,
                         log_sigma2=LOG_SIGMA2_INIT, logger=getLogger()):
    '''Copies pretrained means and resets every log sigma^2.

    Works from any checkpoint with matching sizes; dropout masks are never
    part of a checkpoint, so VBD-trained weights are copied as they are.'''
    params = model.named_parameters()
    copied = [name for name in params if not name.endswith('.log_sigma2')]
    problems = diagnose(params, checkpoint.arrays, copied)
    if problems:
        logger.error('checkpoint does not fit: {}'.format(problems))
        raise CheckpointError('checkpoint does not fit the model: {}'.format(
            '; '.join(problems)))

    for name in copied:
        params[name].values[...] = checkpoint.arrays[name]
    for _, vw in model.named_weights():
        vw.log_sigma2.values[...] = log_sigma2
    if state is not None:
        state.reset()

    logger.info('initialized {} tensors from checkpoint (epoch {})'.format(
        len(copied), checkpoint.meta.get('epoch')))
    return model


def evaluate(model, data, split, pruned=False, threshold=DEFAULT_THRESHOLD,
             batch_size=EVAL_BATCH_SIZE):
    '''Mean-weight quality: bits per character or MSE'''
    if not data.has_split(split):
        raise DataError('split not loaded: {}'.format(split))
    if pruned:
        model, _ = prune_model(model, threshold)

    loss, count = 0.0, 0
    for batch in data.batches(split, batch_size):
        outputs = model.predict(batch)
        if data.task == 'charlm':
            log_probs = log_softmax(outputs, axis=2)
            targets = np.asarray(batch.targets).T
            t, b = np.indices(targets.shape)
            loss -= float(log_probs[t, b, targets].sum())
            count += targets.size
        else:
            loss += float(np.sum((outputs - batch.targets) ** 2))
            count += len(batch)

    if data.task == 'charlm':
        return loss / (count * ln(2.0))
    return loss / count


def metrics_record(model, data, config, epoch, train_loss, kl_scale,
                   started=None):
    '''MetricsRecord of the current mean weights'''
    sparse = bool(model.variational_weights())
    record = {'epoch': epoch,
              'trainLoss': train_loss,
              'klScale': kl_scale,
              'label': config.label or None,
              'wallClock': None}
    for split, key in (('valid', 'validQuality'), ('test', 'testQuality')):
        if data.has_split(split):
            record[key] = evaluate(model, data, split)
            if sparse:
                record[key + 'Pruned'] = evaluate(
                        model, data, split, True, config.threshold)
    if sparse:
        report = sparsity_report(masks_for(model, config.threshold))
        record['sparsityX'] = report.get('x')
        record['sparsityH'] = report.get('h')
        record['sparsityY'] = report.get('y')
    if config.wall_clock and started is not None:
        record['wallClock'] = perf_counter() - started
    return record


def train_epoch(model, data, config, state, params, rngs, kl_scale,
                logger=getLogger()):
    '''One pass over shuffled minibatches; returns the mean loss'''
    noise_rng, shuffle_rng = rngs
    uses_noise = config.mode != 'none'
    dataset_size = data.size('train')
    losses = []
    for batch in data.batches('train', config.batch_size, shuffle_rng):
        noise = None
        if uses_noise:
            noise = model.sample_noise(len(batch), noise_rng)
        with Graph() as graph:
            loss, _ = elbo_loss(model, batch, dataset_size, kl_scale, noise,
                                config.weight_decay, logger=logger)
        grads = named_gradients(model, backward(graph, loss, logger=logger))
        grads, _ = clip_gradients(grads, config.clip_threshold)
        adam_step(params, grads, state, config.learning_rate, logger=logger)
        losses.append(loss.item())
    return float(np.mean(losses))


def train(config, data, out_dir, logger=getLogger()):
    '''Trains one model and streams metrics to <out_dir>/metrics.jsonl.

    The checkpoint is rewritten after every epoch. Under early stopping
    (mode none) best.npz keeps the best-validation epoch. A divergence
    stops the run and leaves the last good checkpoint in place.'''
    make_dir(out_dir, logger=logger)
    started = perf_counter()
    model = build_model(config, data.vocab_size,
                        Rng(config.seed, INIT_STREAM))
    state = AdamState()
    if config.init_from:
        init_from_checkpoint(model, load_checkpoint(config.init_from),
                             state, config.log_sigma2_init, logger=logger)
    params = model.named_parameters()
    rngs = (Rng(config.seed, NOISE_STREAM), Rng(config.seed, SHUFFLE_STREAM))
    symbols = data.vocab.symbols

    last = path.join(out_dir, CHECKPOINT_FILE)
    best = path.join(out_dir, BEST_FILE)
    metrics = path.join(out_dir, METRICS_FILE)
    early_stopping = config.mode == 'none' and config.early_stopping
    best_quality, best_epoch = None, None

    record = metrics_record(model, data, config, 0, None,
                            config.kl_scale_at(0), started)
    records = [record]
    save_checkpoint(model, last, config, 0, symbols, logger=logger)

    with open(metrics, 'w') as file:
        file.write(format_record(record))
        for epoch in range(1, config.epochs + 1):
            kl_scale = config.kl_scale_at(epoch)
            try:
                train_loss = train_epoch(model, data, config, state, params,
                                         rngs, kl_scale, logger=logger)
            except DivergenceError as e:
                logger.error('run diverged in epoch {}; last good '
                             'checkpoint: {}'.format(epoch, last))
                raise DivergenceError(str(e), checkpoint=last)

            record = metrics_record(model, data, config, epoch, train_loss,
                                    kl_scale, started)
            records.append(record)
            file.write(format_record(record))
            file.flush()
            save_checkpoint(model, last, config, epoch, symbols,
                            logger=logger)
            logger.info('epoch {}: loss {:.6f}, valid {}'.format(
                epoch, train_loss, record.get('validQuality')))

            if early_stopping:
                quality = record.get('validQuality')
                if quality is None or best_quality is None or \
                        quality < best_quality:
                    best_quality, best_epoch = quality, epoch
                    save_checkpoint(model, best, config, epoch, symbols,
                                    logger=logger)

    logger.info('training finished after {} epochs'.format(config.epochs))
    return TrainResult(checkpoint=best if early_stopping else last,
                       last_checkpoint=last,
                       metrics=metrics,
                       records=records,
                       best_epoch=best_epoch if early_stopping
                       else config.epochs)
