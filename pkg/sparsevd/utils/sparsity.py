from copy import deepcopy
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from scipy.sparse import csr_matrix
from scipy.special import expit

from sparsevd.utils.file import (
        load_container, save_container, ContainerError, FORMAT_VERSION)
from sparsevd.utils.ndmath import (
        add, make_node, mul, sigmoid, softplus, total, ShapeError, Tensor)
from sparsevd.utils.varlayers import GATES

LOG_ALPHA_CLAMP = 20.0
DEFAULT_THRESHOLD = 3.0
# KL approximation constants
K1, K2, K3 = 0.64, 1.87, 1.49
GROUPS = ('x', 'h', 'y')
SEPARATOR = ' – '
EXPORT_KIND = 'sparse-export'


# Exceptions
class SparsityError(Exception):
    '''Error class for pruning and sparsity reporting errors'''
    pass


@dataclass
class LogAlphaMatrix:
    '''Clamped log(sigma^2 / m^2) of one weight matrix'''
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PruneMask:
    keep: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    @property
    def nnz(self):
        return int(np.count_nonzero(self.keep))

    @property
    def total(self):
        return int(self.keep.size)


@dataclass
class CsrMatrix:
    '''Compressed sparse row storage of a pruned matrix'''
    shape: tuple
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self):
        return int(self.values.size)

    def to_scipy(self):
        return csr_matrix((self.values, self.col_indices, self.row_offsets),
                          shape=self.shape)

    def to_dense(self):
        return self.to_scipy().toarray()


def log_alpha(vw):
    '''Differentiable clamped log alpha of a VariationalWeight.

    m = 0 maps to the upper clamp; clamped entries pass no gradient.'''
    mean, log_sigma2 = vw.mean, vw.log_sigma2
    with np.errstate(divide='ignore'):
        raw = log_sigma2.values - np.log(mean.values ** 2)
    inside = (raw > -LOG_ALPHA_CLAMP) & (raw < LOG_ALPHA_CLAMP)
    safe_mean = np.where(inside, mean.values, 1.0)

    def grad_fn(g):
        g = np.where(inside, g, 0.0)
        return (-2.0 * g / safe_mean, g)

    return make_node(np.clip(raw, -LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP),
                     (mean, log_sigma2), grad_fn)


def compute_log_alpha(vw):
    '''Returns the LogAlphaMatrix of `vw`'''
    return LogAlphaMatrix(log_alpha(vw).values.copy())


def kl_per_weight(value):
    '''KL(alpha) = 0.5 log(1 + 1/alpha) - K1 sigm(K2 + K3 log alpha) + K1.

    Accepts a float, an array or a Tensor of log alpha values. The result
    is nonnegative and vanishes as log alpha grows.'''
    if isinstance(value, Tensor):
        return add(add(mul(softplus(mul(value, -1.0)), 0.5),
                       mul(sigmoid(add(mul(value, K3), K2)), -K1)), K1)
    value = np.asarray(value, dtype=np.float64)
    kl = (0.5 * np.logaddexp(0.0, -value) - K1 * expit(K2 + K3 * value) +
          K1)
    return float(kl) if kl.ndim == 0 else kl


def kl_total(weights):
    '''Sum of kl_per_weight over every entry of every VariationalWeight'''
    result = Tensor(0.0)
    for vw in weights:
        if isinstance(vw, tuple):
            vw = vw[1]
        result = add(result, total(kl_per_weight(log_alpha(vw))))
    return result


def prune(vw, threshold=DEFAULT_THRESHOLD):
    '''Returns (PruneMask, means with every log alpha > threshold zeroed)'''
    if not np.isfinite(threshold):
        raise SparsityError('threshold must be finite: {}'.format(threshold))
    keep = compute_log_alpha(vw).values <= threshold
    # the lower clamp stands in for minus infinity
    if threshold <= -LOG_ALPHA_CLAMP:
        keep[...] = False
    zeroed = np.where(keep, vw.mean.values, 0.0)
    return PruneMask(keep=keep, threshold=threshold), zeroed


def group_of(name):
    '''Maps a weight name such as lstm.i.wx to its report group'''
    suffix = name.rsplit('.', 1)[-1]
    group = suffix[-1]
    if not suffix.startswith('w') or group not in GROUPS:
        raise SparsityError('not a weight matrix name: {}'.format(name))
    return group


def sparsity_report(masks):
    '''Percent of zero weights per group {x, h, y}, two decimals.

    LSTM gate matrices aggregate into one x and one h figure.'''
    if not masks:
        raise SparsityError('sparsity report needs at least one mask')
    nnz, size = {}, {}
    for name, mask in masks.items():
        group = group_of(name)
        nnz[group] = nnz.get(group, 0) + mask.nnz
        size[group] = size.get(group, 0) + mask.total
    return {group: round(100.0 * (1.0 - nnz[group] / size[group]), 2)
            for group in GROUPS if group in size}


def format_sparsity(report):
    '''Renders a report as "x – h [– y]"'''
    return SEPARATOR.join('{:.2f}'.format(report[group])
                          for group in GROUPS if group in report)


def prune_model(model, threshold=DEFAULT_THRESHOLD):
    '''Returns (pruned copy of `model`, masks by weight name)'''
    pruned = deepcopy(model)
    masks = {}
    for name, vw in pruned.variational_weights():
        mask, zeroed = prune(vw, threshold)
        vw.mean.values[...] = zeroed
        masks[name] = mask
    return pruned, masks


def to_csr(dense):
    '''Packs the nonzero entries of a 2-D matrix'''
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise ShapeError('to_csr needs a matrix, got shape {}'.format(
            dense.shape))
    packed = csr_matrix(dense)
    packed.sort_indices()
    return CsrMatrix(shape=tuple(dense.shape),
                     row_offsets=packed.indptr.astype(np.int64),
                     col_indices=packed.indices.astype(np.int32),
                     values=packed.data.copy())


def csr_matvec(csr, vector):
    '''csr @ vector'''
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (csr.shape[1],):
        raise ShapeError('matvec mismatch: {} x {}'.format(
            csr.shape, vector.shape))
    return csr.to_scipy() @ vector


def csr_rmatmul(x, csr):
    '''Row-batch product x @ csr for x of shape [batch x rows]'''
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != csr.shape[0]:
        raise ShapeError('matmul mismatch: {} x {}'.format(x.shape, csr.shape))
    return np.asarray(csr.to_scipy().T @ x.T).T


def export_sparse(model, filename, threshold=DEFAULT_THRESHOLD, meta=None,
                  logger=getLogger()):
    '''Writes posterior weights as CSR after pruning, the rest dense.

    Returns the sparsity report.'''
    variational = model.variational_weights()
    if not variational:
        raise SparsityError('model has no posterior weights to prune')

    arrays, shapes, masks = {}, {}, {}
    for name, vw in variational:
        mask, zeroed = prune(vw, threshold)
        masks[name] = mask
        csr = to_csr(zeroed)
        arrays[name + '.row_offsets'] = csr.row_offsets
        arrays[name + '.col_indices'] = csr.col_indices
        arrays[name + '.values'] = csr.values
        shapes[name] = list(csr.shape)

    sparse_names = set(shapes)
    for name, vw in model.named_weights():
        if name not in sparse_names:
            arrays[name + '.mean'] = vw.mean.values
    for name, tensor in model.named_parameters().items():
        if not name.startswith(tuple(n + '.' for n in sparse_names)):
            arrays.setdefault(name, tensor.values)

    report = sparsity_report(masks)
    export_meta = dict(meta or {})
    export_meta.update({
        'kind': EXPORT_KIND,
        'task': model.task,
        'threshold': threshold,
        'csr': shapes,
        'sparsity': report})
    save_container(filename, arrays, export_meta)
    logger.info('sparse export saved at {} ({})'.format(
        filename, format_sparsity(report)))
    return report


class CompressedModel:
    '''Mean-weight inference over a sparse export.

    Pruned matrices stay in CSR form and are applied with sparse products;
    the result equals the zeroed dense forward pass.'''

    def __init__(self, task, matrices, dense, meta=None):
        self.task = task
        self.matrices = matrices
        self.dense = dense
        self.meta = meta or {}

    def _product(self, x, name):
        weight = self.matrices[name]
        if isinstance(weight, CsrMatrix):
            return csr_rmatmul(x, weight)
        return x @ weight

    def _lstm(self, steps):
        batch_size = steps[0].shape[0]
        h = np.zeros((batch_size, self.dense['lstm.h0'].size))
        h = h + self.dense['lstm.h0']
        c = np.zeros_like(h) + self.dense['lstm.c0']
        states = []
        for x_t in steps:
            preacts = {}
            for gate in GATES:
                preacts[gate] = (
                        self._product(x_t, 'lstm.{}.wx'.format(gate)) +
                        self._product(h, 'lstm.{}.wh'.format(gate)) +
                        self.dense['lstm.{}.bias'.format(gate)])
            c = (expit(preacts['f']) * c +
                 expit(preacts['i']) * np.tanh(preacts['g']))
            h = expit(preacts['o']) * np.tanh(c)
            states.append(h)
        return states

    def predict(self, batch):
        '''[T x batch x vocab] logits (char-LM) or [batch] predictions'''
        inputs = np.asarray(batch.inputs, dtype=np.int64)
        if self.task == 'charlm':
            eye = np.eye(self.matrices['lstm.i.wx'].shape[0])
            steps = [eye[inputs[:, t]] for t in range(inputs.shape[1])]
        else:
            table = self.dense['embedding']
            steps = [table[inputs[:, t]] for t in range(inputs.shape[1])]
        states = self._lstm(steps)
        if self.task == 'charlm':
            return np.stack([self._product(h, 'head.wy') +
                             self.dense['head.bias'] for h in states])
        lengths = np.asarray(batch.lengths)
        final = np.stack(states)[lengths - 1, np.arange(len(lengths))]
        return (self._product(final, 'head.wy') +
                self.dense['head.bias'])[:, 0]


def load_sparse(filename, logger=getLogger()):
    '''Reads a sparse export into a CompressedModel'''
    arrays, meta = load_container(filename)
    if meta.get('kind') != EXPORT_KIND:
        raise ContainerError('{} is not a sparse export'.format(filename))

    matrices, dense = {}, {}
    for name, shape in meta['csr'].items():
        matrices[name] = CsrMatrix(
                shape=tuple(shape),
                row_offsets=arrays.pop(name + '.row_offsets'),
                col_indices=arrays.pop(name + '.col_indices'),
                values=arrays.pop(name + '.values'))
    for name in list(arrays):
        if name.endswith('.mean'):
            matrices[name[:-len('.mean')]] = arrays.pop(name)
    dense.update(arrays)

    logger.debug('loaded sparse export {} (format {})'.format(
        filename, meta.get('format_version', FORMAT_VERSION)))
    return CompressedModel(meta['task'], matrices, dense, meta)


def masks_for(model, threshold=DEFAULT_THRESHOLD):
    '''PruneMask per posterior weight of `model`'''
    return {name: prune(vw, threshold)[0]
            for name, vw in model.variational_weights()}
