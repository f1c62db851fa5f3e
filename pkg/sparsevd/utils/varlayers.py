from dataclasses import dataclass, field
from logging import getLogger
from types import MappingProxyType

import numpy as np

from sparsevd.utils.ndmath import (
        add, exp, matmul, mul, orthogonal_init, sigmoid, sqrt, square, tanh,
        take_rows, ShapeError, Tensor)

GATES = ('i', 'o', 'f', 'g')
MODES = ('none', 'vbd', 'sparse-vd')
TASKS = ('charlm', 'sentiment')
LOG_SIGMA2_INIT = -6.0
VARIANCE_FLOOR = 1e-16
EMBEDDING_SCALE = 0.1


# Exceptions
class EmptySequenceError(ValueError):
    '''Error class for sequences without time steps'''
    pass


@dataclass
class VariationalWeight:
    '''Factorized Gaussian posterior N(mean, exp(log_sigma2)) of a matrix'''
    mean: Tensor
    log_sigma2: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_sigma2.shape:
            raise ShapeError('mean {} and log_sigma2 {} differ'.format(
                self.mean.shape, self.log_sigma2.shape))

    @classmethod
    def from_values(cls, values, log_sigma2=LOG_SIGMA2_INIT, name=None):
        values = np.asarray(values, dtype=np.float64)
        return cls(
                Tensor(values, parameter=True, name=name),
                Tensor(np.full(values.shape, log_sigma2), parameter=True,
                       name=name))

    @property
    def shape(self):
        return self.mean.shape

    def sigma2(self):
        return np.exp(self.log_sigma2.values)


@dataclass
class GateParams:
    wx: VariationalWeight
    wh: VariationalWeight
    bias: Tensor


@dataclass
class LSTMVarParams:
    '''Gate-wise LSTM weights plus trainable initial states'''
    gates: dict
    h0: Tensor
    c0: Tensor

    def __post_init__(self):
        if set(self.gates) != set(GATES):
            raise ShapeError('LSTM needs gates {}, got {}'.format(
                GATES, sorted(self.gates)))
        n, m = self.gates['i'].wx.shape
        for name, gate in self.gates.items():
            if (gate.wx.shape != (n, m) or gate.wh.shape != (m, m) or
                    gate.bias.shape != (m,)):
                raise ShapeError('gate {} has inconsistent sizes'.format(
                    name))
        if self.h0.shape != (m,) or self.c0.shape != (m,):
            raise ShapeError('initial states must have shape ({},)'.format(m))

    @classmethod
    def initialize(cls, rng, input_size, hidden_size,
                   log_sigma2=LOG_SIGMA2_INIT):
        '''Orthogonal weights, zero biases and zero initial states'''
        gates = {}
        for gate in GATES:
            gates[gate] = GateParams(
                    wx=VariationalWeight.from_values(
                        orthogonal_init(rng, input_size, hidden_size).values,
                        log_sigma2),
                    wh=VariationalWeight.from_values(
                        orthogonal_init(rng, hidden_size, hidden_size).values,
                        log_sigma2),
                    bias=Tensor(np.zeros(hidden_size), parameter=True))
        return cls(gates=gates,
                   h0=Tensor(np.zeros(hidden_size), parameter=True),
                   c0=Tensor(np.zeros(hidden_size), parameter=True))

    @property
    def input_size(self):
        return self.gates['i'].wx.shape[0]

    @property
    def hidden_size(self):
        return self.gates['i'].wx.shape[1]


@dataclass
class VBDLayerParams:
    '''Binary dropout rates for input and hidden units'''
    drop_rate_input: float = 0.0
    drop_rate_hidden: float = 0.0

    def __post_init__(self):
        for rate in (self.drop_rate_input, self.drop_rate_hidden):
            if not 0.0 <= rate < 1.0:
                raise ValueError(
                        'dropout rate must be in [0, 1): {}'.format(rate))


@dataclass(frozen=True)
class NoisePack:
    '''Noise realization for one minibatch, reused at every time step.

    sparse-vd fills `input_noise` ([batch x m] per gate), `hidden_noise`
    ([m x m] per gate) and optionally `output_noise`; vbd fills the
    per-sequence masks.'''
    mode: str
    input_noise: dict = field(default_factory=dict)
    hidden_noise: dict = field(default_factory=dict)
    input_masks: dict = field(default_factory=dict)
    hidden_masks: dict = field(default_factory=dict)
    output_noise: np.ndarray = None
    output_mask: np.ndarray = None
    embedding_mask: np.ndarray = None

    def __post_init__(self):
        for name in ('input_noise', 'hidden_noise', 'input_masks',
                     'hidden_masks'):
            arrays = getattr(self, name)
            for array in arrays.values():
                array.flags.writeable = False
            object.__setattr__(self, name, MappingProxyType(dict(arrays)))
        for name in ('output_noise', 'output_mask', 'embedding_mask'):
            array = getattr(self, name)
            if array is not None:
                array.flags.writeable = False


@dataclass(frozen=True)
class NoisePlan:
    '''Which noise each layer of a model receives during training'''
    lstm: str = 'none'
    head: str = 'none'
    embedding: bool = False
    vbd: VBDLayerParams = field(default_factory=VBDLayerParams)


def local_reparam_matmul(x, vw, eps):
    '''Samples x @ W for W ~ q(W) directly on the preactivations'''
    eps = np.asarray(getattr(eps, 'values', eps))
    if x.shape[1] != vw.shape[0] or eps.shape != (x.shape[0], vw.shape[1]):
        raise ShapeError(
                'local reparameterization mismatch: x {}, W {}, eps {}'
                .format(x.shape, vw.shape, eps.shape))
    mean = matmul(x, vw.mean)
    variance = matmul(square(x), exp(vw.log_sigma2))
    return add(mean, mul(eps, sqrt(variance, floor=VARIANCE_FLOOR)))


def sample_weight_matrix(vw, eps):
    '''Additive reparameterization W = M + sigma * eps'''
    eps = np.asarray(getattr(eps, 'values', eps))
    if eps.shape != vw.shape:
        raise ShapeError('noise {} does not match weight {}'.format(
            eps.shape, vw.shape))
    return add(vw.mean, mul(exp(mul(vw.log_sigma2, 0.5)), eps))


def vbd_mask(rng, p, shape):
    '''Inverted binary dropout mask: 0 with probability p, else 1/(1-p)'''
    if not 0.0 <= p < 1.0:
        raise ValueError('dropout rate must be in [0, 1): {}'.format(p))
    if p == 0.0:
        return np.ones(shape)
    keep = rng.uniform(shape) >= p
    return keep / (1.0 - p)


def sample_noise(params, batch_size, plan, rng, output_size=None,
                 embed_size=None):
    '''Draws the NoisePack for one minibatch according to `plan`'''
    n, m = params.input_size, params.hidden_size
    input_noise, hidden_noise = {}, {}
    input_masks, hidden_masks = {}, {}

    for gate in GATES:
        if plan.lstm == 'sparse-vd':
            input_noise[gate] = rng.normal((batch_size, m))
            hidden_noise[gate] = rng.normal((m, m))
        elif plan.lstm == 'vbd':
            input_masks[gate] = vbd_mask(
                    rng, plan.vbd.drop_rate_input, (batch_size, n))
            hidden_masks[gate] = vbd_mask(
                    rng, plan.vbd.drop_rate_hidden, (batch_size, m))

    output_noise = output_mask = embedding_mask = None
    if plan.head == 'sparse-vd':
        output_noise = rng.normal((batch_size, output_size))
    elif plan.head == 'vbd':
        output_mask = vbd_mask(
                rng, plan.vbd.drop_rate_hidden, (batch_size, m))
    if plan.embedding:
        embedding_mask = vbd_mask(
                rng, plan.vbd.drop_rate_input, (batch_size, embed_size))

    return NoisePack(mode=plan.lstm,
                     input_noise=input_noise,
                     hidden_noise=hidden_noise,
                     input_masks=input_masks,
                     hidden_masks=hidden_masks,
                     output_noise=output_noise,
                     output_mask=output_mask,
                     embedding_mask=embedding_mask)


def hidden_weights(params, noise):
    '''Hidden-to-hidden matrices used for a whole minibatch'''
    if noise is not None and noise.mode == 'sparse-vd':
        return {gate: sample_weight_matrix(params.gates[gate].wh,
                                           noise.hidden_noise[gate])
                for gate in GATES}
    return {gate: params.gates[gate].wh.mean for gate in GATES}


def lstm_step(params, x_t, h_prev, c_prev, noise=None, weights_h=None):
    '''One LSTM transition; `noise` None means mean weights'''
    if x_t.shape[1] != params.input_size:
        raise ShapeError('input has {} features, LSTM expects {}'.format(
            x_t.shape[1], params.input_size))
    if weights_h is None:
        weights_h = hidden_weights(params, noise)
    mode = noise.mode if noise is not None else 'none'

    preacts = {}
    for gate in GATES:
        wx = params.gates[gate].wx
        if mode == 'sparse-vd':
            x_part = local_reparam_matmul(x_t, wx, noise.input_noise[gate])
            h_part = matmul(h_prev, weights_h[gate])
        elif mode == 'vbd':
            x_part = matmul(mul(x_t, noise.input_masks[gate]), wx.mean)
            h_part = matmul(mul(h_prev, noise.hidden_masks[gate]),
                            weights_h[gate])
        else:
            x_part = matmul(x_t, wx.mean)
            h_part = matmul(h_prev, weights_h[gate])
        preacts[gate] = add(add(x_part, h_part), params.gates[gate].bias)

    i = sigmoid(preacts['i'])
    o = sigmoid(preacts['o'])
    f = sigmoid(preacts['f'])
    g = tanh(preacts['g'])
    c_t = add(mul(f, c_prev), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return h_t, c_t


def lstm_forward(params, steps, mode='none', rng=None, noise=None, vbd=None,
                 logger=getLogger()):
    '''Unrolls the LSTM over `steps` (a list of [batch x n] tensors).

    A NoisePack is drawn once from `rng` for `mode` unless `noise` is
    given; the same pack (and the same sampled hidden matrices) is used at
    every time step. Returns the list of hidden states.'''
    if len(steps) == 0:
        raise EmptySequenceError('cannot run an LSTM over an empty sequence')

    batch_size = steps[0].shape[0]
    if noise is None and mode != 'none':
        plan = NoisePlan(lstm=mode, vbd=vbd or VBDLayerParams())
        noise = sample_noise(params, batch_size, plan, rng)
    zeros = np.zeros((batch_size, params.hidden_size))
    h = add(zeros, params.h0)
    c = add(zeros, params.c0)
    weights_h = hidden_weights(params, noise)

    states = []
    for x_t in steps:
        h, c = lstm_step(params, x_t, h, c, noise, weights_h=weights_h)
        states.append(h)

    logger.debug('lstm_forward: {} steps, batch {}'.format(
        len(steps), batch_size))
    return states


def variational_dense(x, vw, bias, eps=None):
    '''Affine map with a Gaussian posterior on the weights'''
    if x.shape[1] != vw.shape[0] or bias.shape != (vw.shape[1],):
        raise ShapeError('dense mismatch: x {}, W {}, bias {}'.format(
            x.shape, vw.shape, bias.shape))
    if eps is None:
        return add(matmul(x, vw.mean), bias)
    return add(local_reparam_matmul(x, vw, eps), bias)


class SequenceModel:
    '''LSTM with a dense head for char-LM or sequence regression.

    char-LM feeds one-hot characters and emits logits at every step;
    sentiment embeds tokens and reads the state at the last non-pad
    position through a scalar head.'''

    def __init__(self, task, lstm, head, head_bias, plan,
                 embedding=None, vocab_size=None):
        if task not in TASKS:
            raise ValueError('unknown task: {}'.format(task))
        self.task = task
        self.lstm = lstm
        self.head = head
        self.head_bias = head_bias
        self.plan = plan
        self.embedding = embedding
        self.vocab_size = vocab_size

    @classmethod
    def build(cls, task, vocab_size, hidden_size, embed_size, plan, rng,
              log_sigma2=LOG_SIGMA2_INIT):
        embedding = None
        if task == 'charlm':
            input_size = output_size = vocab_size
        else:
            input_size, output_size = embed_size, 1
            embedding = Tensor(
                    EMBEDDING_SCALE * rng.normal((vocab_size, embed_size)),
                    parameter=True)
        lstm = LSTMVarParams.initialize(
                rng, input_size, hidden_size, log_sigma2)
        head = VariationalWeight.from_values(
                orthogonal_init(rng, hidden_size, output_size).values,
                log_sigma2)
        head_bias = Tensor(np.zeros(output_size), parameter=True)
        return cls(task, lstm, head, head_bias, plan, embedding=embedding,
                   vocab_size=vocab_size)

    @property
    def output_size(self):
        return self.head.shape[1]

    def named_weights(self):
        '''Every weight matrix as (name, VariationalWeight)'''
        weights = []
        for gate in GATES:
            weights.append(('lstm.{}.wx'.format(gate),
                            self.lstm.gates[gate].wx))
            weights.append(('lstm.{}.wh'.format(gate),
                            self.lstm.gates[gate].wh))
        weights.append(('head.wy', self.head))
        return weights

    def variational_weights(self):
        '''Weights carrying a Sparse VD posterior under the noise plan'''
        result = []
        for name, vw in self.named_weights():
            if name.startswith('lstm.') and self.plan.lstm == 'sparse-vd':
                result.append((name, vw))
            elif name == 'head.wy' and self.plan.head == 'sparse-vd':
                result.append((name, vw))
        return result

    def deterministic_weights(self):
        '''Weight means without a posterior (subject to weight decay)'''
        variational = {name for name, _ in self.variational_weights()}
        weights = [(name + '.mean', vw.mean)
                   for name, vw in self.named_weights()
                   if name not in variational]
        if self.embedding is not None:
            weights.append(('embedding', self.embedding))
        return weights

    def named_parameters(self):
        '''Trainable tensors by name; log_sigma2 only for posterior weights'''
        variational = {name for name, _ in self.variational_weights()}
        params = {}
        for name, vw in self.named_weights():
            params[name + '.mean'] = vw.mean
            if name in variational:
                params[name + '.log_sigma2'] = vw.log_sigma2
        for gate in GATES:
            params['lstm.{}.bias'.format(gate)] = self.lstm.gates[gate].bias
        params['lstm.h0'] = self.lstm.h0
        params['lstm.c0'] = self.lstm.c0
        params['head.bias'] = self.head_bias
        if self.embedding is not None:
            params['embedding'] = self.embedding
        return params

    def sample_noise(self, batch_size, rng):
        embed_size = None
        if self.embedding is not None:
            embed_size = self.embedding.shape[1]
        return sample_noise(self.lstm, batch_size, self.plan, rng,
                            output_size=self.output_size,
                            embed_size=embed_size)

    def input_steps(self, inputs, noise=None):
        '''Turns an integer [batch x T] matrix into per-step input tensors'''
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[1] == 0:
            raise EmptySequenceError('inputs must be a nonempty batch x T')
        steps = []
        if self.task == 'charlm':
            eye = np.eye(self.lstm.input_size)
            for t in range(inputs.shape[1]):
                steps.append(Tensor(eye[inputs[:, t]]))
            return steps
        for t in range(inputs.shape[1]):
            x_t = take_rows(self.embedding, inputs[:, t])
            if noise is not None and noise.embedding_mask is not None:
                x_t = mul(x_t, noise.embedding_mask)
            steps.append(x_t)
        return steps

    def head_forward(self, h, noise=None):
        if noise is not None and noise.output_noise is not None:
            return variational_dense(h, self.head, self.head_bias,
                                     noise.output_noise)
        if noise is not None and noise.output_mask is not None:
            h = mul(h, noise.output_mask)
        return variational_dense(h, self.head, self.head_bias)

    def forward(self, batch, noise=None):
        '''Logits per step (char-LM) or a [batch x 1] prediction'''
        steps = self.input_steps(batch.inputs, noise)
        states = lstm_forward(self.lstm, steps, noise=noise)
        if self.task == 'charlm':
            return [self.head_forward(h, noise) for h in states]

        # state at the last non-pad position of every sequence
        lengths = np.asarray(batch.lengths)
        final = None
        for t, h in enumerate(states):
            select = (lengths - 1 == t).astype(np.float64)[:, None]
            if not select.any():
                continue
            picked = mul(h, select)
            final = picked if final is None else add(final, picked)
        return self.head_forward(final, noise)

    def predict(self, batch):
        '''Mean-weight outputs as arrays: [T x batch x V] or [batch]'''
        outputs = self.forward(batch, noise=None)
        if self.task == 'charlm':
            return np.stack([logits.values for logits in outputs])
        return outputs.values[:, 0]

    def state_arrays(self):
        '''Copies of every tensor, keyed by checkpoint name'''
        arrays = {}
        for name, vw in self.named_weights():
            arrays[name + '.mean'] = vw.mean.values.copy()
            arrays[name + '.log_sigma2'] = vw.log_sigma2.values.copy()
        for name, tensor in self.named_parameters().items():
            if name not in arrays:
                arrays[name] = tensor.values.copy()
        return arrays

    def load_arrays(self, arrays):
        '''Overwrites tensors in place from `state_arrays` output'''
        targets = {}
        for name, vw in self.named_weights():
            targets[name + '.mean'] = vw.mean
            targets[name + '.log_sigma2'] = vw.log_sigma2
        targets.update(self.named_parameters())
        for name, values in arrays.items():
            if name in targets:
                targets[name].values[...] = values


def deterministic_forward(model, batch):
    '''Forward pass with mean weights and no dropout masks'''
    return model.forward(batch, noise=None)
