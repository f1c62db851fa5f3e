from logging import getLogger

import numpy as np
from scipy.special import expit, log_softmax, softmax

DTYPE = np.float64
_ACTIVE_GRAPHS = []


# Exceptions
class ShapeError(ValueError):
    '''Error class for incompatible tensor shapes'''
    pass


class NonFiniteError(ArithmeticError):
    '''Error class for NaN/Inf values'''
    pass


class Tensor:
    '''Dense float64 tensor with an optional gradient rule.

    Leaves created with `parameter=True` collect gradients in `backward`.
    Every other tensor is either a constant or the output of a primitive
    recorded on the active Graph.'''

    def __init__(self, values, parameter=False, name=None):
        self.values = np.array(values, dtype=DTYPE)
        self.parameter = parameter
        self.name = name
        self.grad = None
        self.parents = ()
        self.grad_fn = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def requires_grad(self):
        return self.parameter or self.grad_fn is not None

    def is_finite(self):
        '''Returns True if every value is finite'''
        return bool(np.isfinite(self.values).all())

    def item(self):
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return 'Tensor(shape={}, name={})'.format(self.shape, self.name)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    '''Tape of primitive operations recorded during a forward pass.

    Use as a context manager; primitives whose operands require gradients
    append their output node while the graph is active.'''

    def __init__(self):
        self.nodes = []

    def record(self, node):
        self.nodes.append(node)

    def __enter__(self):
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, *exc_info):
        _ACTIVE_GRAPHS.remove(self)
        return False


class Rng:
    '''Seeded random stream; `stream` separates independent uses of a seed'''

    def __init__(self, seed, stream=0):
        if seed < 0:
            raise ValueError('seed must be non-negative: {}'.format(seed))
        self.seed = int(seed)
        self.stream = int(stream)
        self.generator = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(
                    [self.seed, self.stream])))

    def normal(self, shape):
        return self.generator.standard_normal(tuple(shape))

    def uniform(self, shape, low=0.0, high=1.0):
        return self.generator.uniform(low, high, tuple(shape))

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high, shape=None):
        '''Uniform integers in [low, high)'''
        return self.generator.integers(low, high, size=shape)


def as_tensor(value):
    '''Wraps arrays and scalars into constant tensors'''
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_node(values, parents, grad_fn):
    '''Returns the output tensor of a primitive.

    `grad_fn(grad)` maps the output gradient to one gradient (or None) per
    parent. The node is recorded only when a graph is active and some
    parent requires a gradient.'''
    out = Tensor(values)
    if _ACTIVE_GRAPHS and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.grad_fn = grad_fn
        _ACTIVE_GRAPHS[-1].record(out)
    return out


def unbroadcast(grad, shape):
    '''Sums a broadcast gradient back to `shape`'''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
            a.values + b.values, (a, b),
            lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
            a.values - b.values, (a, b),
            lambda g: (unbroadcast(g, a.shape), -unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
            a.values * b.values, (a, b),
            lambda g: (unbroadcast(g * b.values, a.shape),
                       unbroadcast(g * a.values, b.shape)))


def neg(a):
    return make_node(-a.values, (a,), lambda g: (-g,))


def matmul(a, b):
    '''Matrix product of two 2-D tensors'''
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul shape mismatch: {} x {}'.format(
            a.shape, b.shape))
    return make_node(
            a.values @ b.values, (a, b),
            lambda g: (g @ b.values.T, a.values.T @ g))


def exp(a):
    out = np.exp(a.values)
    return make_node(out, (a,), lambda g: (g * out,))


def square(a):
    return make_node(a.values ** 2, (a,), lambda g: (2.0 * a.values * g,))


def sqrt(a, floor=0.0):
    '''Elementwise root of a non-negative tensor.

    The forward value is exact; `floor` bounds the argument used by the
    derivative so that zero entries keep a finite gradient.'''
    out = np.sqrt(np.maximum(a.values, 0.0))
    slope = 0.5 / np.sqrt(np.maximum(a.values, floor))
    return make_node(out, (a,), lambda g: (g * slope,))


def tanh(a):
    out = np.tanh(a.values)
    return make_node(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a):
    out = expit(a.values)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    '''log(1 + exp(a)), stable for large |a|'''
    return make_node(
            np.logaddexp(0.0, a.values), (a,),
            lambda g: (g * expit(a.values),))


def total(a):
    '''Sum of all entries as a scalar tensor'''
    return make_node(
            np.array(a.values.sum()), (a,),
            lambda g: (np.broadcast_to(g, a.shape).copy(),))


def take_rows(table, indices):
    '''Row lookup `table[indices]` for an integer index vector'''
    indices = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        grad = np.zeros_like(table.values)
        np.add.at(grad, indices, g)
        return (grad,)

    return make_node(table.values[indices], (table,), grad_fn)


def softmax_cross_entropy(logits, targets):
    '''Per-row negative log-likelihood of integer `targets`'''
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(targets.shape[0])
    log_probs = log_softmax(logits.values, axis=1)

    def grad_fn(g):
        grad = softmax(logits.values, axis=1)
        grad[rows, targets] -= 1.0
        return (grad * g[:, None],)

    return make_node(-log_probs[rows, targets], (logits,), grad_fn)


def backward(graph, loss, logger=getLogger()):
    '''Reverse sweep over `graph` from a scalar `loss`.

    Returns a dict mapping every parameter reachable from the loss to its
    gradient; the gradient is also stored on the parameter's `grad`.'''
    if loss.size != 1:
        raise ShapeError('loss must be a scalar, got shape {}'.format(
            loss.shape))

    grads = {id(loss): np.ones_like(loss.values)}
    params = {}
    if loss.parameter:
        params[id(loss)] = loss

    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        for parent, parent_grad in zip(node.parents, node.grad_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
            if parent.parameter:
                params[key] = parent

    result = {}
    for key, param in params.items():
        param.grad = grads[key]
        result[param] = param.grad

    logger.debug('backward: {} nodes, {} parameters'.format(
        len(graph.nodes), len(result)))
    return result


def sample_standard_normal(rng, shape):
    '''Returns i.i.d. N(0, 1) draws as a constant tensor'''
    if len(shape) == 0:
        raise ShapeError('shape must be nonempty')
    return Tensor(rng.normal(shape))


def orthogonal_init(rng, rows, cols):
    '''Returns a rows x cols tensor with orthonormal columns (or rows)'''
    if rows < 1 or cols < 1:
        raise ShapeError('orthogonal_init needs positive sizes: {}x{}'.format(
            rows, cols))
    normal = rng.normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(normal)
    # sign correction makes the factorization unique
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if rows < cols:
        q = q.T
    return Tensor(q)


def ensure_finite(tensor, what='tensor'):
    '''Raises NonFiniteError if `tensor` holds NaN/Inf'''
    values = tensor.values if isinstance(tensor, Tensor) else tensor
    if not np.isfinite(values).all():
        raise NonFiniteError('non-finite values in {}'.format(what))
    return tensor
