"""Reverse-mode differentiation over a recorded tape, float64 throughout.

The model graph is static and tiny, so there is no expression compiler:
each op computes its forward value eagerly and pushes a backward closure
onto the tape. Calling an op with ``tape=None`` runs pure inference.

The op set is exactly what the model needs: dense layers, batch norm,
ReLU, softmax / Gumbel-Softmax, cross-entropy, sparse aggregation,
segment pooling, concatenation, and row gathering.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Tensor:
    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad


def parameter(values):
    return Tensor(values, requires_grad=True)


def constant(values):
    return Tensor(values, requires_grad=False)


class Tape:
    """Records backward closures in forward order."""

    def __init__(self):
        self._ops = []

    def record(self, op):
        self._ops.append(op)

    def backward(self, loss, grad=None):
        if grad is None:
            if loss.values.size != 1:
                raise ShapeError("backward needs a scalar loss or a seed grad")
            grad = np.ones_like(loss.values)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for op in reversed(self._ops):
            op()


def _emit(tape, values, inputs, backward):
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        def op():
            if out.grad is not None:
                backward(out.grad)
        tape.record(op)
    return out


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(indices, width):
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((len(indices), width), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


# --- ops ---------------------------------------------------------------------


def linear(tape, x, weight, bias):
    if x.values.shape[-1] != weight.values.shape[0]:
        raise ShapeError(
            f"linear: input width {x.values.shape[-1]} != {weight.values.shape[0]}")
    values = x.values @ weight.values + bias.values

    def backward(g):
        if weight.requires_grad:
            weight.accumulate(x.values.T @ g)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ weight.values.T)

    return _emit(tape, values, (x, weight, bias), backward)


def relu(tape, x):
    mask = x.values > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * mask)

    return _emit(tape, x.values * mask, (x,), backward)


def softmax(tape, x):
    y = _softmax(x.values)

    def backward(g):
        if x.requires_grad:
            x.accumulate((g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _emit(tape, y, (x,), backward)


def cross_entropy(tape, logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or len(labels) != logits.values.shape[0]:
        raise ShapeError("cross_entropy: logits (n, c) and n labels")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    value = -logp[np.arange(n), labels].mean()
    if not np.isfinite(value):
        raise NumericError("non-finite cross-entropy loss")
    probs = np.exp(logp)

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            logits.accumulate(g * d / n)

    return _emit(tape, value, (logits,), backward)


def gumbel_softmax(tape, logits, temperature=1.0, hard=True, rng=None,
                   noise=None):
    """Sample a relaxed categorical per row.

    With ``hard=True`` the forward value is the exact one-hot at the
    perturbed argmax while gradients follow the soft relaxation
    (straight-through). ``noise`` overrides the sampled Gumbel noise,
    which keeps gradient checks deterministic.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(logits.values).all():
        raise NumericError("non-finite logits")
    if noise is None:
        u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=logits.values.shape)
        noise = -np.log(-np.log(u))
    z = (logits.values + noise) / temperature
    soft = _softmax(z)
    if hard:
        values = one_hot(soft.argmax(axis=-1), soft.shape[-1])
    else:
        values = soft

    def backward(g):
        if logits.requires_grad:
            dz = (g - (g * soft).sum(axis=-1, keepdims=True)) * soft
            logits.accumulate(dz / temperature)

    return _emit(tape, values, (logits,), backward)


def spmm(tape, matrix, x, matrix_t=None):
    """Sparse @ dense with a constant sparse matrix."""
    values = matrix @ x.values
    if matrix_t is None:
        matrix_t = matrix.T

    def backward(g):
        if x.requires_grad:
            x.accumulate(matrix_t @ g)

    return _emit(tape, values, (x,), backward)


def segment_sum(tape, x, segments, segment_count):
    """Row-wise sums per segment id (used to pool nodes into graphs)."""
    segments = np.asarray(segments, dtype=np.int64)
    values = np.zeros((segment_count, x.values.shape[1]), dtype=np.float64)
    np.add.at(values, segments, x.values)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g[segments])

    return _emit(tape, values, (x,), backward)


def concat(tape, tensors):
    widths = [t.values.shape[1] for t in tensors]
    values = np.concatenate([t.values for t in tensors], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate(g[:, lo:hi])

    return _emit(tape, values, tuple(tensors), backward)


def gather_rows(tape, x, indices):
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.values)
            np.add.at(full, indices, g)
            x.accumulate(full)

    return _emit(tape, x.values[indices], (x,), backward)


# --- building blocks ---------------------------------------------------------


class BatchNorm:
    """1d batch normalization with learned scale/shift and running stats."""

    def __init__(self, width, eps=1e-5, momentum=0.1):
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.eps = eps
        self.momentum = momentum

    def parameters(self):
        return [self.gamma, self.beta]


def batchnorm(tape, x, norm, training):
    gamma, beta = norm.gamma, norm.beta
    if training:
        n = x.values.shape[0]
        mean = x.values.mean(axis=0)
        var = x.values.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + norm.eps)
        xhat = (x.values - mean) * inv_std
        unbiased = var * n / (n - 1) if n > 1 else var
        m = norm.momentum
        norm.running_mean = (1 - m) * norm.running_mean + m * mean
        norm.running_var = (1 - m) * norm.running_var + m * unbiased

        def backward(g):
            if gamma.requires_grad:
                gamma.accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate(g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.values
                x.accumulate(inv_std / n * (
                    n * dxhat
                    - dxhat.sum(axis=0)
                    - xhat * (dxhat * xhat).sum(axis=0)))

        values = xhat * gamma.values + beta.values
    else:
        inv_std = 1.0 / np.sqrt(norm.running_var + norm.eps)
        xhat = (x.values - norm.running_mean) * inv_std
        values = xhat * gamma.values + beta.values

        def backward(g):
            if gamma.requires_grad:
                gamma.accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate(g.sum(axis=0))
            if x.requires_grad:
                x.accumulate(g * gamma.values * inv_std)

    return _emit(tape, values, (x, gamma, beta), backward)


class MLP:
    """Dense -> batch norm -> ReLU -> dense."""

    def __init__(self, in_width, hidden_width, out_width, rng):
        self.in_width = in_width
        self.hidden_width = hidden_width
        self.out_width = out_width
        self.weight1 = parameter(_uniform_init(rng, in_width, hidden_width))
        self.bias1 = parameter(_uniform_init(rng, in_width, hidden_width, bias=True))
        self.norm = BatchNorm(hidden_width)
        self.weight2 = parameter(_uniform_init(rng, hidden_width, out_width))
        self.bias2 = parameter(_uniform_init(rng, hidden_width, out_width, bias=True))

    def forward(self, x, training=False, tape=None):
        h = linear(tape, x, self.weight1, self.bias1)
        h = batchnorm(tape, h, self.norm, training)
        h = relu(tape, h)
        return linear(tape, h, self.weight2, self.bias2)

    __call__ = forward

    def parameters(self):
        return [self.weight1, self.bias1, *self.norm.parameters(),
                self.weight2, self.bias2]

    def state_dict(self, prefix=""):
        return {
            prefix + "weight1": self.weight1.values,
            prefix + "bias1": self.bias1.values,
            prefix + "gamma": self.norm.gamma.values,
            prefix + "beta": self.norm.beta.values,
            prefix + "running_mean": self.running_stats()[0],
            prefix + "running_var": self.running_stats()[1],
            prefix + "weight2": self.weight2.values,
            prefix + "bias2": self.bias2.values,
        }

    def running_stats(self):
        return self.norm.running_mean, self.norm.running_var

    def load_state_dict(self, state, prefix=""):
        self.weight1.values = np.array(state[prefix + "weight1"], dtype=np.float64)
        self.bias1.values = np.array(state[prefix + "bias1"], dtype=np.float64)
        self.norm.gamma.values = np.array(state[prefix + "gamma"], dtype=np.float64)
        self.norm.beta.values = np.array(state[prefix + "beta"], dtype=np.float64)
        self.norm.running_mean = np.array(state[prefix + "running_mean"], dtype=np.float64)
        self.norm.running_var = np.array(state[prefix + "running_var"], dtype=np.float64)
        self.weight2.values = np.array(state[prefix + "weight2"], dtype=np.float64)
        self.bias2.values = np.array(state[prefix + "bias2"], dtype=np.float64)


def _uniform_init(rng, fan_in, width, bias=False):
    bound = 1.0 / np.sqrt(fan_in)
    shape = (width,) if bias else (fan_in, width)
    return rng.uniform(-bound, bound, size=shape)


def mlp_forward(mlp, x, training=False, tape=None):
    return mlp.forward(x, training=training, tape=tape)


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self._t)
            v_hat = v / (1 - self.beta2 ** self._t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_checkpoint(path, named_arrays):
    """Flat named-tensor archive (.npz)."""
    np.savez(path, **named_arrays)


def load_checkpoint(path):
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}
