"""Small reverse-mode differentiation engine over numpy arrays.

Every operation produces a :class:`Var`. When a :class:`Tape` is active the
operation is recorded together with a closure mapping the output gradient to
the gradients of its inputs; :func:`backward` replays the tape in reverse.
Without an active tape the same code runs eagerly and records nothing, which
is how inference paths avoid the bookkeeping.

Leaves that should receive gradients are :class:`Parameter` objects. Plain
numpy arrays and python scalars are treated as constants.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the primitives evaluated while it is active.

    Nodes are appended at creation time, so parents always precede children
    and the list is already topologically sorted.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


class Var:
    __array_ufunc__ = None

    def __init__(self, value, parents=(), grad_fn=None):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.value.shape})"

    # operator sugar -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Var):
    """Named leaf tensor with a gradient accumulator of the same shape."""

    def __init__(self, value, name=""):
        value = np.array(value, dtype=np.float64)
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _needs_grad(x):
    return isinstance(x, Parameter) or (isinstance(x, Var) and x.tape is not None)


def _make(value, parents, grad_fn):
    """Wrap a result; record it when a tape is active and an input is tracked."""
    out = Var(value)
    tape = active_tape()
    if tape is not None:
        tracked = tuple(p for p in parents if _needs_grad(p))
        if tracked:
            out.parents = parents
            out.grad_fn = grad_fn
            out.tape = tape
            tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def neg(a):
    return _make(-value_of(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def square(a):
    av = value_of(a)
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    out = np.exp(value_of(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    out = np.tanh(value_of(a))
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    av = value_of(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * av)),))


def clamp_min(a, lo):
    """max(a, lo); the gradient passes only where a > lo."""
    av = value_of(a)
    keep = av > lo
    return _make(np.where(keep, av, lo), (a,), lambda g: (g * keep,))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)

    def grad(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), grad)


def affine(x, weight, bias):
    """x @ weight + bias for a batch of row vectors."""
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)

    def grad(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _make(xv @ wv + bv, (x, weight, bias), grad)


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(out, (a,), grad)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a, axis=-1):
    av = value_of(a)

    def grad(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(av, axis=axis), (a,), grad)


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm; the gradient at the origin is taken as zero."""
    av = value_of(a)
    out = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * av / safe, 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), grad)


def reshape(a, shape):
    av = value_of(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def take(a, idx):
    """Basic or advanced indexing; repeated indices accumulate."""
    av = value_of(a)

    def grad(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return _make(av[idx], (a,), grad)


def concat(items, axis=-1):
    values = [value_of(x) for x in items]
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def grad(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate(values, axis=axis), tuple(items), grad)


def stack(items, axis=-1):
    values = [value_of(x) for x in items]

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(values)))

    return _make(np.stack(values, axis=axis), tuple(items), grad)


def grid_lookup(plane, coords):
    """Bilinear lookup of a (R0, R1, F) feature grid at (N, 2) unit coordinates.

    Coordinate 0 indexes axis 0 and coordinate 1 indexes axis 1; 0 and 1 map
    onto the first and last grid nodes. Out-of-range coordinates clamp to the
    boundary (and receive zero gradient there).
    """
    pv, cv = value_of(plane), value_of(coords)
    r0, r1, nf = pv.shape
    pos0 = cv[:, 0] * (r0 - 1)
    pos1 = cv[:, 1] * (r1 - 1)
    inside0 = (pos0 > 0) & (pos0 < r0 - 1)
    inside1 = (pos1 > 0) & (pos1 < r1 - 1)
    pos0 = np.clip(pos0, 0.0, r0 - 1)
    pos1 = np.clip(pos1, 0.0, r1 - 1)
    i0 = np.minimum(np.floor(pos0).astype(np.int64), r0 - 2)
    i1 = np.minimum(np.floor(pos1).astype(np.int64), r1 - 2)
    f0 = (pos0 - i0)[:, None]
    f1 = (pos1 - i1)[:, None]
    flat = pv.reshape(r0 * r1, nf)
    k00 = i0 * r1 + i1
    v00, v01 = flat[k00], flat[k00 + 1]
    v10, v11 = flat[k00 + r1], flat[k00 + r1 + 1]
    out = (1 - f0) * ((1 - f1) * v00 + f1 * v01) + f0 * ((1 - f1) * v10 + f1 * v11)

    want_coords = _needs_grad(coords)
    w4 = np.concatenate([(1 - f0) * (1 - f1), (1 - f0) * f1, f0 * (1 - f1), f0 * f1])
    rows = np.concatenate([k00, k00 + 1, k00 + r1, k00 + r1 + 1])
    flat_idx = (rows[:, None] * nf + np.arange(nf)).ravel()

    def grad(g):
        g4 = np.tile(g, (4, 1)) * w4
        gplane = np.bincount(flat_idx, g4.ravel(), minlength=r0 * r1 * nf).reshape(pv.shape)
        if not want_coords:
            return gplane, None
        d0 = (1 - f1) * (v10 - v00) + f1 * (v11 - v01)
        d1 = (1 - f0) * (v01 - v00) + f0 * (v11 - v10)
        gc = np.stack(
            [(g * d0).sum(axis=1) * (r0 - 1) * inside0, (g * d1).sum(axis=1) * (r1 - 1) * inside1],
            axis=1,
        )
        return gplane, gc

    return _make(out, (plane, coords), grad)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape, output, seed=None):
    """Propagate ``seed`` from ``output`` back through ``tape``.

    Gradients are accumulated (added) into the ``grad`` field of every
    :class:`Parameter` reached. A tape can be replayed only once.
    """
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape")
    out_val = value_of(output)
    if seed is None:
        if out_val.size != 1:
            raise ValueError("a seed is required for non-scalar outputs")
        seed = np.ones_like(out_val)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_val.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output {out_val.shape}")
    tape.consumed = True
    if isinstance(output, Parameter):
        output.grad += seed
        return
    if output.tape is not tape:
        return

    grads = {id(output): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            if isinstance(parent, Parameter):
                parent.grad += pg
            elif isinstance(parent, Var) and parent.tape is tape:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# optimiser


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction over a dict of named parameters.

    ``lr_scale`` optionally maps parameter names to per-parameter learning
    rate multipliers.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {k: p.grad for k, p in self.params.items()}
        self.step_count = adam_step(
            self.params, grads, (self.m, self.v, self.step_count), self.lr, self.betas, self.eps, self.lr_scale
        )[2]

    def state_dict(self):
        state = {"step_count": np.array(self.step_count), "lr": np.array(self.lr)}
        for k in self.params:
            state[f"m/{k}"] = self.m[k]
            state[f"v/{k}"] = self.v[k]
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"])
            self.v[k] = np.array(state[f"v/{k}"])


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
    """One in-place Adam update; returns the updated ``(m, v, step)`` state."""
    m, v, step = state
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(sorted(bad))}; step rejected")
    b1, b2 = betas
    step += 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    lr_scale = lr_scale or {}
    for k, p in params.items():
        if m[k].shape != p.value.shape or v[k].shape != p.value.shape:
            raise ValueError(f"optimiser state for {k} does not match parameter shape")
        g = grads[k]
        m[k] *= b1
        m[k] += (1.0 - b1) * g
        v[k] *= b2
        v[k] += (1.0 - b2) * g * g
        step_lr = lr * lr_scale.get(k, 1.0)
        p.value -= step_lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    return m, v, step
