"""Finite-difference gradient cases shared by the autodiff unit tests and the
acceptance script.  Each case maps a seed to ``(f_tensor, f_numpy, arrays)``
where both functions return a scalar and ``f_numpy`` is plain numpy."""

import numpy as np
from oracles import central_diff, grad_close

from flowguard import autodiff as ad
from flowguard.autodiff import Tensor, grad
from flowguard.flow import build_flow, randomize


def _weights(rng, shape):
    return rng.standard_normal(shape)


def _elementwise(op_t, op_np, shape_a, shape_b, positive=False):
    def make(rng):
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        if positive:
            a, b = np.abs(a) + 0.5, np.abs(b) + 0.5
        w = _weights(rng, np.broadcast_shapes(shape_a, shape_b))
        return (lambda x, y: (op_t(x, y) * w).sum(), lambda x, y: float(np.sum(op_np(x, y) * w)), [a, b])

    return make


def _unary(op_t, op_np, shape=(3, 4), positive=False):
    def make(rng):
        a = rng.standard_normal(shape)
        if positive:
            a = np.abs(a) + 0.5
        w = _weights(rng, np.shape(op_np(a)))
        return (lambda x: (op_t(x) * w).sum(), lambda x: float(np.sum(op_np(x) * w)), [a])

    return make


def _matmul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = _weights(rng, (3, 2))
    return (lambda x, y: ad.mul(ad.matmul(x, y), w).sum(), lambda x, y: float(np.sum((x @ y) * w)), [a, b])


def _merge(rng):
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 3))
    ia, ib = [0, 3], [1, 2, 4]
    w = _weights(rng, (3, 5))

    def f_np(x, y):
        out = np.empty((3, 5))
        out[:, ia], out[:, ib] = x, y
        return float(np.sum(out * w))

    return (lambda x, y: ad.mul(ad.merge_cols([x, y], [ia, ib], 5), w).sum(), f_np, [a, b])


def _concat(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    w = _weights(rng, (6, 3))
    return (lambda x, y: ad.mul(ad.concat_rows([x, y]), w).sum(),
            lambda x, y: float(np.sum(np.concatenate([x, y]) * w)), [a, b])


def _scale_shift(rng):
    x, s, t = rng.standard_normal((4, 3)), 0.5 * rng.standard_normal((4, 3)), rng.standard_normal(3)
    w = _weights(rng, (4, 3))
    return (lambda a, b, c: ad.mul(ad.scale_shift(a, b, c), w).sum(),
            lambda a, b, c: float(np.sum((a * np.exp(b) + c) * w)), [x, s, t])


PRIMITIVES = {
    "add": _elementwise(ad.add, np.add, (3, 4), (4,)),
    "sub": _elementwise(ad.sub, np.subtract, (3, 1), (3, 4)),
    "mul": _elementwise(ad.mul, np.multiply, (3, 4), (3, 4)),
    "neg": _unary(ad.neg, np.negative),
    "matmul": _matmul,
    "transpose": _unary(ad.transpose, np.transpose, (2, 5)),
    "exp": _unary(ad.exp, np.exp),
    "log": _unary(ad.log, np.log, positive=True),
    "tanh": _unary(ad.tanh, np.tanh),
    "sum_all": _unary(lambda a: ad.tsum(a), np.sum),
    "sum_axis0": _unary(lambda a: ad.tsum(a, axis=0), lambda a: a.sum(axis=0)),
    "sum_axis1": _unary(lambda a: ad.tsum(a, axis=1), lambda a: a.sum(axis=1)),
    "mean_all": _unary(lambda a: ad.mean(a), np.mean),
    "mean_axis1": _unary(lambda a: ad.mean(a, axis=1), lambda a: a.mean(axis=1)),
    "take_cols": _unary(lambda a: ad.take_cols(a, [2, 0]), lambda a: a[:, [2, 0]]),
    "merge_cols": _merge,
    "concat_rows": _concat,
    "scale_shift": _scale_shift,
    "square": _unary(ad.square, np.square),
}


def flow_nll_case(seed: int, dim: int = 3):
    """Mean flow NLL as a function of the flattened parameters and the input."""
    rng = np.random.default_rng(seed)
    model = randomize(build_flow(dim, n_blocks=2, hidden=6, rng=seed), 0.3, rng)
    x = rng.standard_normal((5, dim))
    return model, x


def flow_gradient_ok(seed: int) -> bool:
    """Parameter and input gradients of the mean flow NLL against central differences."""
    model, x = flow_nll_case(seed)
    params = model.parameters()

    def f_np(ps, xx):
        return float(model.nll_tensor(xx, [Tensor(a) for a in ps]).data.mean())

    analytic = grad(lambda xx, *ps: model.nll_tensor(xx, list(ps)).mean(), x, *params)
    ok = grad_close(analytic[0], central_diff(lambda xx: f_np(params, xx), x))
    for i, p in enumerate(params):
        def fi(v, i=i):
            ps = list(params)
            ps[i] = v
            return f_np(ps, x)

        ok = ok and grad_close(analytic[i + 1], central_diff(fi, p))
    return ok


def primitive_ok(name: str, seed: int) -> bool:
    f_t, f_np, arrays = PRIMITIVES[name](np.random.default_rng(seed))
    analytic = grad(f_t, *arrays)
    for i, a in enumerate(arrays):
        def fi(v, i=i):
            args = list(arrays)
            args[i] = v
            return f_np(*args)

        if analytic[i].shape != a.shape or not grad_close(analytic[i], central_diff(fi, a)):
            return False
    return True
