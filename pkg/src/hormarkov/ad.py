"""Nested forward-mode automatic differentiation with tagged dual numbers.

A :class:`Dual` carries a primal part, a tangent part and an integer tag
identifying the differentiation pass that created it.  Primal and tangent
parts may be floats, numpy arrays (the batch dimension rides along for
free) or other duals with *older* tags, which is what makes nesting work
without perturbation confusion: a value created by a later pass always
wraps values from earlier passes.

User closures are written with ordinary arithmetic and numpy ufuncs
(``np.sin``, ``np.exp``, ...) and work unchanged on floats, arrays and
duals.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_tags = itertools.count(1)


def new_tag() -> int:
    return next(_tags)


def tag_of(x) -> int:
    return x.tag if isinstance(x, Dual) else 0


def _split(x, tag):
    """Return (primal, tangent) of ``x`` with respect to ``tag``."""
    if isinstance(x, Dual) and x.tag == tag:
        return x.val, x.eps
    return x, 0.0


class Dual:
    __slots__ = ("tag", "val", "eps")
    __array_priority__ = 1000

    def __init__(self, tag: int, val, eps):
        self.tag = tag
        self.val = val
        self.eps = eps

    def __repr__(self):
        return f"Dual(tag={self.tag}, val={self.val!r}, eps={self.eps!r})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        t = max(self.tag, tag_of(other))
        a, da = _split(self, t)
        b, db = _split(other, t)
        return Dual(t, a + b, da + db)

    __radd__ = __add__

    def __sub__(self, other):
        t = max(self.tag, tag_of(other))
        a, da = _split(self, t)
        b, db = _split(other, t)
        return Dual(t, a - b, da - db)

    def __rsub__(self, other):
        t = max(self.tag, tag_of(other))
        a, da = _split(other, t)
        b, db = _split(self, t)
        return Dual(t, a - b, da - db)

    def __mul__(self, other):
        t = max(self.tag, tag_of(other))
        a, da = _split(self, t)
        b, db = _split(other, t)
        return Dual(t, a * b, a * db + da * b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = max(self.tag, tag_of(other))
        a, da = _split(self, t)
        b, db = _split(other, t)
        q = a / b
        return Dual(t, q, (da - q * db) / b)

    def __rtruediv__(self, other):
        t = max(self.tag, tag_of(other))
        a, da = _split(other, t)
        b, db = _split(self, t)
        q = a / b
        return Dual(t, q, (da - q * db) / b)

    def __neg__(self):
        return Dual(self.tag, -self.val, -self.eps)

    def __pos__(self):
        return self

    def __pow__(self, other):
        if isinstance(other, (int, np.integer)) or (
            isinstance(other, float) and float(other).is_integer() and not isinstance(other, Dual)
        ):
            n = int(other)
            if n == 0:
                return Dual(self.tag, self.val ** 0, self.eps * 0.0)
            if n == 1:
                return self
            return Dual(self.tag, self.val**n, n * self.val ** (n - 1) * self.eps)
        if isinstance(other, Dual):
            return exp(other * log(self))
        return Dual(self.tag, self.val**other, other * self.val ** (other - 1) * self.eps)

    def __rpow__(self, other):
        return exp(self * log(other))

    def __abs__(self):
        return Dual(self.tag, abs(self.val), sign(self.val) * self.eps)

    # comparisons act on the innermost primal value
    def _cmp_value(self):
        return primal_value(self)

    def __lt__(self, other):
        return self._cmp_value() < primal_value(other)

    def __le__(self, other):
        return self._cmp_value() <= primal_value(other)

    def __gt__(self, other):
        return self._cmp_value() > primal_value(other)

    def __ge__(self, other):
        return self._cmp_value() >= primal_value(other)

    # numpy interop ----------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        fn = _UFUNCS.get(ufunc)
        if fn is None:
            return NotImplemented
        return fn(*inputs)


def primal_value(x):
    """Strip every tangent layer."""
    while isinstance(x, Dual):
        x = x.val
    return x


# elementary functions ------------------------------------------------------


def _unary(f, df):
    def g(x):
        if isinstance(x, Dual):
            return Dual(x.tag, g(x.val), df(x.val) * x.eps)
        return f(x)

    return g


def sign(x):
    return np.sign(primal_value(x))


exp = _unary(np.exp, lambda v: exp(v))
log = _unary(np.log, lambda v: 1.0 / v)
sin = _unary(np.sin, lambda v: cos(v))
cos = _unary(np.cos, lambda v: -sin(v))
tan = _unary(np.tan, lambda v: 1.0 + tan(v) * tan(v))
sqrt = _unary(np.sqrt, lambda v: 0.5 / sqrt(v))
tanh = _unary(np.tanh, lambda v: 1.0 - tanh(v) * tanh(v))
sinh = _unary(np.sinh, lambda v: cosh(v))
cosh = _unary(np.cosh, lambda v: sinh(v))
arctan = _unary(np.arctan, lambda v: 1.0 / (1.0 + v * v))
square = _unary(np.square, lambda v: 2.0 * v)
log1p = _unary(np.log1p, lambda v: 1.0 / (1.0 + v))
expm1 = _unary(np.expm1, lambda v: exp(v))


def _binary(op):
    return lambda a, b: op(a, b)


_UFUNCS = {
    np.add: _binary(lambda a, b: Dual.__add__(a, b) if isinstance(a, Dual) else Dual.__radd__(b, a)),
    np.subtract: _binary(lambda a, b: Dual.__sub__(a, b) if isinstance(a, Dual) else Dual.__rsub__(b, a)),
    np.multiply: _binary(lambda a, b: Dual.__mul__(a, b) if isinstance(a, Dual) else Dual.__rmul__(b, a)),
    np.true_divide: _binary(lambda a, b: Dual.__truediv__(a, b) if isinstance(a, Dual) else Dual.__rtruediv__(b, a)),
    np.power: _binary(lambda a, b: Dual.__pow__(a, b) if isinstance(a, Dual) else Dual.__rpow__(b, a)),
    np.negative: lambda a: -a,
    np.positive: lambda a: a,
    np.absolute: abs,
    np.exp: exp,
    np.log: log,
    np.sin: sin,
    np.cos: cos,
    np.tan: tan,
    np.sqrt: sqrt,
    np.tanh: tanh,
    np.sinh: sinh,
    np.cosh: cosh,
    np.arctan: arctan,
    np.square: square,
    np.log1p: log1p,
    np.expm1: expm1,
}


# differentiation drivers ---------------------------------------------------


def jvp(fn: Callable[..., Sequence], primals: Sequence, tangents: Sequence, *args):
    """Jacobian-vector product of ``fn(primals, *args)``.

    ``fn`` maps a list of input components to a list of output components.
    Returns ``(outputs, directional_derivatives)`` as lists of components;
    components that do not depend on the inputs get a zero tangent.
    """
    tag = new_tag()
    seeded = [Dual(tag, p, v) for p, v in zip(primals, tangents)]
    out = fn(seeded, *args)
    vals, tans = [], []
    for y in out:
        v, dv = _extract(y, tag)
        vals.append(v)
        tans.append(dv)
    return vals, tans


def _extract(y, tag):
    if isinstance(y, Dual):
        if y.tag == tag:
            return y.val, y.eps
        if y.tag > tag:
            # a newer tag leaked out of a nested pass: peel recursively
            v0, d0 = _extract(y.val, tag)
            v1, d1 = _extract(y.eps, tag)
            return Dual(y.tag, v0, v1), Dual(y.tag, d0, d1)
    return y, 0.0 * primal_value(y) if np.ndim(primal_value(y)) else 0.0


def derivative(f: Callable, x):
    """Derivative of a scalar function of one variable."""
    _, d = jvp(lambda u: [f(u[0])], [x], [1.0])
    return d[0]
