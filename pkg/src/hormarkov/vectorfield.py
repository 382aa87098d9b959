"""Time-dependent vector fields, Lie brackets and the Hormander quantity.

Fields are closures ``fn(x, t) -> sequence of d components`` where ``x`` is
a sequence of ``d`` components.  Components may be floats, arrays (batch
evaluation) or dual numbers, so every derivative below is computed exactly
by nested forward-mode AD.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import ad
from .errors import CapabilityError

DEFAULT_MAX_ORDER = 4


def _as_components(x):
    """Split an array of shape (d,) or (M, d) into a list of d components."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return [x[j] for j in range(x.shape[0])]
    return [x[:, j] for j in range(x.shape[1])]


def _stack(comps, like):
    """Stack output components back into an array shaped like ``like``."""
    like = np.asarray(like, dtype=float)
    if like.ndim == 1:
        return np.array([float(c) for c in comps])
    m = like.shape[0]
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), (m,)) for c in comps], axis=1)


class Field:
    """A smooth vector field V(x, t) on R^d.

    Parameters
    ----------
    fn : callable
        ``fn(x, t)`` returning ``d`` components; ``x`` is a list of
        components.
    dim : int
        State dimension ``d``.
    max_order : int
        Highest derivative order this field may be asked for.
    name : str, optional
    """

    def __init__(self, fn: Callable, dim: int, max_order: int = DEFAULT_MAX_ORDER, name: str = "V"):
        self.fn = fn
        self.dim = int(dim)
        self.max_order = int(max_order)
        self.name = name

    def __repr__(self):
        return f"Field({self.name}, d={self.dim}, order={self.max_order})"

    def components(self, x: Sequence, t):
        out = list(self.fn(list(x), t))
        if len(out) != self.dim:
            raise ValueError(f"field {self.name} returned {len(out)} components, expected {self.dim}")
        return out

    def __call__(self, x, t=0.0) -> np.ndarray:
        return _stack(self.components(_as_components(x), t), x)

    def require(self, order: int) -> None:
        if order > self.max_order:
            raise CapabilityError(
                f"{self.name} needs derivative order {order} but supports only {self.max_order}"
            )

    # derived fields ---------------------------------------------------
    def directional(self, x: Sequence, t, v: Sequence):
        """Components of grad_x V(x, t) . v (AD-compatible)."""
        self.require(1)
        _, dv = ad.jvp(lambda u, tt: self.components(u, tt), list(x), list(v), t)
        return dv

    def time_derivative_components(self, x: Sequence, t):
        self.require(1)
        _, dv = ad.jvp(lambda s: self.components(x, s[0]), [t], [1.0])
        return dv


def constant_field(values: Sequence[float], max_order: int = 64, name: str = "const") -> Field:
    vals = [float(v) for v in values]
    return Field(lambda x, t: list(vals), len(vals), max_order=max_order, name=name)


def linear_field(A, name: str = "Ax") -> Field:
    A = np.asarray(A, dtype=float)
    d = A.shape[0]

    def fn(x, t):
        return [sum(A[i, j] * x[j] for j in range(d)) for i in range(d)]

    return Field(fn, d, max_order=64, name=name)


def field_sum(fields: Sequence[Field], weights: Sequence[float], name: str = "sum") -> Field:
    fields = list(fields)
    w = [float(c) for c in weights]

    def fn(x, t):
        outs = [f.components(x, t) for f in fields]
        return [sum(wk * o[i] for wk, o in zip(w, outs)) for i in range(fields[0].dim)]

    return Field(fn, fields[0].dim, max_order=min(f.max_order for f in fields), name=name)


def bracket_field(V: Field, W: Field) -> Field:
    """[V, W] = grad W . V - grad V . W as a new field."""
    if V.dim != W.dim:
        raise ValueError(f"dimension mismatch: {V.dim} vs {W.dim}")
    V.require(1)
    W.require(1)

    def fn(x, t):
        v = V.components(x, t)
        w = W.components(x, t)
        dw_v = W.directional(x, t, v)
        dv_w = V.directional(x, t, w)
        return [a - b for a, b in zip(dw_v, dv_w)]

    return Field(fn, V.dim, max_order=min(V.max_order, W.max_order) - 1, name=f"[{V.name},{W.name}]")


def time_derivative_field(V: Field) -> Field:
    V.require(1)
    return Field(
        lambda x, t: V.time_derivative_components(x, t), V.dim, max_order=V.max_order - 1, name=f"dt{V.name}"
    )


def jacobian_x(V: Field, x, t=0.0) -> np.ndarray:
    """Matrix of partial derivatives d V^i / d x^j at (x, t).

    ``x`` of shape (d,) gives a (d, d) matrix; shape (M, d) gives (M, d, d).
    """
    V.require(1)
    xc = _as_components(x)
    d = V.dim
    cols = []
    for j in range(d):
        e = [1.0 if k == j else 0.0 for k in range(d)]
        cols.append(_stack(V.directional(xc, t, e), x))
    return np.stack(cols, axis=-1)


def lie_bracket(V: Field, W: Field, x, t=0.0) -> np.ndarray:
    return bracket_field(V, W)(x, t)


class BracketSystem:
    """The drift V-bar_0 and diffusion fields V_1..V_N driving the recursion.

    ``V^[(a,0)] = [Vbar0, V^[a]] + dt V^[a] + 1/2 sum_i [V_i, [V_i, V^[a]]]``
    and ``V^[(a,j)] = [V_j, V^[a]]``.  Derived fields are cached per index
    so shared prefixes are built once.
    """

    def __init__(self, drift_bar: Field, diffusions: Sequence[Field]):
        self.drift_bar = drift_bar
        self.diffusions = list(diffusions)
        self.N = len(self.diffusions)
        self.dim = drift_bar.dim
        self._cache: dict = {}

    def _step(self, V: Field, j: int) -> Field:
        if j == 0:
            parts = [bracket_field(self.drift_bar, V), time_derivative_field(V)]
            weights = [1.0, 1.0]
            for Vi in self.diffusions:
                parts.append(bracket_field(Vi, bracket_field(Vi, V)))
                weights.append(0.5)
            f = field_sum(parts, weights, name=f"{V.name}^[0]")
            return f
        if not 1 <= j <= self.N:
            raise ValueError(f"bracket index {j} outside 0..{self.N}")
        return bracket_field(self.diffusions[j - 1], V)

    def iterate(self, base: Field, alpha: Sequence[int]) -> Field:
        alpha = tuple(int(a) for a in alpha)
        # index 0 consumes two derivative orders (nested double bracket)
        need = sum(2 if a == 0 else 1 for a in alpha)
        if need > base.max_order:
            raise CapabilityError(
                f"V^[{alpha}] needs derivative order {need} of {base.name}, which supports {base.max_order}"
            )
        key = (id(base), alpha)
        if key in self._cache:
            return self._cache[key]
        if not alpha:
            f = base
        else:
            f = self._step(self.iterate(base, alpha[:-1]), alpha[-1])
        self._cache[key] = f
        return f


def bracket_iterate(system: BracketSystem, base: Field, alpha: Sequence[int], x, t=0.0) -> np.ndarray:
    return system.iterate(base, alpha)(x, t)


def multi_indices(N: int, L: int):
    """All alpha in {0..N}^k, k = 0..L, in lexicographic order per length."""
    for k in range(L + 1):
        yield from itertools.product(range(N + 1), repeat=k)


def gram_matrix(system: BracketSystem, L: int, x, t=0.0) -> np.ndarray:
    """Sum over |alpha| <= L and i of V_i^[alpha] (V_i^[alpha])^T."""
    if L < 0:
        raise ValueError("L must be >= 0")
    x = np.asarray(x, dtype=float)
    d = system.dim
    M = np.zeros((d, d))
    for alpha in multi_indices(system.N, L):
        for Vi in system.diffusions:
            v = system.iterate(Vi, alpha)(x, t)
            M += np.outer(v, v)
    return 0.5 * (M + M.T)


def hormander_quantity(system: BracketSystem, L: int, x, t=0.0, rtol: float = 1e-12) -> float:
    """min(1, smallest eigenvalue of the bracket Gram matrix).

    Returns exactly 0.0 when the Gram matrix is singular to ``rtol`` times
    its spectral norm.
    """
    M = gram_matrix(system, L, x, t)
    eig = np.linalg.eigvalsh(M)
    scale = max(abs(eig[-1]), np.finfo(float).tiny)
    lam = eig[0]
    if lam <= rtol * scale:
        return 0.0
    return float(min(1.0, lam))
