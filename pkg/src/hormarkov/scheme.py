"""One-step scheme maps, path simulation and tangent flows.

A scheme map ``psi(x, t, z, y)`` advances the chain by
``X_{t+delta} = psi(X_t, t, sqrt(delta) Z_{t+delta}, delta)`` and must satisfy
``psi(x, t, 0, 0) = x``.  Grid times are handled as integer step counts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ad
from .errors import CapabilityError, GuardError, SimulationError
from .rng import StepStream, path_seed
from .vectorfield import DEFAULT_MAX_ORDER, Field, field_sum

RCOND_MIN = 1e-12


@dataclass(frozen=True)
class GrowthMeta:
    """Polynomial growth constants of the map's derivatives (frak D, frak p, D_r, p_r)."""

    D: float
    p: int
    D_r: float | None = None
    p_r: int | None = None


def _components(a, n):
    a = np.asarray(a, dtype=float)
    return [a[..., j] for j in range(n)]


def _broadcast_stack(comps, shape):
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), shape) for c in comps], axis=-1)


@dataclass
class StepJets:
    """Derivatives of psi at a batch of points; batch axes first.

    ``jx[..., a, b] = d psi^a / d x^b``, ``jz[..., a, i] = d psi^a / d z^i``,
    ``hxx[..., a, b, c] = d^2 psi^a / dx^b dx^c``,
    ``hzx[..., a, i, c] = d^2 psi^a / dz^i dx^c``,
    ``hzz[..., a, i, j] = d^2 psi^a / dz^i dz^j``.
    """

    jx: np.ndarray
    jz: np.ndarray
    hxx: np.ndarray | None = None
    hzx: np.ndarray | None = None
    hzz: np.ndarray | None = None


class SchemeMap:
    """The one-step map psi with AD derivative oracles.

    Parameters
    ----------
    psi : callable
        ``psi(x, t, z, y)`` with ``x`` (d components) and ``z`` (N
        components) given as lists; returns d components.
    d, N : int
        State and noise dimensions.
    max_order : int
        Highest joint derivative order the closure supports.
    growth_meta : GrowthMeta, optional
    """

    def __init__(
        self,
        psi: Callable,
        d: int,
        N: int,
        name: str = "scheme",
        max_order: int = DEFAULT_MAX_ORDER,
        growth_meta: GrowthMeta | None = None,
        check: bool = True,
    ):
        self.psi = psi
        self.d, self.N = int(d), int(N)
        self.name = name
        self.max_order = int(max_order)
        self.growth_meta = growth_meta
        if check:
            self._check_identity()

    def __repr__(self):
        return f"SchemeMap({self.name}, d={self.d}, N={self.N})"

    def _check_identity(self):
        rng = np.random.default_rng(0)
        xs = np.vstack([np.zeros(self.d), rng.normal(scale=2.0, size=(8, self.d))])
        for t in (0.0, 0.5, 1.0):
            out = self.step(xs, t, np.zeros((len(xs), self.N)), 0.0)
            err = np.abs(out - xs).max(axis=1) / (1 + np.abs(xs).max(axis=1))
            if err.max() > 1e-12:
                raise ValueError(f"{self.name}: psi(x, t, 0, 0) != x (max rel. deviation {err.max():.3g})")

    def components(self, x, t, z, y):
        out = list(self.psi(list(x), t, list(z), y))
        if len(out) != self.d:
            raise ValueError(f"{self.name} returned {len(out)} components, expected {self.d}")
        return out

    def step(self, X, t, dz, y) -> np.ndarray:
        """Apply psi to a batch: X (M, d), dz (M, N) -> (M, d)."""
        X = np.asarray(X, dtype=float)
        out = self.components(_components(X, self.d), t, _components(dz, self.N), y)
        return _broadcast_stack(out, X.shape[:-1])

    def jets(self, X, t, dz, y, order: int = 1) -> StepJets:
        """First (and optionally second) derivatives in (x, z) over a batch.

        ``t`` may be a scalar or an array broadcasting against the batch.
        """
        if order > self.max_order:
            raise CapabilityError(f"{self.name} supports derivative order {self.max_order}, asked {order}")
        X = np.asarray(X, dtype=float)
        dz = np.asarray(dz, dtype=float)
        d, N = self.d, self.N
        shape = X.shape[:-1]
        n = d + N
        u0 = _components(X, d) + _components(dz, N)

        def f(u):
            return self.components(u[:d], t, u[d:], y)

        def unit(k):
            return [1.0 if j == k else 0.0 for j in range(n)]

        first = np.empty(shape + (d, n))
        for k in range(n):
            _, tan = ad.jvp(f, u0, unit(k))
            first[..., :, k] = _broadcast_stack(tan, shape)
        jets = StepJets(jx=first[..., :, :d], jz=first[..., :, d:])
        if order < 2:
            return jets
        second = np.empty(shape + (d, n, n))
        for k in range(n):
            for l in range(k, n):
                inner = lambda u, l=l: ad.jvp(f, u, unit(l))[1]
                _, tan = ad.jvp(inner, u0, unit(k))
                block = _broadcast_stack(tan, shape)
                second[..., :, k, l] = block
                second[..., :, l, k] = block
        jets.hxx = second[..., :, :d, :d]
        jets.hzx = second[..., :, d:, :d]
        jets.hzz = second[..., :, d:, d:]
        return jets


def euler_scheme_from_fields(drift: Field, diffusions: Sequence[Field], name: str = "euler", growth_meta=None) -> SchemeMap:
    """psi(x, t, z, y) = x + V_0(x, t) y + sum_i V_i(x, t) z^i."""
    diffusions = list(diffusions)
    d, N = drift.dim, len(diffusions)

    def psi(x, t, z, y):
        v0 = drift.components(x, t)
        out = [x[a] + v0[a] * y for a in range(d)]
        for i, Vi in enumerate(diffusions):
            vi = Vi.components(x, t)
            out = [out[a] + vi[a] * z[i] for a in range(d)]
        return out

    order = min([drift.max_order] + [V.max_order for V in diffusions])
    return SchemeMap(psi, d, N, name=name, max_order=order, growth_meta=growth_meta)


@dataclass
class SchemeFields:
    """Vector fields read off a scheme map at (z, y) = (0, 0)."""

    tilde_V0: Field
    V0: Field
    V: list
    V0_bar: Field


def fields_from_scheme(psi: SchemeMap) -> SchemeFields:
    d, N = psi.d, psi.N
    if psi.max_order < 2:
        raise CapabilityError(f"{psi.name}: deriving V_0 needs order 2, map supports {psi.max_order}")
    zeros = [0.0] * N

    def dy(x, t):
        return ad.jvp(lambda s: psi.components(x, t, zeros, s[0]), [0.0], [1.0])[1]

    def dz(i):
        e = [1.0 if j == i else 0.0 for j in range(N)]
        return lambda x, t: ad.jvp(lambda z: psi.components(x, t, z, 0.0), zeros, e)[1]

    def dzz(i):
        e = [1.0 if j == i else 0.0 for j in range(N)]

        def g(x, t):
            inner = lambda z: ad.jvp(lambda w: psi.components(x, t, w, 0.0), z, e)[1]
            return ad.jvp(inner, zeros, e)[1]

        return g

    o = psi.max_order
    tilde_V0 = Field(dy, d, max_order=o - 1, name="tildeV0")
    V = [Field(dz(i), d, max_order=o - 1, name=f"V{i + 1}") for i in range(N)]
    second = [Field(dzz(i), d, max_order=o - 2, name=f"d2z{i + 1}") for i in range(N)]
    V0 = field_sum([tilde_V0] + second, [1.0] + [-0.5] * N, name="V0")

    def corr(x, t):
        total = [0.0] * d
        for Vi in V:
            g = Vi.directional(x, t, Vi.components(x, t))
            total = [a + b for a, b in zip(total, g)]
        return total

    correction = Field(corr, d, max_order=o - 2, name="gradV.V")
    V0_bar = field_sum([V0, correction], [1.0, -0.5], name="V0bar")
    return SchemeFields(tilde_V0=tilde_V0, V0=V0, V=V, V0_bar=V0_bar)


# ---------------------------------------------------------------------------
# paths


def n_steps(T: float, delta: float) -> int:
    """Integer number of grid steps to reach T; errors if T is not on the grid."""
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    k = T / delta
    K = int(round(k))
    if abs(k - K) > 1e-9 * max(1.0, k) or K < 0:
        raise ValueError(f"T={T} is not on the grid of step {delta}")
    return K


@dataclass
class PathRecord:
    """A batch of trajectories with their full split noise.

    Arrays are batch-first: ``X`` (M, K+1, d); ``Z``, ``U``, ``V``
    (M, K, N); ``chi`` (M, K).  Row ``k`` of the noise arrays holds the
    noise at grid time ``(k+1) * delta``.
    """

    delta: float
    n_steps: int
    x0: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    chi: np.ndarray
    U: np.ndarray
    V: np.ndarray
    seed: int
    path_ids: np.ndarray
    law_id: str = ""
    scheme_id: str = ""

    @property
    def T(self) -> float:
        return self.n_steps * self.delta

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dz(self) -> np.ndarray:
        """The scaled noise sqrt(delta) Z = chi U + (1 - chi) V, exactly."""
        return np.where(self.chi[..., None] == 1, self.U, self.V)

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.delta

    def path(self, i: int) -> "PathRecord":
        s = slice(i, i + 1)
        return PathRecord(
            self.delta, self.n_steps, self.x0, self.X[s], self.Z[s], self.chi[s], self.U[s], self.V[s],
            self.seed, self.path_ids[s], self.law_id, self.scheme_id,
        )

    def with_noise(self, U=None, V=None, chi=None) -> "PathRecord":
        """Copy with some split components replaced (X is left stale; see ``replay``)."""
        U = self.U if U is None else U
        V = self.V if V is None else V
        chi = self.chi if chi is None else chi
        dz = np.where(chi[..., None] == 1, U, V)
        return PathRecord(
            self.delta, self.n_steps, self.x0, self.X, dz / math.sqrt(self.delta), chi, U, V,
            self.seed, self.path_ids, self.law_id, self.scheme_id,
        )

    def header(self) -> dict:
        return {
            "delta": self.delta,
            "T": self.T,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "law_id": self.law_id,
            "scheme_id": self.scheme_id,
            "x0": np.asarray(self.x0).tolist(),
            "path_ids": self.path_ids.tolist(),
            "path_seeds": [path_seed(self.seed, int(i)) for i in self.path_ids],
        }

    def to_csv(self, directory) -> list:
        """Write one CSV per path plus a JSON header; returns the written paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d, N = self.X.shape[2], self.Z.shape[2]
        cols = (["step", "t"] + [f"X{j}" for j in range(d)] + [f"Z{i}" for i in range(N)] + ["chi"]
                + [f"U{i}" for i in range(N)] + [f"V{i}" for i in range(N)])
        written = []
        for m in range(self.n_paths):
            p = directory / f"path_{int(self.path_ids[m])}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for k in range(self.n_steps + 1):
                    if k == 0:
                        noise = ["nan"] * N + [""] + ["nan"] * (2 * N)
                    else:
                        noise = ([repr(float(v)) for v in self.Z[m, k - 1]] + [int(self.chi[m, k - 1])]
                                 + [repr(float(v)) for v in self.U[m, k - 1]] + [repr(float(v)) for v in self.V[m, k - 1]])
                    w.writerow([k, repr(k * self.delta)] + [repr(float(v)) for v in self.X[m, k]] + noise)
            written.append(p)
        hp = directory / "paths.json"
        hp.write_text(json.dumps(self.header(), indent=2))
        written.append(hp)
        return written

    @classmethod
    def from_csv(cls, directory) -> "PathRecord":
        directory = Path(directory)
        head = json.loads((directory / "paths.json").read_text())
        Xs, Zs, chis, Us, Vs = [], [], [], [], []
        for pid in head["path_ids"]:
            with open(directory / f"path_{pid}.csv") as fh:
                rows = list(csv.DictReader(fh))
            d = sum(1 for c in rows[0] if c.startswith("X"))
            N = sum(1 for c in rows[0] if c.startswith("Z"))
            Xs.append([[float(r[f"X{j}"]) for j in range(d)] for r in rows])
            Zs.append([[float(r[f"Z{i}"]) for i in range(N)] for r in rows[1:]])
            chis.append([int(r["chi"]) for r in rows[1:]])
            Us.append([[float(r[f"U{i}"]) for i in range(N)] for r in rows[1:]])
            Vs.append([[float(r[f"V{i}"]) for i in range(N)] for r in rows[1:]])
        return cls(
            head["delta"], head["n_steps"], np.asarray(head["x0"], dtype=float), np.asarray(Xs), np.asarray(Zs),
            np.asarray(chis, dtype=np.int8), np.asarray(Us), np.asarray(Vs), head["seed"],
            np.asarray(head["path_ids"], dtype=np.int64), head["law_id"], head["scheme_id"],
        )


def simulate_paths(psi: SchemeMap, law, x0, delta: float, T: float, seed: int, n_paths: int = 1, first_path: int = 0) -> PathRecord:
    """Simulate paths ``first_path .. first_path + n_paths - 1``.

    Each path's noise depends only on ``(seed, path index, step)``, so any
    block decomposition reproduces the same trajectories.
    """
    if law.N != psi.N:
        raise ValueError(f"law dimension {law.N} != scheme noise dimension {psi.N}")
    K = n_steps(T, delta)
    ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)
    M, d, N = n_paths, psi.d, psi.N
    X = np.empty((M, K + 1, d))
    X[:, 0] = np.asarray(x0, dtype=float)
    Z = np.empty((M, K, N))
    U = np.empty((M, K, N))
    V = np.empty((M, K, N))
    chi = np.empty((M, K), dtype=np.int8)
    for k in range(1, K + 1):
        s = law.sample_split(delta, StepStream(seed, ids, k))
        chi[:, k - 1], U[:, k - 1], V[:, k - 1], Z[:, k - 1] = s.chi, s.U, s.V, s.Z
        X[:, k] = psi.step(X[:, k - 1], (k - 1) * delta, s.scaled, delta)
        if not np.all(np.isfinite(X[:, k])):
            bad = ids[~np.all(np.isfinite(X[:, k]), axis=1)][0]
            raise SimulationError(f"non-finite state at t={k * delta} (step {k}) on path {bad}")
    return PathRecord(delta, K, np.asarray(x0, dtype=float), X, Z, chi, U, V, int(seed), ids,
                      getattr(law, "law_id", ""), psi.name)


def simulate_path(psi: SchemeMap, law, x0, delta: float, T: float, seed: int, index: int = 0) -> PathRecord:
    return simulate_paths(psi, law, x0, delta, T, seed, n_paths=1, first_path=index)


def replay(psi: SchemeMap, path: PathRecord, dz=None, x0=None) -> np.ndarray:
    """Recompute the states from stored (or substituted) scaled noise."""
    dz = path.dz if dz is None else dz
    x0 = path.x0 if x0 is None else np.asarray(x0, dtype=float)
    M = dz.shape[0]
    X = np.empty((M, path.n_steps + 1, psi.d))
    X[:, 0] = x0
    for k in range(1, path.n_steps + 1):
        X[:, k] = psi.step(X[:, k - 1], (k - 1) * path.delta, dz[:, k - 1], path.delta)
    return X


def path_jets(psi: SchemeMap, path: PathRecord, order: int = 1) -> StepJets:
    """Jets of psi along every step of every path, shaped (M, K, ...)."""
    M, K = path.n_paths, path.n_steps
    X = path.X[:, :K].reshape(M * K, psi.d)
    t = np.tile(np.arange(K) * path.delta, M)
    dz = path.dz.reshape(M * K, psi.N)
    j = psi.jets(X, t, dz, path.delta, order=order)

    def r(a):
        return None if a is None else a.reshape((M, K) + a.shape[1:])

    return StepJets(r(j.jx), r(j.jz), r(j.hxx), r(j.hzx), r(j.hzz))


# ---------------------------------------------------------------------------
# flows


@dataclass
class FlowPair:
    """Tangent flow and guarded inverse flow along a batch of paths.

    ``inverse[m, k]`` is zero where ``valid[m, k]`` is False, matching the
    guarded inverse flow that vanishes once any step leaves the guard.
    """

    forward: np.ndarray  # (M, K+1, d, d)
    inverse: np.ndarray | None = None
    valid: np.ndarray | None = None  # (M, K+1) bool
    valid_up_to: np.ndarray | None = None  # (M,) last valid step index
    heuristic: bool = False
    first_invalid: list = field(default_factory=list)


def tangent_flow(path: PathRecord, psi: SchemeMap, jets: StepJets | None = None) -> np.ndarray:
    """Products of step Jacobians, starting from the identity."""
    jets = path_jets(psi, path) if jets is None else jets
    M, K, d = path.n_paths, path.n_steps, psi.d
    F = np.empty((M, K + 1, d, d))
    F[:, 0] = np.eye(d)
    for k in range(K):
        F[:, k + 1] = jets.jx[:, k] @ F[:, k]
    return F


def inverse_tangent_flow(path: PathRecord, psi: SchemeMap, eta2: float, jets: StepJets | None = None) -> FlowPair:
    """Inverse tangent flow on steps where |Z_t| < eta2 and the step Jacobian is invertible.

    With growth metadata the guard ``sqrt(delta) eta2^(p+1) 8 D < 1`` must
    hold (GuardError otherwise).  Without it, each step is additionally
    required to satisfy ``||I - grad psi||_2 < 1`` and the result is
    flagged heuristic.
    """
    jets = path_jets(psi, path) if jets is None else jets
    M, K, d = path.n_paths, path.n_steps, psi.d
    meta = psi.growth_meta
    heuristic = meta is None
    if meta is not None:
        lhs = math.sqrt(path.delta) * eta2 ** (meta.p + 1) * 8 * meta.D
        if lhs >= 1:
            raise GuardError(f"sqrt(delta) eta2^(p+1) 8 D = {lhs:.4g} >= 1")
    J = jets.jx
    step_ok = np.linalg.norm(path.Z, axis=2) <= eta2
    rc = 1.0 / np.linalg.cond(J.reshape(-1, d, d), 1).reshape(M, K)
    step_ok &= np.isfinite(rc) & (rc >= RCOND_MIN)
    if heuristic:
        step_ok &= np.linalg.norm(np.eye(d) - J, ord=2, axis=(2, 3)) < 1
    valid = np.ones((M, K + 1), dtype=bool)
    valid[:, 1:] = np.cumprod(step_ok, axis=1).astype(bool)
    inv = np.zeros((M, K + 1, d, d))
    inv[:, 0] = np.eye(d)
    Jsafe = np.where(step_ok[..., None, None], J, np.eye(d))
    Jinv = np.linalg.inv(Jsafe)
    for k in range(K):
        inv[:, k + 1] = np.where(valid[:, k + 1, None, None], inv[:, k] @ Jinv[:, k], 0.0)
    valid_up_to = valid.sum(axis=1) - 1
    first_bad = [int(v) + 1 if v < K else None for v in valid_up_to]
    return FlowPair(tangent_flow(path, psi, jets), inv, valid, valid_up_to, heuristic, first_bad)


def step_gradient_bound_check(psi: SchemeMap, delta: float, eta2: float, probe_x, t: float = 0.0, n_z: int = 41) -> dict:
    """Worst ||I - grad_x psi||_F over probe states and |z| <= sqrt(delta) eta2.

    Passes when the worst deviation is below 1/2, the level at which the
    step Jacobian is guaranteed invertible with determinant bounded away
    from zero.  With growth metadata, also checks the pointwise bound
    ``sqrt(delta) 4 D max(|z/sqrt(delta)|^(p+1), 1)``.
    """
    probe_x = np.atleast_2d(np.asarray(probe_x, dtype=float))
    N, d = psi.N, psi.d
    rad = math.sqrt(delta) * eta2
    if N == 1:
        zs = np.linspace(-rad, rad, n_z)[:, None]
    else:
        rng = np.random.default_rng(0)
        g = rng.normal(size=(n_z * N, N))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        zs = np.vstack([np.zeros(N), g * rad, g * rad * rng.uniform(size=(len(g), 1))])
    X = np.repeat(probe_x, len(zs), axis=0)
    Zp = np.tile(zs, (len(probe_x), 1))
    J = psi.jets(X, t, Zp, delta).jx
    dev = np.linalg.norm(np.eye(d) - J, axis=(1, 2))
    worst = float(dev.max())
    report = {"worst": worst, "pass": worst < 0.5, "margin": 0.5 - worst, "heuristic": psi.growth_meta is None}
    meta = psi.growth_meta
    if meta is not None:
        zn = np.linalg.norm(Zp, axis=1) / math.sqrt(delta)
        bound = math.sqrt(delta) * 4 * meta.D * np.maximum(zn ** (meta.p + 1), 1.0)
        report["bound_ok"] = bool(np.all(dev <= bound * (1 + 1e-12)))
        report["guard_lhs"] = math.sqrt(delta) * eta2 ** (meta.p + 1) * 8 * meta.D
        report["pass"] = report["pass"] and report["bound_ok"] and report["guard_lhs"] < 1
    return report


# ---------------------------------------------------------------------------
# builtin maps


def identity_scheme(d: int = 1, N: int = 1) -> SchemeMap:
    return SchemeMap(lambda x, t, z, y: list(x), d, N, name="identity", max_order=64,
                     growth_meta=GrowthMeta(D=1.0, p=0))


def random_walk_scheme(d: int = 1) -> SchemeMap:
    """psi(x, t, z, y) = x + z with N = d."""
    return SchemeMap(lambda x, t, z, y: [x[a] + z[a] for a in range(d)], d, d, name="random-walk",
                     max_order=64, growth_meta=GrowthMeta(D=1.0, p=0))


def linear_growth_scheme() -> SchemeMap:
    """psi(x, t, z, y) = x (1 + y), deterministic, d = N = 1."""
    return SchemeMap(lambda x, t, z, y: [x[0] * (1 + y)], 1, 1, name="linear-growth", max_order=64)


def kinetic_fields(b=(0.0, -1.0, 0.5), s=(1.0, 0.0, 0.25)):
    """Drift and diffusion fields of the kinetic (position/velocity) model.

    ``b(v) = b0 + b1 v + b2 sin v`` and ``sigma(v) = s0 + s1 v + s2 cos v``
    act on the first coordinate; the second integrates the first.
    """
    b0, b1, b2 = (float(c) for c in b)
    s0, s1, s2 = (float(c) for c in s)

    def drift(x, t):
        return [b0 + b1 * x[0] + b2 * np.sin(x[0]), x[0]]

    def diff(x, t):
        return [s0 + s1 * x[0] + s2 * np.cos(x[0]), 0.0 * x[0]]

    return Field(drift, 2, max_order=64, name="V0"), Field(diff, 2, max_order=64, name="V1")


def kinetic_scheme(b=(0.0, -1.0, 0.5), s=(1.0, 0.0, 0.25)) -> SchemeMap:
    """Euler scheme of the kinetic model: X1 += b dt + sigma dW, X2 += X1 dt."""
    V0, V1 = kinetic_fields(b, s)
    D = 1.0 + abs(b[1]) + abs(b[2]) + abs(s[1]) + abs(s[2])
    sch = euler_scheme_from_fields(V0, [V1], name="kinetic", growth_meta=GrowthMeta(D=D, p=0))
    return sch


def quadratic_scheme() -> SchemeMap:
    """psi(x, t, z, y) = x + z + x^2 y / 2 (d = N = 1)."""
    return SchemeMap(lambda x, t, z, y: [x[0] + z[0] + 0.5 * x[0] * x[0] * y], 1, 1, name="quadratic",
                     max_order=64)


def iterated_sum_scheme(order: int = 1) -> SchemeMap:
    """Iterated partial sums: new_0 = x_0 + z, new_k = x_k + y new_{k-1}.

    With unit-variance noise, after n = 1/delta steps ``X_T`` holds the
    normalized partial sums and their iterated Riemann sums.
    """
    d = order + 1

    def psi(x, t, z, y):
        out = [x[0] + z[0]]
        for k in range(1, d):
            out.append(x[k] + y * out[k - 1])
        return out

    return SchemeMap(psi, d, 1, name=f"iterated-sum-{order}", max_order=64)


SCHEMES = {
    "identity": identity_scheme,
    "random-walk": random_walk_scheme,
    "linear-growth": linear_growth_scheme,
    "kinetic": kinetic_scheme,
    "quadratic": quadratic_scheme,
    "iterated-sum": iterated_sum_scheme,
}


def make_scheme(name: str, **params) -> SchemeMap:
    try:
        factory = SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; known: {sorted(SCHEMES)}") from None
    return factory(**params)


def simulate_terminal(psi: SchemeMap, law, x0, delta: float, T: float, seed: int, n_paths: int,
                      first_path: int = 0, split: bool = False) -> np.ndarray:
    """States X_T only, for paths ``first_path ..``, shape (n_paths, d).

    With ``split=False`` the noise is drawn directly from the law, which has
    the same distribution as the split reconstruction and is cheaper.
    With ``split=True`` the states equal those of ``simulate_paths``.
    """
    K = n_steps(T, delta)
    ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)
    X = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, psi.d)).copy()
    sq = math.sqrt(delta)
    for k in range(1, K + 1):
        stream = StepStream(seed, ids, k)
        dz = law.sample_split(delta, stream).scaled if split else sq * law.sample(stream)
        X = psi.step(X, (k - 1) * delta, dz, delta)
        if not np.all(np.isfinite(X)):
            bad = ids[~np.all(np.isfinite(X), axis=1)][0]
            raise SimulationError(f"non-finite state at t={k * delta} (step {k}) on path {bad}")
    return X
