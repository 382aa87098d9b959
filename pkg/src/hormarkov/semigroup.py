"""Monte Carlo estimators for the scheme's semigroup, densities and TV distances.

Paths are processed in fixed-size blocks.  Every block is a pure function of
``(seed, first path index, block size)`` and per-path values are concatenated
in path order before a single pairwise-summed reduction, so results do not
depend on the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from .errors import EstimatorError, ResourceCapError
from .localization import Thresholds, hoeffding_indicator, theta_derivative, theta_weight
from .malliavin import DEFAULT_CAP, ibp_weight_order1, malliavin_bundle
from .rng import StepStream, path_seed
from .scheme import SchemeMap, n_steps, path_jets, simulate_paths, simulate_terminal, tangent_flow

BLOCK = 4096
_P_REGULARIZE = 7


@dataclass
class EstimatorResult:
    value: np.ndarray | float
    std_error: np.ndarray | float
    n_paths: int
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(v):
            return np.asarray(v).tolist() if isinstance(v, np.ndarray) else v

        return {"value": conv(self.value), "std_error": conv(self.std_error), "n_paths": self.n_paths,
                "config": self.config, **{k: conv(v) for k, v in self.extras.items()}}


def run_blocks(fn: Callable[[int, int], np.ndarray], n_paths: int, block: int = BLOCK, threads: int = 1) -> np.ndarray:
    """Evaluate ``fn(first, count)`` over path blocks and concatenate in path order."""
    starts = list(range(0, n_paths, block))
    counts = [min(block, n_paths - s) for s in starts]
    if threads <= 1 or len(starts) == 1:
        parts = [fn(s, c) for s, c in zip(starts, counts)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, starts, counts))
    return np.concatenate(parts, axis=0)


def mean_and_se(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    M = values.shape[0]
    mean = values.sum(axis=0) / M
    if M < 2:
        return mean, np.zeros_like(mean)
    var = ((values - mean) ** 2).sum(axis=0) / (M - 1)
    return mean, np.sqrt(var / M)


def _apply(f, X, seed, first):
    vals = np.asarray(f(X), dtype=float)
    if vals.shape[0] != X.shape[0]:
        raise ValueError("f must return one value (or vector) per path")
    bad = ~np.isfinite(vals.reshape(len(vals), -1)).all(axis=1)
    if bad.any():
        i = first + int(np.argmax(bad))
        raise EstimatorError(f"non-finite integrand on path {i} (path seed {path_seed(seed, i)})")
    return vals


def _config(**kw):
    out = {}
    for k, v in kw.items():
        if hasattr(v, "name"):
            out[k] = v.name
        elif hasattr(v, "law_id"):
            out[k] = v.law_id
        elif isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (int, float, str, bool, list, tuple)) or v is None:
            out[k] = v
    return out


def terminal_samples(psi, law, x, T, delta, n_paths, seed, block=BLOCK, threads=1, split=False) -> np.ndarray:
    return run_blocks(lambda s, c: simulate_terminal(psi, law, x, delta, T, seed, c, s, split), n_paths, block, threads)


def expectation(psi: SchemeMap, law, x, T, delta, f, n_paths, seed, block=BLOCK, threads=1) -> EstimatorResult:
    """Estimate ``E[f(X_T) | X_0 = x]``."""

    def blk(s, c):
        return _apply(f, simulate_terminal(psi, law, x, delta, T, seed, c, s), seed, s)

    v, se = mean_and_se(run_blocks(blk, n_paths, block, threads))
    return EstimatorResult(v, se, n_paths, _config(scheme=psi, law=law, x=list(np.atleast_1d(x)), T=T, delta=delta, seed=seed))


def regularization_noise(seed, first, count, d) -> np.ndarray:
    """The independent standard Gaussian added to X_T, keyed by path index."""
    return StepStream(seed, np.arange(first, first + count), 0).normal(_P_REGULARIZE, d)


def regularized_expectation(psi, law, x, T, delta, theta, f, n_paths, seed, block=BLOCK, threads=1) -> EstimatorResult:
    """Estimate ``E[f(delta^theta G + X_T)]`` with G standard Gaussian."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    h = delta**theta

    def blk(s, c):
        X = simulate_terminal(psi, law, x, delta, T, seed, c, s)
        return _apply(f, X + h * regularization_noise(seed, s, c, psi.d), seed, s)

    v, se = mean_and_se(run_blocks(blk, n_paths, block, threads))
    cfg = _config(scheme=psi, law=law, x=list(np.atleast_1d(x)), T=T, delta=delta, theta=theta, seed=seed)
    return EstimatorResult(v, se, n_paths, cfg)


def localized_expectation(psi, law, x, T, delta, thresholds: Thresholds, f, n_paths, seed, block=512, threads=1) -> EstimatorResult:
    """Estimate ``E[Theta f(X_T)]``, the localization loss ``E[1 - Theta]`` and ``P(Lambda^c)``.

    Theta uses G = det(Xdot_T)^2; only first Malliavin derivatives are needed.
    """
    m_star = law.m_star

    def blk(s, c):
        p = simulate_paths(psi, law, x, delta, T, seed, c, s)
        b = malliavin_bundle(p, psi, law, order=1)
        th = theta_weight(p, b, thresholds, np.linalg.det(tangent_flow(p, psi)[:, -1]) ** 2, m_star)
        fx = _apply(f, p.X[:, -1], seed, s).reshape(c, -1)
        return np.column_stack([th[:, None] * fx, 1 - th, 1 - hoeffding_indicator(p, m_star)])

    vals = run_blocks(blk, n_paths, block, threads)
    v, se = mean_and_se(vals)
    cfg = _config(scheme=psi, law=law, x=list(np.atleast_1d(x)), T=T, delta=delta, seed=seed,
                  eta1=thresholds.eta1, eta2=thresholds.eta2)
    val, s_ = (v[:-2], se[:-2])
    if val.size == 1:
        val, s_ = float(val[0]), float(s_[0])
    extras = {"loss": float(v[-2]), "loss_se": float(se[-2]), "lambda_c": float(v[-1]), "lambda_c_se": float(se[-1])}
    return EstimatorResult(val, s_, n_paths, cfg, extras)


# ---------------------------------------------------------------------------
# densities

# probabilists' Hermite polynomials He_0..He_4, integer coefficients (ascending powers)
_HERMITE = [(1,), (0, 1), (-1, 0, 1), (0, -3, 0, 1), (3, 0, -6, 0, 1)]


def hermite(n: int, u) -> np.ndarray:
    if not 0 <= n <= 4:
        raise ValueError(f"Hermite order {n} unsupported (0..4)")
    return np.polynomial.polynomial.polyval(np.asarray(u, dtype=float), _HERMITE[n])


def _points(y, d):
    y = np.asarray(y, dtype=float)
    return y.reshape(-1, d), y.ndim <= 1 and (d > 1 or y.ndim == 0)


def density_derivative(samples, theta: float, delta: float, beta: Sequence[int], y, chunk: int = 2**22) -> np.ndarray:
    """``d^beta / dy^beta`` of the Gaussian-smoothed empirical density at ``y``.

    Equals ``(1/M) sum_m h^{-|beta|} (-1)^{|beta|} prod_k He_{beta_k}(u_k) N(y; X_m, h^2 I)``
    with ``h = delta^theta`` and ``u = (y - X_m)/h``.
    """
    X = np.asarray(samples, dtype=float)
    X = X.reshape(len(X), -1)
    M, d = X.shape
    beta = [int(b) for b in beta]
    if len(beta) != d:
        raise ValueError(f"multi-index length {len(beta)} != dimension {d}")
    if sum(beta) > 4:
        raise ValueError("derivative order above 4 unsupported")
    if theta <= 0:
        raise ValueError("theta must be positive")
    h = delta**theta
    Y, scalar = _points(y, d)
    out = np.empty(len(Y))
    step = max(1, chunk // max(M, 1))
    norm = (2 * math.pi) ** (-d / 2) * h ** (-d)
    coef = (-1) ** sum(beta) * h ** (-sum(beta))
    for a in range(0, len(Y), step):
        U = (Y[a : a + step, None, :] - X[None, :, :]) / h
        k = norm * np.exp(-0.5 * (U * U).sum(axis=2))
        for j, bj in enumerate(beta):
            if bj:
                k = k * hermite(bj, U[:, :, j])
        out[a : a + step] = coef * k.sum(axis=1) / M
    return out[0] if scalar else out


def density(samples, theta: float, delta: float, y) -> np.ndarray:
    """Gaussian-smoothed empirical density ``(1/M) sum_m N(y; X_m, delta^{2 theta} I)``."""
    X = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    return density_derivative(X, theta, delta, [0] * X.shape[1], y)


def density_standard_error(samples, theta: float, delta: float, y, chunk: int = 2**22) -> np.ndarray:
    """Pointwise standard error of ``density`` at ``y`` (sample std of the kernel values / sqrt(M))."""
    X = np.asarray(samples, dtype=float)
    X = X.reshape(len(X), -1)
    M, d = X.shape
    h = delta**theta
    Y, scalar = _points(y, d)
    out = np.empty(len(Y))
    step = max(1, chunk // max(M, 1))
    norm = (2 * math.pi) ** (-d / 2) * h ** (-d)
    for a in range(0, len(Y), step):
        U = (Y[a : a + step, None, :] - X[None, :, :]) / h
        k = norm * np.exp(-0.5 * (U * U).sum(axis=2))
        out[a : a + step] = k.std(axis=1, ddof=1) / math.sqrt(M)
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# total variation

MAX_GRID_NODES = 2**23


@dataclass
class Grid:
    lo: np.ndarray
    step: np.ndarray
    shape: tuple

    def axes(self):
        return [self.lo[k] + self.step[k] * np.arange(n) for k, n in enumerate(self.shape)]

    @property
    def cell(self) -> float:
        return float(np.prod(self.step))


def auto_grid(samples: Sequence[np.ndarray], h: float, nodes_per_std: int = 64, kernel_step: float = 8.0, pad: float = 6.0) -> Grid:
    """Tensor grid covering all samples plus ``pad`` bandwidths.

    Spacing is at most ``std / nodes_per_std`` per axis and at most
    ``h / kernel_step`` so the smoothing kernel is well resolved.
    """
    allx = np.concatenate([np.asarray(s, dtype=float).reshape(len(s), -1) for s in samples])
    d = allx.shape[1]
    lo = allx.min(axis=0) - pad * h
    hi = allx.max(axis=0) + pad * h
    std = allx.std(axis=0)
    step = np.full(d, h / kernel_step)
    pos = std > 0
    step[pos] = np.minimum(step[pos], std[pos] / nodes_per_std)
    shape = tuple(int(math.ceil((hi[k] - lo[k]) / step[k])) + 1 for k in range(d))
    if int(np.prod(shape, dtype=float)) > MAX_GRID_NODES:
        raise ResourceCapError(f"TV quadrature grid {shape} exceeds {MAX_GRID_NODES} nodes; use a larger bandwidth")
    return Grid(lo, step, shape)


def _bin(X, grid: Grid, weights=None) -> np.ndarray:
    """Linear binning: each sample spreads its mass over the 2^d surrounding nodes."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    M, d = X.shape
    w0 = np.ones(M) if weights is None else np.asarray(weights, dtype=float)
    pos = (X - grid.lo) / grid.step
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    shape = np.array(grid.shape)
    base = np.clip(base, 0, shape - 2)
    frac = np.clip(pos - base, 0.0, 1.0)
    out = np.zeros(int(np.prod(shape)))
    strides = np.cumprod([1] + list(shape[::-1][:-1]))[::-1]
    for corner in range(2**d):
        bits = [(corner >> k) & 1 for k in range(d)]
        idx = np.zeros(M, dtype=np.int64)
        wt = w0.copy()
        for k, b in enumerate(bits):
            idx += (base[:, k] + b) * strides[k]
            wt *= frac[:, k] if b else 1 - frac[:, k]
        out += np.bincount(idx, weights=wt, minlength=out.size)
    return out.reshape(grid.shape)


def smoothed_density_on_grid(X, h: float, grid: Grid, weights=None) -> np.ndarray:
    """Binned Gaussian KDE on the grid, normalized by the (weighted) sample size."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    total = len(X) if weights is None else float(np.sum(weights))
    q = _bin(X, grid, weights)
    for k in range(q.ndim):
        r = int(math.ceil(8 * h / grid.step[k]))
        u = np.arange(-r, r + 1) * grid.step[k] / h
        ker = np.exp(-0.5 * u * u)
        ker /= ker.sum() * grid.step[k]
        shape = [1] * q.ndim
        shape[k] = ker.size
        q = signal.fftconvolve(q, ker.reshape(shape), mode="same", axes=k)
    # FFT round-off can leave tiny negative values
    return np.maximum(q, 0.0) / total


def tv_distance(A, B, theta: float, delta: float, grid: Grid | None = None, n_boot: int = 16, seed: int = 0,
                h: float | None = None, scale=None) -> EstimatorResult:
    """Half the L1 distance between the Gaussian-smoothed laws of two samples.

    The bandwidth is ``delta^theta`` unless ``h`` is given.  With ``scale``
    (one positive number per axis) both samples are divided by it before
    smoothing, i.e. the kernel covariance is ``h^2 diag(scale)^2``; the TV
    of the unsmoothed laws is unaffected by this change of variables.
    ``std_error`` is a Poisson-bootstrap estimate; ``quadrature_residual`` is
    ``1 - integral of q_A`` on the grid.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if A.shape[1] != B.shape[1]:
        raise ValueError("samples have different dimensions")
    d = A.shape[1]
    if scale is not None:
        scale = np.broadcast_to(np.asarray(scale, dtype=float), (d,))
        A, B = A / scale, B / scale
    if d > 3:
        raise ResourceCapError("tensor quadrature limited to d <= 3; use tv_distance_sliced (lower bound)")
    h = delta**theta if h is None else float(h)
    grid = auto_grid([A, B], h) if grid is None else grid
    qa = smoothed_density_on_grid(A, h, grid)
    qb = smoothed_density_on_grid(B, h, grid)
    tv = 0.5 * np.abs(qa - qb).sum() * grid.cell
    resid = 1 - qa.sum() * grid.cell
    boots = []
    rng = np.random.default_rng(seed)
    for _ in range(n_boot):
        wa = rng.poisson(1.0, len(A)).astype(float)
        wb = rng.poisson(1.0, len(B)).astype(float)
        qa_b = smoothed_density_on_grid(A, h, grid, wa)
        qb_b = smoothed_density_on_grid(B, h, grid, wb)
        boots.append(0.5 * np.abs(qa_b - qb_b).sum() * grid.cell)
    se = float(np.std(boots, ddof=1)) if n_boot > 1 else float("nan")
    return EstimatorResult(float(tv), se, len(A) + len(B),
                           {"theta": theta, "delta": delta, "bandwidth": h, "grid_shape": list(grid.shape),
                            "scale": None if scale is None else scale.tolist()},
                           {"quadrature_residual": float(resid)})


def tv_distance_sliced(A, B, theta: float, delta: float, n_slices: int = 32, seed: int = 0, h: float | None = None) -> EstimatorResult:
    """Lower bound on the smoothed TV distance: max over random 1-d projections.

    Projections of the smoothed laws are the smoothed projected laws
    (unit directions), and TV can only shrink under a projection.
    """
    A = np.asarray(A, dtype=float).reshape(len(A), -1)
    B = np.asarray(B, dtype=float).reshape(len(B), -1)
    d = A.shape[1]
    h = delta**theta if h is None else float(h)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_slices):
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        r = tv_distance(A @ u, B @ u, theta, delta, n_boot=0, h=h)
        best = max(best, r.value)
    return EstimatorResult(best, float("nan"), len(A) + len(B),
                           {"theta": theta, "delta": delta, "bandwidth": h, "slices": n_slices},
                           {"label": "lower bound"})


# ---------------------------------------------------------------------------
# integration by parts


def ibp_identity_check(psi, law, x, T, delta, thresholds: Thresholds, tests, n_paths, seed, block=2048, threads=1,
                       cap=DEFAULT_CAP) -> list:
    """Monte Carlo check of ``E[d_h phi(F) Theta] = E[phi(F) H(F, Theta)[h]]`` for F = X_T.

    ``tests`` is a list of ``(name, phi, grad_phi)`` with ``phi`` mapping
    (M, d) to (M,) and ``grad_phi`` to (M, d).  Returns one record per test
    and direction with both sides, their standard errors and the z-score of
    the paired difference.
    """
    K = n_steps(T, delta)
    if K * psi.N > cap:
        raise ResourceCapError(f"steps*N = {K * psi.N} exceeds cap {cap}")
    m_star = law.m_star
    d = psi.d
    nt = len(tests)

    def blk(s, c):
        p = simulate_paths(psi, law, x, delta, T, seed, c, s)
        jets = path_jets(psi, p, order=2)
        b = malliavin_bundle(p, psi, law, order=2, cap=cap)
        G = np.linalg.det(tangent_flow(p, psi, jets)[:, -1]) ** 2
        th = theta_weight(p, b, thresholds, G, m_star)
        DT = theta_derivative(p, b, thresholds, m_star, psi=psi, jets=jets)
        H = ibp_weight_order1(b, th, DT)
        cols = []
        for _, phi, grad in tests:
            v = np.asarray(phi(b.XT), dtype=float)
            g = np.asarray(grad(b.XT), dtype=float).reshape(c, d)
            for h in range(d):
                cols += [g[:, h] * th, v * H[:, h]]
        cols.append(1 - th)
        return np.column_stack(cols)

    vals = run_blocks(blk, n_paths, block, threads)
    out = []
    col = 0
    for name, _, _ in tests:
        for h in range(d):
            lhs, rhs = vals[:, col], vals[:, col + 1]
            ml, sl = mean_and_se(lhs)
            mr, sr = mean_and_se(rhs)
            md, sd = mean_and_se(lhs - rhs)
            z = float(md / sd) if sd > 0 else (0.0 if md == 0 else math.inf)
            out.append({"test": name, "h": h, "lhs": float(ml), "lhs_se": float(sl), "rhs": float(mr),
                        "rhs_se": float(sr), "z": z, "n_paths": n_paths})
            col += 2
    loss, loss_se = mean_and_se(vals[:, -1])
    for r in out:
        r["theta_loss"] = float(loss)
    return out


def duality_check(psi, law, x, T, delta, functionals, n_paths, seed, block=2048, threads=1, cap=DEFAULT_CAP) -> list:
    """Monte Carlo check of ``E[F L G] = delta E[<DF, DG>] = E[G L F]``.

    ``functionals`` is a list of ``(name, g, grad_g, hess_g)`` acting on
    X_T; F ranges over the coordinates of X_T.
    """
    from .malliavin import functional_derivatives, ou_operator

    d = psi.d

    def blk(s, c):
        p = simulate_paths(psi, law, x, delta, T, seed, c, s)
        b = malliavin_bundle(p, psi, law, order=2, cap=cap)
        diag = b.DDX_diag()
        cols = []
        for _, g, gg, hg in functionals:
            DG, DDG = functional_derivatives(np.asarray(gg(b.XT)).reshape(c, d), np.asarray(hg(b.XT)).reshape(c, d, d), b.DX, diag)
            LG = ou_operator(DG, DDG, b.DGamma, b.delta)
            gv = np.asarray(g(b.XT), dtype=float)
            for a in range(d):
                inner = b.delta * np.einsum("mki,mki->m", b.DX[..., a], DG)
                cols += [b.XT[:, a] * LG, inner, gv * b.LX[:, a]]
        return np.column_stack(cols)

    vals = run_blocks(blk, n_paths, block, threads)
    out = []
    col = 0
    for name, *_ in functionals:
        for a in range(d):
            fl, inner, gl = vals[:, col], vals[:, col + 1], vals[:, col + 2]
            rec = {"functional": name, "coordinate": a}
            for key, left in (("F_LG", fl), ("G_LF", gl)):
                md, sd = mean_and_se(left - inner)
                rec[key] = float(mean_and_se(left)[0])
                rec[f"z_{key}"] = float(md / sd) if sd > 0 else 0.0
            rec["delta_DF_DG"] = float(mean_and_se(inner)[0])
            out.append(rec)
            col += 3
    return out
