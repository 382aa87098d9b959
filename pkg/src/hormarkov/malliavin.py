"""Discrete Malliavin calculus along simulated paths.

All routines are batched over paths: arrays carry the path axis first.
Derivative tensors use the layout ``DX[m, w, i, a] = D_{(w,i)} X_T^a`` where
``w = 0..K-1`` indexes the noise of grid time ``(w+1) delta``, and
``DDX[m, v, j, w, i, a] = D_{(v,j)} D_{(w,i)} X_T^a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GuardError, ResourceCapError, WeightError
from .noise import bump_log_gradient
from .scheme import FlowPair, PathRecord, SchemeMap, StepJets, fields_from_scheme, path_jets
from .vectorfield import BracketSystem, Field

DEFAULT_CAP = 256  # steps * N allowed for second derivatives
SINGULAR_RCOND = 1e-13  # lambda_min / lambda_max below this counts as singular


def _check_cap(K, N, cap):
    if K * N > cap:
        raise ResourceCapError(f"second derivatives need (steps*N)^2 memory; steps*N = {K * N} exceeds cap {cap}")


def first_derivatives(path: PathRecord, psi: SchemeMap, jets: StepJets | None = None) -> np.ndarray:
    """D X_T by the forward recursion ``D X_t = chi_t dz psi 1_{w=t} + grad psi . D X_{t-delta}``."""
    jets = path_jets(psi, path) if jets is None else jets
    M, K, N, d = path.n_paths, path.n_steps, psi.N, psi.d
    chi = path.chi.astype(float)
    D = np.zeros((M, K, N, d))
    for s in range(K):
        D[:, :s] = np.einsum("mab,mwib->mwia", jets.jx[:, s], D[:, :s])
        D[:, s] = chi[:, s, None, None] * jets.jz[:, s].transpose(0, 2, 1)
    return D


def variation_of_constants(path: PathRecord, psi: SchemeMap, flows: FlowPair, jets: StepJets | None = None) -> np.ndarray:
    """Closed form ``chi_w Xdot_T Xring_w dz psi(step w)``; valid only on guarded paths."""
    jets = path_jets(psi, path) if jets is None else jets
    chi = path.chi.astype(float)
    XT = flows.forward[:, -1]
    inv = flows.inverse[:, 1:]  # Xring at grid time w
    out = np.einsum("mab,mwbc,mwci->mwia", XT, inv, jets.jz)
    return chi[:, :, None, None] * out


def second_derivatives(path: PathRecord, psi: SchemeMap, jets: StepJets | None = None, cap: int = DEFAULT_CAP) -> np.ndarray:
    """D D X_T by differentiating the first-order recursion."""
    M, K, N, d = path.n_paths, path.n_steps, psi.N, psi.d
    _check_cap(K, N, cap)
    if jets is None or jets.hxx is None:
        jets = path_jets(psi, path, order=2)
    chi = path.chi.astype(float)
    D = np.zeros((M, K, N, d))
    DD = np.zeros((M, K, N, K, N, d))
    for s in range(K):
        t = s + 1
        J, H, Hzx, Hzz = jets.jx[:, s], jets.hxx[:, s], jets.hzx[:, s], jets.hzz[:, s]
        c = chi[:, s]
        Dp = D[:, :t]
        blk = np.einsum("mab,mvjwib->mvjwia", J, DD[:, :t, :, :t])
        tmp = np.einsum("mabc,mvjb->mvjac", H, Dp)
        blk += np.einsum("mvjac,mwic->mvjwia", tmp, Dp)
        src = c[:, None, None, None, None] * np.einsum("maic,mvjc->mvjia", Hzx, Dp)
        blk[:, :, :, s] += src
        blk[:, s] += src.transpose(0, 3, 1, 2, 4)
        blk[:, s, :, s] += c[:, None, None, None] * Hzz.transpose(0, 3, 2, 1)
        DD[:, :t, :, :t] = blk
        D[:, :s] = np.einsum("mab,mwib->mwia", J, D[:, :s])
        D[:, s] = c[:, None, None] * jets.jz[:, s].transpose(0, 2, 1)
    return DD


def gamma_weights(path: PathRecord, r_star: float, z_star=None) -> np.ndarray:
    """``D_{(t,i)} Gamma_t = delta^{-1/2} chi_t d_i ln phi_{r*/2}(delta^{-1/2} U_t - z*)``."""
    N = path.U.shape[-1]
    z_star = np.zeros(N) if z_star is None else np.asarray(z_star, dtype=float)
    sd = math.sqrt(path.delta)
    g = bump_log_gradient(r_star / 2, path.U / sd - z_star)
    return path.chi[..., None] * g / sd


def covariance(DX: np.ndarray, delta: float):
    """Malliavin covariance ``sigma``, its inverse and ``det gamma`` per path.

    Singular paths (``lambda_min <= SINGULAR_RCOND * lambda_max``, which also
    catches rank-deficient sigma whose determinant rounds to a tiny
    negative number) get ``gamma = nan`` and ``det_gamma = inf``.
    """
    M, K, N, d = DX.shape
    flat = DX.reshape(M, K * N, d)
    sigma = delta * np.einsum("mka,mkb->mab", flat, flat)
    sigma = 0.5 * (sigma + sigma.transpose(0, 2, 1))
    lam = np.linalg.eigvalsh(sigma)
    ok = lam[:, 0] > SINGULAR_RCOND * lam[:, -1]
    det = np.prod(lam, axis=1)
    gamma = np.full_like(sigma, np.nan)
    if ok.any():
        gamma[ok] = np.linalg.inv(sigma[ok])
    det_gamma = np.full(M, np.inf)
    det_gamma[ok] = 1.0 / det[ok]
    return sigma, gamma, det_gamma


def diagonal(DD: np.ndarray) -> np.ndarray:
    """Entries ``DD[(t,i),(t,i)]``, shape (M, K, N, ...)."""
    M, K, N = DD.shape[:3]
    rest = DD.shape[5:]
    flat = DD.reshape((M, K * N, K * N) + rest)
    idx = np.arange(K * N)
    return flat[:, idx, idx].reshape((M, K, N) + rest)


def ou_operator(DF: np.ndarray, DDF_diag: np.ndarray, DGamma: np.ndarray, delta: float) -> np.ndarray:
    """``L F = -delta sum_{t,i} (D_{(t,i)} D_{(t,i)} F + D_{(t,i)} F D_{(t,i)} Gamma_t)``.

    ``DF`` and ``DDF_diag`` have shape (M, K, N, ...) for vector-valued F.
    """
    extra = DF.ndim - 3
    G = DGamma.reshape(DGamma.shape + (1,) * extra)
    return -delta * (DDF_diag + DF * G).sum(axis=(1, 2))


def functional_derivatives(grad: np.ndarray, hess: np.ndarray, DX: np.ndarray, DDX_diag: np.ndarray | None = None):
    """First derivative and diagonal second derivative of ``g(X_T)``.

    ``grad`` (M, d) and ``hess`` (M, d, d) are the derivatives of g at X_T.
    """
    DG = np.einsum("ma,mkia->mki", grad, DX)
    if DDX_diag is None:
        return DG, None
    DDG = np.einsum("mab,mkia,mkib->mki", hess, DX, DX) + np.einsum("ma,mkia->mki", grad, DDX_diag)
    return DG, DDG


def sobolev_norm(F: np.ndarray, DF: np.ndarray | None, DDF: np.ndarray | None, delta: float, q: int, start: int = 0) -> np.ndarray:
    """``(sum_{start <= j <= q} delta^j sum_alpha |D_alpha F|^2)^{1/2}`` per path.

    ``F`` has shape (M, ...); ``DF`` (M, K, N, ...); ``DDF`` (M, K, N, K, N, ...).
    """
    if q > 2 or q < 0:
        raise ValueError(f"Sobolev order q={q} unsupported (0 <= q <= 2)")
    M = F.shape[0]
    parts = []
    if start <= 0:
        parts.append((np.asarray(F).reshape(M, -1) ** 2).sum(axis=1))
    if q >= 1 and start <= 1:
        parts.append(delta * (DF.reshape(M, -1) ** 2).sum(axis=1))
    if q >= 2:
        parts.append(delta**2 * (DDF.reshape(M, -1) ** 2).sum(axis=1))
    return np.sqrt(np.sum(parts, axis=0))


def sigma_derivative(DX: np.ndarray, DDX: np.ndarray, delta: float) -> np.ndarray:
    """``D_{(v,j)} sigma``, shape (M, K, N, d, d)."""
    A = delta * np.einsum("mvjwia,mwib->mvjab", DDX, DX)
    return A + A.transpose(0, 1, 2, 4, 3)


@dataclass
class MalliavinBundle:
    """Per-path Malliavin quantities for F = X_T (batched over paths)."""

    delta: float
    XT: np.ndarray
    DX: np.ndarray
    DGamma: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    det_gamma: np.ndarray
    DDX: np.ndarray | None = None
    LX: np.ndarray | None = None
    flows: FlowPair | None = None
    theta: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.XT.shape[0]

    def DDX_diag(self) -> np.ndarray:
        return diagonal(self.DDX)

    def lambda_min(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.sigma)[:, 0]

    def summary_rows(self, path_seeds) -> list:
        """Rows (path_seed, det_gamma, lambda_min, theta, |LX|) for CSV export."""
        lm = self.lambda_min()
        th = self.theta if self.theta is not None else np.full(self.n_paths, np.nan)
        lx = np.linalg.norm(self.LX, axis=1) if self.LX is not None else np.full(self.n_paths, np.nan)
        return [(int(s), float(a), float(b), float(c), float(e)) for s, a, b, c, e in zip(path_seeds, self.det_gamma, lm, th, lx)]


def malliavin_bundle(path: PathRecord, psi: SchemeMap, law, order: int = 2, cap: int = DEFAULT_CAP) -> MalliavinBundle:
    """Assemble D X_T, sigma, gamma and (for order 2) D D X_T and L X_T."""
    jets = path_jets(psi, path, order=order)
    DX = first_derivatives(path, psi, jets)
    DG = gamma_weights(path, law.r_star, law.z_star)
    sigma, gamma, det_gamma = covariance(DX, path.delta)
    b = MalliavinBundle(path.delta, path.X[:, -1].copy(), DX, DG, sigma, gamma, det_gamma)
    if order >= 2:
        b.DDX = second_derivatives(path, psi, jets, cap=cap)
        b.LX = ou_operator(DX, diagonal(b.DDX), DG, path.delta)
    return b


def ibp_weight_order1(bundle: MalliavinBundle, G: np.ndarray, DG: np.ndarray, h: int | None = None) -> np.ndarray:
    """Order-1 integration-by-parts weight ``H(F, G)[h]`` for F = X_T.

    ``H[h] = G (gamma L F)_h - delta sum_{h'} <D(G gamma[h, h']), D F_{h'}>``
    with ``D gamma = -gamma (D sigma) gamma``, so that
    ``E[d_h phi(F) G] = E[phi(F) H(F, G)[h]]``.  Paths with ``G = 0`` get
    weight 0 regardless of their covariance.  Returns shape (M,) when ``h``
    is given, else (M, d).
    """
    if bundle.DDX is None or bundle.LX is None:
        raise WeightError("IBP weight needs second derivatives (bundle order 2)")
    G = np.asarray(G, dtype=float)
    live = G != 0
    if np.any(live & ~np.isfinite(bundle.det_gamma)):
        raise WeightError("singular Malliavin covariance on a path with G != 0; localize first")
    M, K, N, d = bundle.DX.shape
    H = np.zeros((M, d))
    if live.any():
        gam = bundle.gamma[live]
        DX = bundle.DX[live]
        Ds = sigma_derivative(DX, bundle.DDX[live], bundle.delta)
        Dgam = -np.einsum("mab,mvjbc,mce->mvjae", gam, Ds, gam)
        g = G[live]
        # D(G gamma[h,h']) = DG gamma + G D gamma
        DGg = DG[live][:, :, :, None, None] * gam[:, None, None] + g[:, None, None, None, None] * Dgam
        cross = np.einsum("mvjhk,mvjk->mh", DGg, DX)
        H[live] = g[:, None] * np.einsum("mhk,mk->mh", gam, bundle.LX[live]) - bundle.delta * cross
    return H if h is None else H[:, h]


# ---------------------------------------------------------------------------
# discrete Lie expansion


def lie_terms(psi: SchemeMap, V: Field):
    """Bracket fields ``V^[i] = [V_i, V]`` (i = 1..N) and ``V^[0]``."""
    F = fields_from_scheme(psi)
    system = BracketSystem(F.V0_bar, F.V)
    V.require(3)
    return [system.iterate(V, (i,)) for i in range(psi.N + 1)]


def _eval(field: Field, X, t):
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), X.shape[:1]) for c in field.components([X[:, a] for a in range(X.shape[1])], t)], axis=1)


def one_step_residual(psi: SchemeMap, V: Field, X_prev, t_prev: float, dz, delta: float, terms=None) -> np.ndarray:
    """``R = (grad psi)^{-1} V(X_t, t) - V(X_prev) - sum dz^i V^[i] - delta V^[0]`` per row."""
    terms = lie_terms(psi, V) if terms is None else terms
    X_prev = np.atleast_2d(np.asarray(X_prev, dtype=float))
    dz = np.atleast_2d(np.asarray(dz, dtype=float))
    X_new = psi.step(X_prev, t_prev, dz, delta)
    J = psi.jets(X_prev, t_prev, dz, delta).jx
    lhs = np.linalg.solve(J, _eval(V, X_new, t_prev + delta)[..., None])[..., 0]
    R = lhs - _eval(V, X_prev, t_prev) - delta * _eval(terms[0], X_prev, t_prev)
    for i in range(psi.N):
        R -= dz[:, i : i + 1] * _eval(terms[i + 1], X_prev, t_prev)
    return R


def lie_expansion_residual(path: PathRecord, psi: SchemeMap, V: Field, step: int, eta2: float, terms=None) -> np.ndarray:
    """Residual of the one-step Lie expansion at grid time ``step * delta``.

    Raises GuardError when any path leaves the eta2 guard at that step.
    """
    if not 1 <= step <= path.n_steps:
        raise ValueError(f"step {step} outside 1..{path.n_steps}")
    if np.any(np.linalg.norm(path.Z[:, step - 1], axis=1) > eta2):
        raise GuardError(f"noise exceeds eta2={eta2} at step {step}; residual undefined")
    return one_step_residual(psi, V, path.X[:, step - 1], (step - 1) * path.delta, path.dz[:, step - 1], path.delta, terms)


def conditional_mean_residual(psi: SchemeMap, V: Field, X_prev, t_prev: float, delta: float, n_nodes: int = 12, terms=None) -> np.ndarray:
    """``E[R | X_prev]`` under standard Gaussian noise by Gauss-Hermite quadrature."""
    terms = lie_terms(psi, V) if terms is None else terms
    X_prev = np.atleast_2d(np.asarray(X_prev, dtype=float))
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / math.sqrt(2 * math.pi)
    N = psi.N
    grid = np.stack(np.meshgrid(*([nodes] * N), indexing="ij"), axis=-1).reshape(-1, N)
    w = np.prod(np.stack(np.meshgrid(*([weights] * N), indexing="ij"), axis=-1).reshape(-1, N), axis=1)
    M = X_prev.shape[0]
    out = np.zeros_like(X_prev)
    for z, wk in zip(grid, w):
        dz = np.broadcast_to(math.sqrt(delta) * z, (M, N))
        out += wk * one_step_residual(psi, V, X_prev, t_prev, dz, delta, terms)
    return out
