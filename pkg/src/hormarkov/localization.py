"""Localization: smooth cutoffs, step-size thresholds and the weight Theta."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .malliavin import MalliavinBundle, sigma_derivative
from .scheme import FlowPair, PathRecord, SchemeMap, StepJets, path_jets, tangent_flow


def smooth_cutoff(v: float, x) -> np.ndarray:
    """Psi_v: 1 for |x| <= v - 1/2, 0 for |x| >= v, exponential bridge between."""
    if v <= 1:
        raise ValueError(f"cutoff level must exceed 1, got {v}")
    a = np.abs(np.asarray(x, dtype=float))
    out = np.where(a <= v - 0.5, 1.0, 0.0)
    br = (a > v - 0.5) & (a < v)
    u = 2 * a[br] - 2 * v + 1
    out[br] = np.exp(1 - 1 / (1 - u * u))
    return out if out.ndim else float(out)


def smooth_cutoff_derivative(v: float, x) -> np.ndarray:
    """d Psi_v / dx."""
    if v <= 1:
        raise ValueError(f"cutoff level must exceed 1, got {v}")
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    out = np.zeros_like(a)
    br = (a > v - 0.5) & (a < v)
    u = 2 * a[br] - 2 * v + 1
    w = 1 - u * u
    out[br] = np.exp(1 - 1 / w) * (-2 * u / (w * w)) * 2 * np.sign(x[br])
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# thresholds


@dataclass
class Thresholds:
    eta1: float
    eta2: float
    delta: float
    feasible: bool
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"eta1": self.eta1, "eta2": self.eta2, "delta": self.delta, "feasible": self.feasible,
             "diagnostics": self.diagnostics},
            indent=2, default=float,
        )


def _log_eta1(delta, d, T, m_star, exponent):
    return -d * exponent * math.log(delta) + min(
        0.0, d * math.log(10) - d * math.log(m_star) - (d / 2) * math.log(2**10 * (1 + T**3))
    )


def eta_thresholds(
    delta: float,
    d: int,
    T: float,
    m_star: float,
    frakD: float,
    frakp: int,
    L: int = 0,
    V_L: float | None = None,
    N: int = 1,
    variant_r: float = 1 / 24,
) -> Thresholds:
    """eta1(delta), eta2(delta) and the small-step feasibility inequalities.

    The eta1 lower bounds can be astronomically large, so every comparison
    is made on logarithms; margins are ``log(eta1) - log(bound)``.  Without
    a Hormander value ``V_L`` the bound involving it is skipped and the
    result is marked partial.
    """
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    log_e1 = _log_eta1(delta, d, T, m_star, 44 / 91)
    eta1 = math.exp(log_e1) if log_e1 < 700 else math.inf
    log_a = -0.5 * math.log(delta) - log_e1 / d
    log_b = math.log(0.5) - math.log(math.sqrt(delta) * 8 * frakD) / (frakp + 1)
    log_e2 = min(log_a, log_b)
    eta2 = math.exp(log_e2)

    bounds = {"one": 0.0, "dimension": (1 - d / 2) * math.log(2) + (d / 2) * math.log(d)}
    partial = V_L is None
    if not partial:
        inner = T * V_L * m_star / (40 * (L + 1) * N ** (L * (L + 1) / 2))
        bounds["hormander"] = math.inf if inner <= 0 else math.log(2) - d * 13**L * math.log(inner)
    if L == 0:
        bounds["moment"] = math.log(2)
    else:
        inner = math.log(m_star) - 143 * math.log(2**8 * (1 + T)) - math.log(10) - (L * (L - 1) / 2) * math.log(N)
        bounds["moment"] = math.log(2) - d * 13 ** (L - 1) * inner
    diag = {}
    ok = True
    for name, lb in bounds.items():
        margin = log_e1 - lb
        diag[f"eta1>{name}"] = {"log_lhs": log_e1, "log_rhs": lb, "log_margin": margin, "holds": margin > 0}
        ok &= margin > 0
    diag["eta2>1"] = {"log_lhs": log_e2, "log_rhs": 0.0, "log_margin": log_e2, "holds": log_e2 > 0}
    ok &= log_e2 > 0
    guard = math.sqrt(delta) * eta2 ** (frakp + 1) * 8 * frakD
    diag["inversion_guard"] = {"lhs": guard, "rhs": 1.0, "holds": guard < 1}
    diag["partial"] = partial
    ex = 44 / (91 - 36 * variant_r)
    log_v = -d * ex * math.log(delta) + min(
        0.0, d * math.log(10) - d * math.log(m_star) - d * ex * math.log(2**10 * (1 + T**3))
    )
    diag["theorem_variant"] = {"r": variant_r, "log_eta1": log_v}
    return Thresholds(eta1, eta2, delta, bool(ok), diag)


# ---------------------------------------------------------------------------
# weights


def hoeffding_indicator(path: PathRecord, m_star: float) -> np.ndarray:
    """1 when the fraction of steps with chi = 1 is at least m*/2."""
    return (path.chi.mean(axis=1) >= m_star / 2).astype(float)


def hoeffding_bound(m_star: float, n_steps: int) -> float:
    return math.exp(-m_star**2 * n_steps / 2)


def default_G(flows: FlowPair) -> np.ndarray:
    """det(Xdot_T)^2."""
    return np.linalg.det(flows.forward[:, -1]) ** 2


def theta_weight(path: PathRecord, bundle: MalliavinBundle, thr: Thresholds, G, m_star: float) -> np.ndarray:
    """Theta = Psi_eta1(G det gamma) prod_w Psi_eta2(|Z_w|) 1_Lambda; 0 where gamma is singular."""
    G = np.asarray(G, dtype=float)
    arg = G * bundle.det_gamma
    finite = np.isfinite(arg)
    f1 = np.where(finite, smooth_cutoff(thr.eta1, np.where(finite, arg, 0.0)), 0.0)
    f2 = smooth_cutoff(thr.eta2, np.linalg.norm(path.Z, axis=2)).prod(axis=1)
    return f1 * f2 * hoeffding_indicator(path, m_star)


def tangent_flow_derivative(path: PathRecord, psi: SchemeMap, jets: StepJets | None = None) -> np.ndarray:
    """D_{(v,j)} Xdot_T, shape (M, K, N, d, d)."""
    if jets is None or jets.hxx is None:
        jets = path_jets(psi, path, order=2)
    M, K, N, d = path.n_paths, path.n_steps, psi.N, psi.d
    chi = path.chi.astype(float)
    F = np.broadcast_to(np.eye(d), (M, d, d)).copy()
    D = np.zeros((M, K, N, d))
    DF = np.zeros((M, K, N, d, d))
    for s in range(K):
        J, H, Hzx = jets.jx[:, s], jets.hxx[:, s], jets.hzx[:, s]
        c = chi[:, s]
        # d(grad psi) in direction D X_{t-1}: sum_c Hxx[a, b, c] D[c]
        dJ = np.einsum("mabc,mvjc->mvjab", H, D[:, : s + 1])
        new = np.einsum("mab,mvjbc->mvjac", J, DF[:, : s + 1]) + np.einsum("mvjab,mbc->mvjac", dJ, F)
        new[:, s] += c[:, None, None, None] * np.einsum("majb,mbc->mjac", Hzx, F)
        DF[:, : s + 1] = new
        D[:, :s] = np.einsum("mab,mwib->mwia", J, D[:, :s])
        D[:, s] = c[:, None, None] * jets.jz[:, s].transpose(0, 2, 1)
        F = J @ F
    return DF


def theta_derivative(
    path: PathRecord,
    bundle: MalliavinBundle,
    thr: Thresholds,
    m_star: float,
    G=None,
    DG=None,
    psi: SchemeMap | None = None,
    jets: StepJets | None = None,
) -> np.ndarray:
    """D_{(v,j)} Theta, shape (M, K, N).

    With ``G`` omitted the default ``det(Xdot_T)^2`` is used and its
    derivative is assembled from the tangent-flow derivative recursion
    (``psi`` required).  Otherwise ``DG`` must be supplied.
    """
    M, K, N, d = bundle.DX.shape
    if G is None:
        if psi is None:
            raise ValueError("psi is needed to differentiate the default G")
        F = tangent_flow(path, psi, jets)[:, -1]
        detF = np.linalg.det(F)
        G = detF**2
        DF = tangent_flow_derivative(path, psi, jets)
        Finv = np.linalg.inv(F)
        DG = 2 * G[:, None, None] * np.einsum("mab,mvjba->mvj", Finv, DF)
    G = np.asarray(G, dtype=float)
    DG = np.zeros((M, K, N)) if DG is None else np.asarray(DG, dtype=float)
    arg = G * bundle.det_gamma
    finite = np.isfinite(arg)
    safe = np.where(finite, arg, 0.0)
    f1 = np.where(finite, smooth_cutoff(thr.eta1, safe), 0.0)
    df1 = np.where(finite, smooth_cutoff_derivative(thr.eta1, safe), 0.0)
    zn = np.linalg.norm(path.Z, axis=2)
    p2 = smooth_cutoff(thr.eta2, zn)
    dp2 = smooth_cutoff_derivative(thr.eta2, zn)
    f2 = p2.prod(axis=1)
    lam = hoeffding_indicator(path, m_star)
    out = np.zeros((M, K, N))
    # d(G det gamma) = DG det gamma - G det gamma Tr(gamma D sigma)
    act = finite & (df1 != 0) & (lam > 0) & (f2 > 0)
    if act.any():
        Ds = sigma_derivative(bundle.DX[act], bundle.DDX[act], bundle.delta)
        tr = np.einsum("mab,mvjba->mvj", bundle.gamma[act], Ds)
        dg = bundle.det_gamma[act]
        darg = DG[act] * dg[:, None, None] - (G[act] * dg)[:, None, None] * tr
        out[act] += (df1[act] * f2[act])[:, None, None] * darg
    # d prod_w Psi_eta2(|Z_w|): only the factor at w = v moves
    act2 = finite & (f1 > 0) & (lam > 0) & np.any(dp2 != 0, axis=1)
    if act2.any():
        sd = math.sqrt(bundle.delta)
        Z = path.Z[act2]
        z = zn[act2]
        unit = np.where(z[..., None] > 0, Z / np.where(z > 0, z, 1.0)[..., None], 0.0)
        dz = path.chi[act2][..., None] * unit / sd  # D_{(w,j)} |Z_w|
        others = np.ones_like(z)
        pp = p2[act2]
        for w in range(K):
            others[:, w] = np.prod(np.delete(pp, w, axis=1), axis=1)
        out[act2] += (f1[act2])[:, None, None] * (dp2[act2] * others)[..., None] * dz
    return out * lam[:, None, None]
