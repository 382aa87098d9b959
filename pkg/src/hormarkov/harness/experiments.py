"""Builtin experiments, rate fitting and report emission."""

from __future__ import annotations

import csv
import inspect
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ..errors import CapabilityError, ConfigError, ResourceCapError
from ..localization import Thresholds, eta_thresholds, hoeffding_bound
from ..malliavin import DEFAULT_CAP
from ..noise import LAWS, make_law
from ..scheme import fields_from_scheme, make_scheme, n_steps, simulate_paths
from ..semigroup import (BLOCK, MAX_GRID_NODES, density, density_derivative, density_standard_error, duality_check,
                         ibp_identity_check, localized_expectation, mean_and_se, terminal_samples, tv_distance)
from ..vectorfield import BracketSystem, hormander_quantity
from .config import ExperimentConfig

log = logging.getLogger(__name__)


class FitError(ValueError):
    """Too few usable points for a rate fit."""


# ---------------------------------------------------------------------------
# rate fit


@dataclass
class RateFit:
    slope: float
    intercept: float
    r2: float
    ci: tuple
    n_points: int
    weighted: bool
    dropped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2, "ci": list(self.ci),
                "n_points": self.n_points, "weighted": self.weighted, "dropped": self.dropped}


def rate_fit(pairs, level: float = 0.95) -> RateFit:
    """Fit ``log value = intercept + slope log delta``.

    ``pairs`` holds ``(delta, value, se)`` (or ``(delta, value)``).  Weights
    are ``(value / se)^2``, the inverse variance of ``log value``; if any SE
    is zero or missing the fit is unweighted.  The slope CI uses the fit
    covariance, inflated by the residual variance when that exceeds the
    nominal one, and a Student t quantile.
    """
    rows, dropped = [], []
    for p in pairs:
        dl, v = float(p[0]), float(p[1])
        se = float(p[2]) if len(p) > 2 and p[2] is not None else 0.0
        if not (v > 0 and dl > 0 and math.isfinite(v)):
            warnings.warn(f"rate_fit: dropping nonpositive point delta={dl}, value={v}", stacklevel=2)
            dropped.append(dl)
            continue
        rows.append((dl, v, se))
    n = len(rows)
    if n < 3:
        raise FitError(f"rate fit needs at least 3 positive points, got {n}")
    x = np.log([r[0] for r in rows])
    y = np.log([r[1] for r in rows])
    se = np.array([r[2] for r in rows])
    weighted = bool(np.all(se > 0) and np.all(np.isfinite(se)))
    w = (np.exp(y) / se) ** 2 if weighted else np.ones(n)
    A = np.column_stack([np.ones(n), x])
    AtW = A.T * w
    cov0 = np.linalg.inv(AtW @ A)
    intercept, slope = cov0 @ (AtW @ y)
    res = y - (intercept + slope * x)
    s2 = float(w @ res**2) / (n - 2)
    cov = cov0 * (max(s2, 1.0) if weighted else s2)
    ybar = float(w @ y / w.sum())
    sst = float(w @ (y - ybar) ** 2)
    r2 = 1.0 - float(w @ res**2) / sst if sst > 0 else 1.0
    half = stats.t.ppf(0.5 + level / 2, n - 2) * math.sqrt(max(cov[1, 1], 0.0))
    return RateFit(float(slope), float(intercept), r2, (float(slope - half), float(slope + half)), n, weighted, dropped)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    config_ini: str
    estimates: list
    rate_fit: dict | None = None
    a5: dict | None = None
    summary: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    files: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "config": self.config, "config_ini": self.config_ini,
                "estimates": self.estimates, "rate_fit": self.rate_fit, "a5": self.a5, "summary": self.summary,
                "notes": self.notes, "files": self.files}

    def write(self, out: Path) -> Path:
        p = out / "report.json"
        self.files.append("report.json")
        p.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")
        return p


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _write_csv(out: Path, name: str, header, rows) -> str:
    with open(out / name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return name


# ---------------------------------------------------------------------------
# building blocks


def build(cfg: ExperimentConfig):
    psi = make_scheme(cfg.scheme, **cfg.scheme_params)
    law = _law(cfg.law, cfg.law_params, psi.N)
    if len(cfg.x0) != psi.d:
        raise ConfigError(f"experiment.x0: length {len(cfg.x0)} != scheme dimension {psi.d}")
    if law.N != psi.N:
        raise ConfigError(f"law.N: law dimension {law.N} != scheme noise dimension {psi.N}")
    return psi, law


def _law(name, params, N):
    params = dict(params)
    if "N" in inspect.signature(LAWS[name]).parameters:
        params.setdefault("N", N)
    return make_law(name, **params)


def level_seed(seed: int, tag: int) -> int:
    """Independent seed for one level of a ladder."""
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1, np.uint64)[0])


def hormander_at(psi, L, x, t=0.0) -> float:
    F = fields_from_scheme(psi)
    return hormander_quantity(BracketSystem(F.V0_bar, F.V), L, x, t)


def a5_block(cfg: ExperimentConfig, psi, law) -> dict:
    """Small-step feasibility of every ladder step size (diagnostic only)."""
    meta = psi.growth_meta
    if meta is None:
        return {"available": False, "reason": f"scheme {psi.name!r} declares no growth constants"}
    try:
        VL = hormander_at(psi, cfg.L, cfg.x0)
    except CapabilityError as e:
        VL = None
        log.warning("Hormander quantity unavailable: %s", e)
    rows = []
    for dl in cfg.deltas:
        thr = eta_thresholds(dl, psi.d, cfg.T, law.m_star, meta.D, meta.p, cfg.L, VL, psi.N)
        rows.append({"delta": dl, "eta1": thr.eta1, "eta2": thr.eta2, "feasible": thr.feasible,
                     "diagnostics": thr.diagnostics})
    return {"available": True, "x0": list(cfg.x0), "L": cfg.L, "V_L": VL, "m_star": law.m_star, "levels": rows}


def memory_estimate_mb(cfg: ExperimentConfig, psi) -> float:
    """Worst-case working memory of the experiment's largest block."""
    d, N = psi.d, psi.N
    K = max(n_steps(cfg.T, dl) for dl in cfg.deltas)
    M = min(cfg.n_paths, BLOCK)
    if cfg.experiment == "ibp-check":
        M = min(cfg.n_paths, 2048)
        # DDX, sigma derivative and theta derivative temporaries
        byt = M * (K * N * d) ** 2 * 8 * 3 + M * K * N * d * d * 8 * 4
    elif cfg.experiment == "localization":
        M = min(cfg.n_paths, 512)
        byt = M * K * (N * d + d * d) * 8 * 6
    elif cfg.experiment == "simulate":
        byt = cfg.write_paths * (K + 1) * (d + 4 * N) * 8 + M * d * 8 * 8
    elif cfg.experiment == "hormander":
        byt = 0
    else:
        samples = 3 * cfg.n_paths * d * 8
        grid = MAX_GRID_NODES * 8 * 4 if cfg.experiment in ("kinetic-tv", "iterated-clt") else 0
        byt = samples + grid + M * d * 8 * 8
    return byt / 2**20


def check_resources(cfg: ExperimentConfig, psi) -> float:
    mb = memory_estimate_mb(cfg, psi)
    if mb > cfg.max_memory_mb:
        raise ResourceCapError(f"estimated memory {mb:.0f} MB exceeds the cap of {cfg.max_memory_mb:.0f} MB")
    if cfg.experiment == "ibp-check":
        K = n_steps(cfg.T, cfg.deltas[0])
        if K * psi.N > DEFAULT_CAP:
            raise ResourceCapError(f"steps*N = {K * psi.N} exceeds the second-derivative cap {DEFAULT_CAP}")
    return mb


# ---------------------------------------------------------------------------
# experiments


def exp_simulate(cfg, psi, law, out):
    est, files = [], []
    for k, dl in enumerate(cfg.deltas):
        seed = level_seed(cfg.seed, k)
        X = terminal_samples(psi, law, cfg.x0, cfg.T, dl, cfg.n_paths, seed, threads=cfg.threads)
        m, se = mean_and_se(X)
        est.append({"delta": dl, "seed": seed, "mean": m.tolist(), "mean_se": se.tolist(),
                    "std": X.std(axis=0, ddof=1).tolist()})
        name = f"terminal_{k}.csv"
        files.append(_write_csv(out, name, ["path"] + [f"X{j}" for j in range(psi.d)],
                                ([i] + list(x) for i, x in enumerate(X))))
        nw = min(cfg.write_paths, cfg.n_paths)
        if nw:
            rec = simulate_paths(psi, law, cfg.x0, dl, cfg.T, seed, nw)
            files += [str(p.relative_to(out)) for p in rec.to_csv(out / f"paths_{k}")]
    return est, None, {}, files, []


def exp_hormander(cfg, psi, law, out):
    if not cfg.grid:
        raise ConfigError("experiment.grid: required for the hormander scan")
    if len(cfg.grid) != psi.d:
        raise ConfigError(f"experiment.grid: {len(cfg.grid)} axes for a {psi.d}-dimensional scheme")
    rows = hormander_scan(psi, cfg.L, cfg.grid)
    vals = np.array([r[-1] for r in rows])
    i = int(np.argmin(vals))
    name = _write_csv(out, "hormander.csv", [f"x{j}" for j in range(psi.d)] + ["V_L"], rows)
    summary = {"min": float(vals[i]), "argmin": list(rows[i][:-1]), "L": cfg.L}
    est = [{"x": list(r[:-1]), "V_L": r[-1]} for r in rows]
    return est, None, summary, [name], []


def hormander_scan(psi, L: int, grid) -> list:
    """``V_L(x, 0)`` on the tensor grid ``[[lo, hi, count], ...]``; rows ``(x..., value)``."""
    F = fields_from_scheme(psi)
    system = BracketSystem(F.V0_bar, F.V)
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in grid]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return [tuple(float(v) for v in x) + (hormander_quantity(system, L, x, 0.0),) for x in pts]


def _bump_tests(center, radius=2.5):
    c = np.asarray(center, dtype=float)

    def b(u):
        out = np.zeros_like(u)
        m = np.abs(u) < 1
        out[m] = np.exp(-1 / (1 - u[m] ** 2))
        return out

    def db(u):
        out = np.zeros_like(u)
        m = np.abs(u) < 1
        w = 1 - u[m] ** 2
        out[m] = np.exp(-1 / w) * (-2 * u[m] / w**2)
        return out

    def phi(X):
        return b((X - c) / radius).prod(axis=1)

    def grad(X):
        U = (X - c) / radius
        B = b(U)
        g = np.empty_like(X)
        for h in range(X.shape[1]):
            g[:, h] = np.delete(B, h, axis=1).prod(axis=1) * db(U[:, h]) / radius
        return g

    return [("bump", phi, grad)]


def _duality_functionals(d):
    def sin_g(X):
        return np.sin(X[:, -1])

    def sin_grad(X):
        g = np.zeros_like(X)
        g[:, -1] = np.cos(X[:, -1])
        return g

    def sin_hess(X):
        H = np.zeros(X.shape + (d,))
        H[:, -1, -1] = -np.sin(X[:, -1])
        return H

    def gauss(X):
        return np.exp(-0.125 * (X * X).sum(axis=1))

    def gauss_grad(X):
        return -0.25 * X * gauss(X)[:, None]

    def gauss_hess(X):
        g = gauss(X)[:, None, None]
        return g * (0.0625 * X[:, :, None] * X[:, None, :] - 0.25 * np.eye(d))

    return [("sin-last", sin_g, sin_grad, sin_hess), ("gauss", gauss, gauss_grad, gauss_hess)]


def exp_ibp_check(cfg, psi, law, out):
    dl = cfg.deltas[0]
    notes = []
    if cfg.eta1 is not None and cfg.eta2 is not None:
        thr = Thresholds(cfg.eta1, cfg.eta2, dl, False, {"source": "config"})
    else:
        meta = psi.growth_meta
        if meta is None:
            raise ConfigError("experiment.eta1/eta2: required for a scheme without growth constants")
        thr = eta_thresholds(dl, psi.d, cfg.T, law.m_star, meta.D, meta.p, 0, None, psi.N)
        notes.append("thresholds from the eta formulas (L = 0)")
    seed = level_seed(cfg.seed, 0)
    ibp = ibp_identity_check(psi, law, cfg.x0, cfg.T, dl, thr, _bump_tests(cfg.x0), cfg.n_paths, seed,
                             threads=cfg.threads)
    dual = duality_check(psi, law, cfg.x0, cfg.T, dl, _duality_functionals(psi.d), cfg.n_paths, seed,
                         threads=cfg.threads)
    f1 = _write_csv(out, "ibp.csv", ["test", "h", "lhs", "lhs_se", "rhs", "rhs_se", "z", "theta_loss"],
                    ([r["test"], r["h"], r["lhs"], r["lhs_se"], r["rhs"], r["rhs_se"], r["z"], r["theta_loss"]]
                     for r in ibp))
    f2 = _write_csv(out, "duality.csv", ["functional", "coordinate", "F_LG", "G_LF", "delta_DF_DG", "z_F_LG", "z_G_LF"],
                    ([r["functional"], r["coordinate"], r["F_LG"], r["G_LF"], r["delta_DF_DG"], r["z_F_LG"],
                      r["z_G_LF"]] for r in dual))
    zs = [abs(r["z"]) for r in ibp] + [abs(r[k]) for r in dual for k in ("z_F_LG", "z_G_LF")]
    summary = {"max_abs_z": max(zs), "eta1": thr.eta1, "eta2": thr.eta2, "seed": seed}
    return [{"ibp": ibp, "duality": dual}], None, summary, [f1, f2], notes


def exp_kinetic_tv(cfg, psi, law, out):
    fine = min(cfg.deltas) / cfg.reference_factor
    ref_law = _law(cfg.reference_law, {}, psi.N)
    ref_seed = level_seed(cfg.seed, 10_000)
    log.info("reference run: delta=%g, %d paths", fine, cfg.n_paths)
    ref = terminal_samples(psi, ref_law, cfg.x0, cfg.T, fine, cfg.n_paths, ref_seed, threads=cfg.threads)
    scale = ref.std(axis=0, ddof=1) if cfg.whiten else None
    half = cfg.n_paths // 2
    fl = tv_distance(ref[:half], ref[half:2 * half], cfg.theta, fine, h=cfg.bandwidth, scale=scale, n_boot=0)
    floor = fl.value / math.sqrt(2)
    est = []
    for k, dl in enumerate(sorted(cfg.deltas, reverse=True)):
        seed = level_seed(cfg.seed, k)
        X = terminal_samples(psi, law, cfg.x0, cfg.T, dl, cfg.n_paths, seed, threads=cfg.threads)
        r = tv_distance(X, ref, cfg.theta, dl, h=cfg.bandwidth, scale=scale, seed=seed % 2**32)
        est.append({"delta": dl, "tv": r.value, "tv_se": r.std_error, "bandwidth": r.config["bandwidth"],
                    "quadrature_residual": r.extras.get("quadrature_residual"), "seed": seed,
                    "floor": floor})
        log.info("delta=%g TV=%.5f +- %.5f", dl, r.value, r.std_error)
    name = _write_csv(out, "tv_rate.csv", ["delta", "tv", "tv_se", "bandwidth", "floor"],
                      ([e["delta"], e["tv"], e["tv_se"], e["bandwidth"], floor] for e in est))
    fit = rate_fit([(e["delta"], e["tv"], e["tv_se"]) for e in est])
    summary = {"reference": {"delta": fine, "law": ref_law.law_id, "seed": ref_seed,
                             "label": f"same scheme at delta/{cfg.reference_factor} with {ref_law.law_id} noise"},
               "whitening_scale": None if scale is None else scale.tolist(), "floor": floor,
               "law_third_moment_zero": law.third_moment_zero}
    notes = ["Indicative rate only: the smoothed-TV estimator carries its own bias and a sampling floor "
             "(reported as 'floor'), so the slope is not a sharp test of the exponent."]
    return est, fit.to_dict(), summary, [name], notes


def covariance_with_se(X):
    """Sample covariance and entrywise standard errors (delta method)."""
    X = np.asarray(X, dtype=float)
    M = len(X)
    C = X - X.mean(axis=0)
    prod = C[:, :, None] * C[:, None, :]
    cov = prod.sum(axis=0) / (M - 1)
    se = prod.std(axis=0, ddof=1) / math.sqrt(M)
    return cov, se


CLT_LIMIT = np.array([[1.0, 0.5], [0.5, 1.0 / 3.0]])


def exp_iterated_clt(cfg, psi, law, out):
    if psi.d != 2:
        raise ConfigError("scheme.order: the CLT experiment compares (S0, S1); use order = 1")
    if cfg.T != 1.0:
        raise ConfigError("experiment.T: the CLT normalization needs T = 1")
    deltas = sorted(cfg.deltas, reverse=True)
    samples, est = {}, []
    for k, dl in enumerate(deltas):
        seed = level_seed(cfg.seed, k)
        X = terminal_samples(psi, law, cfg.x0, cfg.T, dl, cfg.n_paths, seed, threads=cfg.threads)
        samples[dl] = X
        cov, se = covariance_with_se(X)
        n = round(1 / dl)
        finite_n = np.array([[1.0, (n + 1) / (2 * n)], [(n + 1) / (2 * n), (n + 1) * (2 * n + 1) / (6 * n * n)]])
        z = (cov - CLT_LIMIT) / se
        est.append({"delta": dl, "n": n, "seed": seed, "cov": cov.tolist(), "cov_se": se.tolist(),
                    "limit": CLT_LIMIT.tolist(), "finite_n": finite_n.tolist(), "z_limit": z.tolist()})
    rows = [[e["n"], i, j, e["cov"][i][j], e["cov_se"][i][j], CLT_LIMIT[i, j]] for e in est for i in range(2)
            for j in range(i, 2)]
    files = [_write_csv(out, "clt_covariance.csv", ["n", "i", "j", "cov", "cov_se", "limit"], rows)]
    summary = {}
    if len(deltas) >= 2:
        a, b = deltas[0], deltas[-1]
        r = tv_distance(samples[a], samples[b], cfg.theta, a, h=cfg.bandwidth, seed=cfg.seed % 2**32)
        summary["tv"] = {"delta_coarse": a, "delta_fine": b, "tv": r.value, "tv_se": r.std_error,
                         "bandwidth": r.config["bandwidth"]}
    return est, None, summary, files, []


def exp_density(cfg, psi, law, out):
    dl = cfg.deltas[0]
    seed = level_seed(cfg.seed, 0)
    X = terminal_samples(psi, law, cfg.x0, cfg.T, dl, cfg.n_paths, seed, threads=cfg.threads)
    if psi.d != 1:
        raise ConfigError("scheme: the density experiment writes a 1-d profile; use a 1-d scheme")
    lo, hi, n = cfg.grid[0] if cfg.grid else (X.min() - 3, X.max() + 3, 201)
    y = np.linspace(lo, hi, int(n))
    q = density(X, cfg.theta, dl, y[:, None])
    qse = density_standard_error(X, cfg.theta, dl, y[:, None])
    beta = cfg.beta or [1]
    dq = density_derivative(X, cfg.theta, dl, beta, y[:, None])
    var = cfg.T + dl ** (2 * cfg.theta)
    exact = None
    if psi.name == "random-walk" and law.law_id == "gaussian":
        exact = np.exp(-0.5 * (y - cfg.x0[0]) ** 2 / var) / math.sqrt(2 * math.pi * var)
    integral = float(np.trapezoid(q, y))
    rows = [[yi, qi, si, di] + ([ei] if exact is not None else []) for yi, qi, si, di, ei in
            zip(y, q, qse, dq, exact if exact is not None else y)]
    hdr = ["y", "q", "q_se", f"d{beta[0]}q"] + (["exact"] if exact is not None else [])
    name = _write_csv(out, "density.csv", hdr, rows)
    summary = {"integral": integral, "bandwidth": dl**cfg.theta, "seed": seed}
    if exact is not None:
        err = np.abs(q - exact)
        summary.update({"sup_error": float(err.max()), "max_error_over_se": float((err / qse).max()),
                        "exact_variance": var})
    return [{"delta": dl, "n_grid": len(y)}], None, summary, [name], []


def exp_localization(cfg, psi, law, out):
    meta = psi.growth_meta
    if meta is None and (cfg.eta1 is None or cfg.eta2 is None):
        raise ConfigError("experiment.eta1/eta2: required for a scheme without growth constants")
    try:
        VL = hormander_at(psi, cfg.L, cfg.x0)
    except CapabilityError:
        VL = None
    est = []
    for k, dl in enumerate(sorted(cfg.deltas, reverse=True)):
        if cfg.eta1 is not None and cfg.eta2 is not None:
            thr = Thresholds(cfg.eta1, cfg.eta2, dl, False, {"source": "config"})
        else:
            thr = eta_thresholds(dl, psi.d, cfg.T, law.m_star, meta.D, meta.p, cfg.L, VL, psi.N)
            if min(thr.eta1, thr.eta2) <= 1:
                raise ConfigError(f"experiment.deltas: at delta={dl:g} the thresholds (eta1={thr.eta1:.4g}, "
                                  f"eta2={thr.eta2:.4g}) do not exceed 1; use a smaller step or set eta1/eta2")
        seed = level_seed(cfg.seed, k)
        r = localized_expectation(psi, law, cfg.x0, cfg.T, dl, thr, lambda X: X[:, 0], cfg.n_paths, seed,
                                  threads=cfg.threads)
        K = n_steps(cfg.T, dl)
        est.append({"delta": dl, "steps": K, "eta1": thr.eta1, "eta2": thr.eta2, "feasible": thr.feasible,
                    "loss": r.extras["loss"], "loss_se": r.extras["loss_se"], "lambda_c": r.extras["lambda_c"],
                    "lambda_c_se": r.extras["lambda_c_se"], "hoeffding_bound": hoeffding_bound(law.m_star, K),
                    "theta_mean_x": r.value, "seed": seed})
    name = _write_csv(out, "localization.csv",
                      ["delta", "steps", "eta1", "eta2", "loss", "loss_se", "lambda_c", "lambda_c_se", "hoeffding_bound"],
                      ([e[k] for k in ("delta", "steps", "eta1", "eta2", "loss", "loss_se", "lambda_c", "lambda_c_se",
                                       "hoeffding_bound")] for e in est))
    return est, None, {"V_L": VL, "m_star": law.m_star}, [name], []


EXPERIMENT_FUNCS = {
    "simulate": exp_simulate,
    "hormander": exp_hormander,
    "ibp-check": exp_ibp_check,
    "kinetic-tv": exp_kinetic_tv,
    "iterated-clt": exp_iterated_clt,
    "density": exp_density,
    "localization": exp_localization,
}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Validate, run the named experiment and write ``report.json`` plus CSVs to ``cfg.out``."""
    cfg.validate()
    psi, law = build(cfg)
    mb = check_resources(cfg, psi)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    est, fit, summary, files, notes = EXPERIMENT_FUNCS[cfg.experiment](cfg, psi, law, out)
    summary = {"scheme": psi.name, "law": law.describe(), "memory_estimate_mb": mb, **summary}
    rep = ExperimentReport(cfg.experiment, cfg.to_dict(), cfg.to_ini(), est, fit, a5_block(cfg, psi, law), summary,
                           notes, list(files))
    (out / "config.ini").write_text(rep.config_ini)
    rep.files.append("config.ini")
    if write:
        rep.write(out)
    return rep
