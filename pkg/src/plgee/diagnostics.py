"""Finite-sample regularity diagnostics for the two-step estimator.

The quantities reported here (eigenvalue floors, leverage-type maxima,
correlation conditioning, smoothness ratios) are the finite-n versions of
asymptotic regularity conditions.  Nothing here claims a condition "holds";
the report exposes the raw numbers and `trend_flags` checks monotonicity
along a grid of subject prefixes, leaving judgment to the user.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import matkernel
from .errors import LinkOverflowError, NotPositiveDefiniteError, ShapeError
from .estimator import estimate_correlation
from .matkernel import SymMatrix, sym_eigen, sym_sqrt_pair
from .model import _link_arrays, eval_model

DEFAULT_DET_FLOOR = 1e-6


@dataclass(frozen=True)
class DiagnosticsReport:
    n_used: int
    H_indep: SymMatrix
    H_general: SymMatrix
    lambda_min_H_indep: float
    gamma0_indep: float
    pi_n: float
    tau_tilde_n: float
    gamma0: float
    gamma_tilde: float
    gamma_D: float
    c_n: float | None
    k2: float
    k3: float
    sqrt_n_times_gamma0_indep: float
    pi2_gamma_tilde: float
    sqrt_n_pi_gamma_tilde: float
    det_R: float
    lambda_min_R: float
    tau_oracle: float | None = None
    lambda_min_R_bar: float | None = None

    def to_json(self):
        """Flat dict of the scalar fields, ready for JSON output."""
        out = {
            "n_used": self.n_used,
            "lambda_min_H_indep": self.lambda_min_H_indep,
            "gamma0_indep": self.gamma0_indep,
            "pi_n": self.pi_n,
            "tau_tilde_n": self.tau_tilde_n,
            "gamma0": self.gamma0,
            "gamma_tilde": self.gamma_tilde,
            "gamma_D": self.gamma_D,
            "c_n": self.c_n,
            "k2": self.k2,
            "k3": self.k3,
            "sqrt_n_times_gamma0_indep": self.sqrt_n_times_gamma0_indep,
            "pi2_gamma_tilde": self.pi2_gamma_tilde,
            "sqrt_n_pi_gamma_tilde": self.sqrt_n_pi_gamma_tilde,
            "det_R": self.det_R,
            "lambda_min_R": self.lambda_min_R,
            "tau_oracle": self.tau_oracle,
            "lambda_min_R_bar": self.lambda_min_R_bar,
        }
        return out


def _spd_stats(a, what):
    eig = sym_eigen(a)
    if eig.values[0] <= matkernel.pd_tolerance(a):
        raise NotPositiveDefiniteError(
            f"{what} is singular (lambda_min={eig.values[0]:.6g})",
            lambda_min=float(eig.values[0]),
        )
    return eig


def smoothness_maxima(data, family, beta_center, radius_r=0.0):
    """Max |mu''/mu'| and |mu'''/mu'| over the center plus 2p+1 probe points.

    Probes sit at +/- radius * sqrt(m) along the inverse-square-root
    eigendirections of the independence scoring matrix, a finite surrogate
    for the sup over the shrinking parameter ball.
    """
    if radius_r < 0:
        raise ShapeError("radius must be nonnegative")
    beta_center = np.asarray(beta_center, dtype=float)
    probes = [beta_center]
    if radius_r > 0:
        ev = eval_model(data, family, beta_center)
        H = np.einsum("nmp,nm,nmq->pq", data.X, ev.var, data.X)
        eig = _spd_stats(0.5 * (H + H.T), "independence scoring matrix")
        scale = radius_r * math.sqrt(data.m)
        for k in range(data.p):
            d = (scale / math.sqrt(eig.values[k])) * eig.vectors[:, k]
            probes.append(beta_center + d)
            probes.append(beta_center - d)
    k2 = 0.0
    k3 = 0.0
    for idx, beta in enumerate(probes):
        theta = data.X @ beta
        try:
            _, d1, d2, d3 = _link_arrays(family, theta)
        except LinkOverflowError as exc:
            raise LinkOverflowError(
                f"link overflow at probe point {idx} "
                f"(beta={np.array2string(beta, precision=4)})"
            ) from exc
        k2 = max(k2, float(np.max(np.abs(d2 / d1))))
        k3 = max(k3, float(np.max(np.abs(d3 / d1))))
    return {"k2": k2, "k3": k3}


def design_diagnostics(data, family, beta, R, M_hat=None, true_corr=None):
    """Evaluate all regularity quantities at (beta, R).

    R is normally the estimated average correlation; in simulations the
    caller can pass the known true correlation instead (oracle mode) and
    supply it again as ``true_corr`` to get the oracle-only extras.
    """
    beta = np.asarray(beta, dtype=float)
    R = R.a if isinstance(R, SymMatrix) else np.asarray(R, dtype=float)
    ev = eval_model(data, family, beta)

    H_indep = np.einsum("nmp,nm,nmq->pq", data.X, ev.var, data.X)
    H_indep = 0.5 * (H_indep + H_indep.T)
    eig_Hi = _spd_stats(H_indep, "independence scoring matrix")

    eig_R = _spd_stats(R, "correlation matrix")
    Q = (eig_R.vectors / eig_R.values) @ eig_R.vectors.T   # R^{-1}
    q_min, q_max = 1.0 / eig_R.values[-1], 1.0 / eig_R.values[0]
    pi_n = float(q_max / q_min)
    tau_tilde = float(data.m * q_max)

    sd = ev.sd
    B = sd[:, :, None] * data.X
    H = np.einsum("njp,jk,nkq->pq", B, Q, B)
    H = 0.5 * (H + H.T)
    eig_H = _spd_stats(H, "general scoring matrix")

    Hi_inv = (eig_Hi.vectors / eig_Hi.values) @ eig_Hi.vectors.T
    H_inv = (eig_H.vectors / eig_H.values) @ eig_H.vectors.T
    x_flat = data.X.reshape(-1, data.p)
    gamma0_indep = float(np.max(np.einsum("cp,pq,cq->c", x_flat, Hi_inv, x_flat)))
    gamma0 = float(np.max(np.einsum("cp,pq,cq->c", x_flat, H_inv, x_flat)))
    gamma_tilde = tau_tilde * gamma0

    H_inv_half = (eig_H.vectors / np.sqrt(eig_H.values)) @ eig_H.vectors.T
    gamma_D = 0.0
    for i in range(data.n):
        Gi = B[i].T @ Q @ B[i]
        W = H_inv_half @ Gi @ H_inv_half
        gamma_D = max(gamma_D, float(sym_eigen(0.5 * (W + W.T)).values[-1]))

    c_n = None
    if M_hat is not None:
        M = M_hat.a if isinstance(M_hat, SymMatrix) else np.asarray(M_hat, dtype=float)
        _, M_inv_half = sym_sqrt_pair(M)
        W = M_inv_half.a @ H @ M_inv_half.a
        c_n = float(sym_eigen(0.5 * (W + W.T)).values[-1])

    km = smoothness_maxima(data, family, beta, 0.0)

    tau_oracle = None
    lam_min_rbar = None
    if true_corr is not None:
        R_bar = true_corr.a if isinstance(true_corr, SymMatrix) else np.asarray(true_corr, dtype=float)
        _, R_inv_half = sym_sqrt_pair(R)
        W = R_inv_half.a @ R_bar @ R_inv_half.a   # similar to R^{-1} R_bar
        tau_oracle = float(sym_eigen(0.5 * (W + W.T)).values[-1])
        lam_min_rbar = float(sym_eigen(R_bar).values[0])

    sqrt_n = math.sqrt(data.n)
    return DiagnosticsReport(
        n_used=data.n,
        H_indep=SymMatrix(H_indep),
        H_general=SymMatrix(H),
        lambda_min_H_indep=float(eig_Hi.values[0]),
        gamma0_indep=gamma0_indep,
        pi_n=pi_n,
        tau_tilde_n=tau_tilde,
        gamma0=gamma0,
        gamma_tilde=gamma_tilde,
        gamma_D=gamma_D,
        c_n=c_n,
        k2=km["k2"],
        k3=km["k3"],
        sqrt_n_times_gamma0_indep=sqrt_n * gamma0_indep,
        pi2_gamma_tilde=pi_n * pi_n * gamma_tilde,
        sqrt_n_pi_gamma_tilde=sqrt_n * pi_n * gamma_tilde,
        det_R=float(np.prod(eig_R.values)),
        lambda_min_R=float(eig_R.values[0]),
        tau_oracle=tau_oracle,
        lambda_min_R_bar=lam_min_rbar,
    )


def example1_closed_form(data, family, beta):
    """Closed-form spectral quantities for the two-covariate design."""
    if data.p != 2:
        raise ShapeError(f"closed form requires p=2, got p={data.p}")
    ev = eval_model(data, family, np.asarray(beta, dtype=float))
    a = data.X[:, :, 0]
    b = data.X[:, :, 1]
    s2 = ev.var
    u = float(np.sum(s2 * a * a))
    v = float(np.sum(s2 * b * b))
    w = float(np.sum(s2 * a * b))
    d = math.sqrt((u - v) ** 2 + 4.0 * w * w)
    det = u * v - w * w
    sin2 = det / (u * v)
    gamma0_bound = float(np.max((a / math.sqrt(u) + b / math.sqrt(v)) ** 2))
    return {
        "u": u, "v": v, "w": w, "d": d,
        "lambda_min": 0.5 * (u + v - d),
        "lambda_max": 0.5 * (u + v + d),
        "sin2_theta": sin2,
        "gamma0_bound": gamma0_bound,
    }


def example2_closed_form(data, family, beta):
    """Level sums for a single categorical covariate coded by basis vectors."""
    X = data.X
    is_zero = X == 0.0
    is_one = X == 1.0
    ok = np.all(is_zero | is_one, axis=2) & (np.sum(is_one, axis=2) == 1)
    if not np.all(ok):
        i, j = (int(v) for v in np.argwhere(~ok)[0])
        raise ShapeError(
            f"x at subject {i}, time {j} is not a standard basis vector"
        )
    ev = eval_model(data, family, np.asarray(beta, dtype=float))
    level = np.argmax(is_one, axis=2)   # (n, m) level index per cell
    nu = np.zeros(data.p)
    for k in range(data.p):
        nu[k] = float(np.sum(ev.var[level == k]))
    H = np.einsum("nmp,nm,nmq->pq", X, ev.var, X)
    if np.max(np.abs(H - np.diag(nu))) > 1e-12 * max(1.0, float(np.max(nu))):
        raise ShapeError("independence scoring matrix is not diagonal with the level sums")
    return {"nu": nu, "nu_min": float(np.min(nu))}


def condition_trend_report(data, family, beta, R=None, n_grid=None,
                           M_hat=None, true_corr=None):
    """Diagnostics along increasing subject prefixes (stored order).

    With R=None each prefix uses its own estimated correlation, so det_R
    doubles as the determinant-floor sequence; a fixed R (oracle mode) is
    used for every prefix when supplied.
    """
    if n_grid is None:
        n_grid = [data.n]
    n_grid = [int(v) for v in n_grid]
    if any(v < 1 or v > data.n for v in n_grid):
        raise ShapeError(f"grid values must lie in [1, {data.n}]")
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ShapeError("grid must be strictly increasing")
    reports = []
    for n_head in n_grid:
        prefix = data.subset(n_head)
        R_used = R if R is not None else estimate_correlation(prefix, family, beta).R_tilde
        reports.append(design_diagnostics(
            prefix, family, beta, R_used, M_hat=None if n_head != data.n else M_hat,
            true_corr=true_corr,
        ))
    return reports


def trend_flags(reports, det_floor=DEFAULT_DET_FLOOR):
    """Monotonicity surrogates for the asymptotic regularity conditions.

    True means the finite-n trend points the right way; single-report input
    yields no trend claims (everything True except the determinant floor,
    which is always checked).
    """
    lam_over_tau = [sym_eigen(r.H_general).values[0] / r.tau_tilde_n for r in reports]
    lam_indep = [r.lambda_min_H_indep for r in reports]
    pi2g = [r.pi2_gamma_tilde for r in reports]
    sng = [r.sqrt_n_pi_gamma_tilde for r in reports]
    sngi = [r.sqrt_n_times_gamma0_indep for r in reports]

    def increasing(xs):
        return all(b > a for a, b in zip(xs, xs[1:]))

    def decreasing(xs):
        return all(b < a for a, b in zip(xs, xs[1:]))

    return {
        "lambda_min_H_over_tau_increasing": increasing(lam_over_tau),
        "lambda_min_H_indep_increasing": increasing(lam_indep),
        "pi2_gamma_tilde_decreasing": decreasing(pi2g),
        "sqrt_n_pi_gamma_tilde_decreasing": decreasing(sng),
        "sqrt_n_gamma0_indep_decreasing": decreasing(sngi),
        "det_R_floor_ok": all(r.det_R >= det_floor for r in reports),
    }
