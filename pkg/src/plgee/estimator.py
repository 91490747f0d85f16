"""Two-step pseudo-likelihood GEE estimation.

Pipeline: working-independence Newton solve, empirical average-correlation
estimate from the standardized residuals, Fisher-scoring solve of the
pseudo-likelihood equation built on that correlation, and the
Liang-Zeger-style sandwich covariance with Wald intervals on top.
"""

from dataclasses import dataclass, field

import numpy as np

from . import matkernel
from .errors import (
    DegenerateVarianceError,
    LineSearchFailure,
    LinkOverflowError,
    NotPositiveDefiniteError,
    PreconditionError,
    SingularDesignError,
)
from .matkernel import SymMatrix, solve_spd, spd_inverse, sym_eigen
from .model import eval_model, gauss_quantile

METHOD_INDEPENDENCE = "independence"
METHOD_PSEUDO_LIKELIHOOD = "pseudo_likelihood"


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 50
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    step_halving_max: int = 20

    def __post_init__(self):
        if self.max_iter < 1 or self.step_halving_max < 0:
            raise PreconditionError("iteration counts must be positive")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise PreconditionError("tolerances must be strictly positive")


@dataclass(frozen=True)
class CorrelationEstimate:
    R_tilde: SymMatrix
    computed_at_beta: np.ndarray
    n_used: int


@dataclass
class FitResult:
    beta_hat: np.ndarray
    converged: bool
    iterations: int
    final_gnorm: float
    trace: list = field(default_factory=list)  # per-iteration (beta, gnorm)
    method: str = METHOD_INDEPENDENCE
    cov_beta: SymMatrix | None = None
    correlation_used: CorrelationEstimate | None = None
    fallback_to_independence: bool = False


def _independence_system(data, family, beta):
    ev = eval_model(data, family, beta)
    g = np.einsum("nmp,nm->p", data.X, ev.eps)
    H = np.einsum("nmp,nm,nmq->pq", data.X, ev.var, data.X)
    return g, H, ev


def _general_system(data, family, beta, Q):
    """Estimating function and scoring matrix for a fixed correlation inverse Q."""
    ev = eval_model(data, family, beta)
    sd = ev.sd
    s = ev.eps / sd                       # standardized residuals, (n, m)
    t = sd * (s @ Q.T)                    # A^{1/2} Q A^{-1/2} eps
    g = np.einsum("nmp,nm->p", data.X, t)
    B = sd[:, :, None] * data.X           # A^{1/2} X_i
    H = np.einsum("njp,jk,nkq->pq", B, Q, B)
    return g, H, ev


def _convergence_scale(data, opts):
    xty = np.einsum("nmp,nm->p", data.X, data.y)
    return opts.grad_tol * (1.0 + float(np.linalg.norm(xty)))


def _newton_solve(data, family, beta_init, opts, system, method):
    """Damped Newton / Fisher scoring on the estimating function.

    Full step first; halved whenever the estimating-function norm fails to
    decrease or the link overflows along the way.
    """
    beta = np.asarray(beta_init, dtype=float).copy()
    tol = _convergence_scale(data, opts)
    try:
        g, H, _ = system(beta)
    except LinkOverflowError as exc:
        raise LineSearchFailure(f"link overflow at the initial point: {exc}") from exc
    gnorm = float(np.linalg.norm(g))
    trace = [(beta.copy(), gnorm)]

    if gnorm <= tol:
        return FitResult(beta_hat=beta, converged=True, iterations=0,
                         final_gnorm=gnorm, trace=trace, method=method)

    for it in range(1, opts.max_iter + 1):
        try:
            step = solve_spd(H, g)
        except NotPositiveDefiniteError as exc:
            raise SingularDesignError(
                f"scoring matrix singular at iteration {it}: {exc}"
            ) from exc

        accepted = False
        scale = 1.0
        for _ in range(opts.step_halving_max + 1):
            cand = beta + scale * step
            try:
                g_new, H_new, _ = system(cand)
            except LinkOverflowError:
                scale *= 0.5
                continue
            gnorm_new = float(np.linalg.norm(g_new))
            if gnorm_new < gnorm or gnorm <= tol:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            raise LineSearchFailure(
                f"step halving exhausted after {opts.step_halving_max} halvings "
                f"at iteration {it} (gnorm={gnorm:.6g})"
            )

        step_size = float(np.linalg.norm(scale * step))
        beta, g, H, gnorm = cand, g_new, H_new, gnorm_new
        trace.append((beta.copy(), gnorm))
        if gnorm <= tol:
            return FitResult(beta_hat=beta, converged=True, iterations=it,
                             final_gnorm=gnorm, trace=trace, method=method)
        if step_size <= opts.step_tol * (1.0 + float(np.linalg.norm(beta))):
            break

    return FitResult(beta_hat=beta, converged=False, iterations=len(trace) - 1,
                     final_gnorm=gnorm, trace=trace, method=method)


def gee_independence_fit(data, family, beta_init=None, opts=SolverOptions()):
    """Newton solve of the working-independence estimating equation.

    For canonical links the scoring matrix sum X_i' A_i X_i is the exact
    Jacobian of the estimating function.
    """
    if beta_init is None:
        beta_init = np.zeros(data.p)
    _, H0, _ = _independence_system(data, family, np.asarray(beta_init, dtype=float))
    eig = sym_eigen(H0)
    if eig.values[0] <= matkernel.pd_tolerance(H0):
        raise SingularDesignError(
            f"design is rank deficient at the initial point "
            f"(lambda_min(H)={eig.values[0]:.6g})"
        )
    return _newton_solve(
        data, family, beta_init, opts,
        lambda b: _independence_system(data, family, b),
        METHOD_INDEPENDENCE,
    )


def estimate_correlation(data, family, beta):
    """Average outer product of standardized residuals at beta."""
    ev = eval_model(data, family, np.asarray(beta, dtype=float))
    if np.any(ev.var <= 0.0) or not np.all(np.isfinite(ev.var)):
        bad = np.argwhere(~((ev.var > 0.0) & np.isfinite(ev.var)))[0]
        raise DegenerateVarianceError(
            f"degenerate variance at subject {int(bad[0])}, time {int(bad[1])}",
            subject=int(bad[0]), time=int(bad[1]),
        )
    s = ev.eps / ev.sd
    R = (s.T @ s) / data.n
    return CorrelationEstimate(
        R_tilde=SymMatrix(R),
        computed_at_beta=np.asarray(beta, dtype=float).copy(),
        n_used=data.n,
    )


def pseudo_likelihood_fit(data, family, corr, beta_init=None, opts=SolverOptions()):
    """Fisher-scoring solve of the pseudo-likelihood estimating equation.

    The step matrix is sum X_i' A_i^{1/2} R^{-1} A_i^{1/2} X_i; the extra
    derivative terms of the exact Jacobian are dropped (their effect is
    checked in diagnostics, not used for stepping).
    """
    R = corr.R_tilde.a
    eig = sym_eigen(R)
    if eig.values[0] <= matkernel.pd_tolerance(R):
        raise NotPositiveDefiniteError(
            f"correlation estimate is singular (lambda_min={eig.values[0]:.6g})",
            lambda_min=float(eig.values[0]),
        )
    Q = spd_inverse(R)
    if beta_init is None:
        beta_init = np.zeros(data.p)
    result = _newton_solve(
        data, family, beta_init, opts,
        lambda b: _general_system(data, family, b, Q),
        METHOD_PSEUDO_LIKELIHOOD,
    )
    result.correlation_used = corr
    return result


@dataclass(frozen=True)
class SandwichParts:
    M_hat: SymMatrix
    H_tilde: SymMatrix
    cov_beta: SymMatrix


def sandwich_covariance(data, family, beta_hat, corr):
    """Robust covariance H^{-1} M H^{-1} at beta_hat under correlation corr."""
    Q = spd_inverse(corr.R_tilde.a)
    _, H, ev = _general_system(data, family, np.asarray(beta_hat, dtype=float), Q)
    sd = ev.sd
    t = sd * ((ev.eps / sd) @ Q.T)
    V = np.einsum("nmp,nm->np", data.X, t)      # per-subject score contributions
    M = V.T @ V
    eig = sym_eigen(H)
    if eig.values[0] <= matkernel.pd_tolerance(H):
        raise NotPositiveDefiniteError(
            f"scoring matrix singular at beta_hat (lambda_min={eig.values[0]:.6g})",
            lambda_min=float(eig.values[0]),
        )
    H_inv = (eig.vectors / eig.values) @ eig.vectors.T
    cov = H_inv @ M @ H_inv
    return SandwichParts(M_hat=SymMatrix(M), H_tilde=SymMatrix(H), cov_beta=SymMatrix(cov))


def two_step_fit(data, family, opts=SolverOptions()):
    """Independence fit from zero, correlation estimate, pseudo-likelihood
    refit, sandwich covariance.  Falls back to the (sandwich-equipped)
    independence fit when the correlation estimate is numerically singular.
    """
    indep = gee_independence_fit(data, family, beta_init=None, opts=opts)
    corr = estimate_correlation(data, family, indep.beta_hat)

    eig = sym_eigen(corr.R_tilde.a)
    if eig.values[0] <= matkernel.pd_tolerance(corr.R_tilde.a):
        identity = CorrelationEstimate(
            R_tilde=SymMatrix(np.eye(data.m)),
            computed_at_beta=indep.beta_hat.copy(),
            n_used=data.n,
        )
        indep.cov_beta = sandwich_covariance(
            data, family, indep.beta_hat, identity).cov_beta
        indep.correlation_used = corr
        indep.fallback_to_independence = True
        return indep

    fit = pseudo_likelihood_fit(data, family, corr, beta_init=indep.beta_hat, opts=opts)
    fit.cov_beta = sandwich_covariance(data, family, fit.beta_hat, corr).cov_beta
    return fit


def wald_intervals(fit, level=0.95):
    """Per-coordinate Wald interval beta_k +/- z * se_k."""
    if fit.cov_beta is None:
        raise PreconditionError("fit carries no covariance; run two_step_fit "
                                "or attach a sandwich covariance first")
    if not 0.0 < level < 1.0:
        raise PreconditionError(f"level must be in (0,1), got {level}")
    z = gauss_quantile(0.5 * (1.0 + level))
    se = np.sqrt(np.maximum(np.diag(fit.cov_beta.a), 0.0))
    return [(float(b - z * s), float(b + z * s)) for b, s in zip(fit.beta_hat, se)]
