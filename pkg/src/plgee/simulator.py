"""Seeded synthetic-data generators and the Monte Carlo harness.

Generators produce datasets whose marginal mean and variance follow the
canonical-link model exactly (Gaussian for the identity link; Poisson and
Bernoulli through a latent Gaussian copula for log and logit).  The harness
runs the two-step and working-independence estimators over replicates with
deterministic per-replicate seeds, so parallel and sequential runs agree
bit for bit.
"""

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyReportError, NotPositiveDefiniteError, PlgeeError
from .estimator import (
    SolverOptions,
    estimate_correlation,
    gee_independence_fit,
    two_step_fit,
    wald_intervals,
)
from .matkernel import SymMatrix, sym_eigen, sym_sqrt_pair
from .model import (
    LinkFamily,
    LongitudinalDataset,
    gauss_cdf,
    gauss_quantile_array,
)

Z_TWO_SIDED_95 = 1.959964

# Stream tags keep the design, response, and shuffle draws on distinct
# deterministic substreams of each replicate seed.
_TAG_DESIGN = 0x9E3779B97F4A7C15
_TAG_RESPONSE = 0xC2B2AE3D27D4EB4F
_MASK64 = (1 << 64) - 1


def mix_seed(seed, index):
    """splitmix64-style mix of a base seed and a stream index."""
    x = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _uniforms(seed, shape):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.random(shape)


def _standard_normals(seed, shape):
    # inverse-CDF sampling: all randomness flows through one uniform stream
    u = _uniforms(seed, shape)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return gauss_quantile_array(u)


def exchangeable_matrix(m, rho):
    return (1.0 - rho) * np.eye(m) + rho * np.ones((m, m))


def ar1_matrix(m, rho):
    idx = np.arange(m)
    return rho ** np.abs(idx[:, None] - idx[None, :])


@dataclass(frozen=True)
class DesignSpec:
    kind: str                 # iid_uniform | grid | categorical
    lo: float = -1.0
    hi: float = 1.0

    def validate(self, p):
        if self.kind not in ("iid_uniform", "grid", "categorical"):
            raise ConfigError(f"unknown design kind {self.kind!r}")
        if self.kind == "iid_uniform" and not self.lo < self.hi:
            raise ConfigError(f"iid_uniform needs lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class CorrelationSpec:
    kind: str                 # exchangeable | ar1 | custom
    rho: float = 0.0
    R_bar: tuple = ()         # nested tuple for custom matrices (hashable)

    def validate(self, m):
        if self.kind == "exchangeable":
            lower = -1.0 / (m - 1) if m > 1 else -1.0
            if not lower < self.rho < 1.0:
                raise ConfigError(
                    f"exchangeable rho must be in ({lower:.4g}, 1), got {self.rho}"
                )
        elif self.kind == "ar1":
            if not abs(self.rho) < 1.0:
                raise ConfigError(f"ar1 rho must satisfy |rho| < 1, got {self.rho}")
        elif self.kind == "custom":
            R = np.asarray(self.R_bar, dtype=float)
            if R.shape != (m, m):
                raise ConfigError(f"custom correlation must be {m}x{m}, got {R.shape}")
            if np.max(np.abs(np.diag(R) - 1.0)) > 1e-10:
                raise ConfigError("custom correlation must have unit diagonal")
            if sym_eigen(SymMatrix(R)).values[0] <= 0:
                raise ConfigError("custom correlation must be positive definite")
        else:
            raise ConfigError(f"unknown correlation kind {self.kind!r}")

    def matrix(self, m):
        if self.kind == "exchangeable":
            return exchangeable_matrix(m, self.rho)
        if self.kind == "ar1":
            return ar1_matrix(m, self.rho)
        return 0.5 * (np.asarray(self.R_bar, dtype=float) +
                      np.asarray(self.R_bar, dtype=float).T)


@dataclass(frozen=True)
class SimConfig:
    n: int
    m: int
    p: int
    family: LinkFamily
    beta0: tuple
    design: DesignSpec
    correlation: CorrelationSpec
    subject_dependence: str = "independent"   # independent | sign_modulated
    replications: int = 1
    base_seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.p < 1:
            raise ConfigError(f"need n, m, p >= 1, got {(self.n, self.m, self.p)}")
        if len(self.beta0) != self.p:
            raise ConfigError(f"beta0 must have length p={self.p}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError("ci_level must be in (0,1)")
        if self.subject_dependence not in ("independent", "sign_modulated"):
            raise ConfigError(
                f"unknown subject_dependence {self.subject_dependence!r}"
            )
        if self.family.kind == "probit":
            raise ConfigError(
                "no generator exists for the probit variance function; "
                "fit probit on logit-generated data instead"
            )
        if self.family.kind != "identity" and self.subject_dependence != "independent":
            raise ConfigError("sign_modulated dependence requires the identity link")
        self.design.validate(self.p)
        self.correlation.validate(self.m)
        rho = getattr(self.correlation, "rho", 0.0)
        if self.family.kind == "logit" and rho > 0.95:
            warnings.warn(
                "latent rho > 0.95 with binary marginals: attainable response "
                "correlation is Frechet-bounded well below the latent value",
                stacklevel=2,
            )

    @staticmethod
    def from_json(doc):
        try:
            family = LinkFamily(doc["family"])
            design_doc = dict(doc["design"])
            design = DesignSpec(
                kind=design_doc.pop("kind"),
                lo=float(design_doc.pop("lo", -1.0)),
                hi=float(design_doc.pop("hi", 1.0)),
            )
            corr_doc = dict(doc["correlation"])
            kind = corr_doc.pop("kind")
            R_bar = corr_doc.pop("R_bar", ())
            if R_bar:
                R_bar = tuple(tuple(float(v) for v in row) for row in R_bar)
            corr = CorrelationSpec(kind=kind,
                                   rho=float(corr_doc.pop("rho", 0.0)),
                                   R_bar=R_bar)
            return SimConfig(
                n=int(doc["n"]), m=int(doc["m"]), p=int(doc["p"]),
                family=family,
                beta0=tuple(float(v) for v in doc["beta0"]),
                design=design,
                correlation=corr,
                subject_dependence=doc.get("subject_dependence", "independent"),
                replications=int(doc.get("replications", 1)),
                base_seed=int(doc.get("base_seed", 0)),
                ci_level=float(doc.get("ci_level", 0.95)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid simulation config: {exc}") from exc


def make_design(config, seed=None):
    """Design array (n, m, p); deterministic given the seed."""
    if seed is None:
        seed = mix_seed(config.base_seed, _TAG_DESIGN)
    n, m, p = config.n, config.m, config.p
    spec = config.design
    if spec.kind == "iid_uniform":
        u = _uniforms(seed, (n, m, p))
        return spec.lo + (spec.hi - spec.lo) * u
    if spec.kind == "grid":
        # deterministic bounded design: 11 equally spaced levels in [-1, 1],
        # phase-shifted per covariate so columns are not collinear
        levels = np.linspace(-1.0, 1.0, 11)
        cell = np.arange(n * m).reshape(n, m)
        X = np.empty((n, m, p))
        for k in range(p):
            X[:, :, k] = levels[(cell + 2 * k + k * k) % len(levels)]
        return X
    # categorical: levels assigned cyclically over cells, then shuffled
    cells = n * m
    levels = np.arange(cells) % p
    rng = np.random.Generator(np.random.PCG64(seed))
    levels = levels[rng.permutation(cells)]
    X = np.zeros((cells, p))
    X[np.arange(cells), levels] = 1.0
    return X.reshape(n, m, p)


def gen_gaussian(X, beta0, R_bar, subject_dependence="independent", seed=0):
    """Identity-link responses y_i = X_i beta0 + L z_i with Cov = R_bar.

    sign_modulated flips each residual vector by a sign that is a function
    of the previous subjects' first residual components: the flip is
    past-measurable, so the residuals stay a martingale difference sequence
    with unchanged marginal covariance.
    """
    X = np.asarray(X, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    n, m, _ = X.shape
    R_bar = 0.5 * (np.asarray(R_bar, dtype=float) + np.asarray(R_bar, dtype=float).T)
    if sym_eigen(SymMatrix(R_bar)).values[0] <= 0:
        raise NotPositiveDefiniteError("correlation matrix is not positive definite")
    L = np.linalg.cholesky(R_bar)
    z = _standard_normals(seed, (n, m))
    eps = z @ L.T
    if subject_dependence == "sign_modulated":
        running = 0.0
        for i in range(n):
            s = 1.0 if running >= 0.0 else -1.0
            eps[i] *= s
            running += eps[i, 0]
    theta = X @ beta0
    return LongitudinalDataset(X, theta + eps)


def _poisson_quantile_grid(v, lam, cap=100000):
    """Smallest k with Poisson(lam) CDF >= v, vectorized in lockstep."""
    y = np.zeros_like(lam)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    active = cdf < v
    k = 0
    while np.any(active):
        k += 1
        if k > cap:
            raise PlgeeError("poisson quantile search exceeded its cap")
        pmf = pmf * lam / k
        cdf = cdf + pmf
        y[active] = k
        active = active & (cdf < v)
    return y


def gen_discrete(X, beta0, family, R_bar, seed=0):
    """Poisson (log link) or Bernoulli (logit link) marginals with latent
    Gaussian-copula dependence.

    Marginal means and variances match the canonical-link model exactly;
    the realized response correlation differs from the latent R_bar (it is
    attenuated, and for binary data Frechet-bounded)."""
    if family.kind not in ("log", "logit"):
        raise ConfigError(
            f"discrete generator supports log and logit links, not {family.kind!r}"
        )
    X = np.asarray(X, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    n, m, _ = X.shape
    R_bar = 0.5 * (np.asarray(R_bar, dtype=float) + np.asarray(R_bar, dtype=float).T)
    L = np.linalg.cholesky(R_bar)
    z = _standard_normals(seed, (n, m))
    v = gauss_cdf(z @ L.T)
    theta = X @ beta0
    if family.kind == "log":
        y = _poisson_quantile_grid(v, np.exp(theta))
    else:
        mu = 1.0 / (1.0 + np.exp(-theta))
        y = (v > 1.0 - mu).astype(float)
    return LongitudinalDataset(X, y)


def generate_dataset(config, seed):
    """Dispatch to the generator matching the configured link."""
    X = make_design(config, seed=mix_seed(seed, _TAG_DESIGN))
    R_bar = config.correlation.matrix(config.m)
    resp_seed = mix_seed(seed, _TAG_RESPONSE)
    if config.family.kind == "identity":
        return gen_gaussian(X, config.beta0, R_bar,
                            subject_dependence=config.subject_dependence,
                            seed=resp_seed)
    return gen_discrete(X, config.beta0, config.family, R_bar, seed=resp_seed)


@dataclass
class MCReport:
    replications: int
    n_failures: int
    ci_level: float
    bias: list
    emp_var: list
    rmse: list
    coverage: list
    indep_emp_var: list
    efficiency_ratio: list
    z_within_1960_frac: float
    ks_distance: float
    median_beta_error_norm: float
    mean_corr_max_abs_error: float
    max_corr_max_abs_error: float
    lambda_min_R_bar: float
    tau_oracle: float

    def to_json(self):
        return {
            "replications": self.replications,
            "n_failures": self.n_failures,
            "ci_level": self.ci_level,
            "bias": self.bias,
            "emp_var": self.emp_var,
            "rmse": self.rmse,
            "coverage": self.coverage,
            "indep_emp_var": self.indep_emp_var,
            "efficiency_ratio": self.efficiency_ratio,
            "z_within_1960_frac": self.z_within_1960_frac,
            "ks_distance": self.ks_distance,
            "median_beta_error_norm": self.median_beta_error_norm,
            "mean_corr_max_abs_error": self.mean_corr_max_abs_error,
            "max_corr_max_abs_error": self.max_corr_max_abs_error,
            "lambda_min_R_bar": self.lambda_min_R_bar,
            "tau_oracle": self.tau_oracle,
        }


def ks_distance_to_normal(z):
    """Kolmogorov-Smirnov distance of a sample to the standard normal."""
    z = np.sort(np.asarray(z, dtype=float))
    n = len(z)
    F = gauss_cdf(z)
    upper = np.max(np.arange(1, n + 1) / n - F)
    lower = np.max(F - np.arange(0, n) / n)
    return float(max(upper, lower))


def _run_replicate(config, r):
    """One seeded replicate: generate, fit both ways, standardize."""
    seed = mix_seed(config.base_seed, r)
    data = generate_dataset(config, seed)
    R_bar = config.correlation.matrix(config.m)
    opts = SolverOptions()
    out = {"rep": r, "ok": False}
    try:
        indep = gee_independence_fit(data, config.family, opts=opts)
        two = two_step_fit(data, config.family, opts=opts)
    except PlgeeError:
        return out
    if not (indep.converged and two.converged):
        return out
    beta0 = np.asarray(config.beta0, dtype=float)
    delta = two.beta_hat - beta0
    _, cov_inv_half = sym_sqrt_pair(two.cov_beta)
    z = cov_inv_half.a @ delta
    ci = wald_intervals(two, level=config.ci_level)
    covered = [lo <= b0 <= hi for (lo, hi), b0 in zip(ci, beta0)]
    corr = estimate_correlation(data, config.family, beta0)   # oracle-beta estimate
    out.update(
        ok=True,
        beta_two=two.beta_hat.tolist(),
        beta_indep=indep.beta_hat.tolist(),
        z=z.tolist(),
        covered=covered,
        corr_err=float(np.max(np.abs(corr.R_tilde.a - R_bar))),
        R_tilde=corr.R_tilde.a.tolist(),
    )
    return out


def monte_carlo_run(config, workers=1):
    """Run all replicates and aggregate bias/variance/coverage/normality.

    Replicates that fail to converge (or error out of the solver) are
    counted and excluded from the moment statistics.  Aggregation is in
    replicate order, so worker count does not affect the output.
    """
    reps = range(config.replications)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, [config] * config.replications, reps))
    else:
        results = [_run_replicate(config, r) for r in reps]
    results.sort(key=lambda d: d["rep"])

    ok = [d for d in results if d["ok"]]
    n_fail = config.replications - len(ok)
    if not ok:
        raise EmptyReportError("no replicate converged; nothing to aggregate")

    beta0 = np.asarray(config.beta0, dtype=float)
    B_two = np.array([d["beta_two"] for d in ok])
    B_ind = np.array([d["beta_indep"] for d in ok])
    Z = np.array([d["z"] for d in ok])
    covered = np.array([d["covered"] for d in ok], dtype=float)
    corr_err = np.array([d["corr_err"] for d in ok])
    R_mean = np.mean(np.array([d["R_tilde"] for d in ok]), axis=0)

    err = B_two - beta0
    ddof = 1 if len(ok) > 1 else 0
    emp_var = np.var(B_two, axis=0, ddof=ddof)
    ind_var = np.var(B_ind, axis=0, ddof=ddof)
    z_pool = Z.ravel()

    R_bar = config.correlation.matrix(config.m)
    _, R_inv_half = sym_sqrt_pair(SymMatrix(R_mean))
    W = R_inv_half.a @ R_bar @ R_inv_half.a
    tau_oracle = float(sym_eigen(SymMatrix(W)).values[-1])

    with np.errstate(divide="ignore", invalid="ignore"):
        eff = np.where(ind_var > 0, emp_var / ind_var, np.nan)

    return MCReport(
        replications=config.replications,
        n_failures=n_fail,
        ci_level=config.ci_level,
        bias=np.mean(err, axis=0).tolist(),
        emp_var=emp_var.tolist(),
        rmse=np.sqrt(np.mean(err * err, axis=0)).tolist(),
        coverage=np.mean(covered, axis=0).tolist(),
        indep_emp_var=ind_var.tolist(),
        efficiency_ratio=eff.tolist(),
        z_within_1960_frac=float(np.mean(np.abs(z_pool) <= Z_TWO_SIDED_95)),
        ks_distance=ks_distance_to_normal(z_pool),
        median_beta_error_norm=float(np.median(np.linalg.norm(err, axis=1))),
        mean_corr_max_abs_error=float(np.mean(corr_err)),
        max_corr_max_abs_error=float(np.max(corr_err)),
        lambda_min_R_bar=float(sym_eigen(SymMatrix(R_bar)).values[0]),
        tau_oracle=tau_oracle,
    )


def per_replicate_rows(config, workers=1):
    """Per-replicate (beta_hat, z, covered) rows for external plotting."""
    reps = range(config.replications)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, [config] * config.replications, reps))
    else:
        results = [_run_replicate(config, r) for r in reps]
    results.sort(key=lambda d: d["rep"])
    rows = []
    for d in results:
        if not d["ok"]:
            rows.append({"rep": d["rep"], "converged": False})
        else:
            rows.append({
                "rep": d["rep"], "converged": True,
                "beta_hat": d["beta_two"], "z": d["z"], "covered": d["covered"],
            })
    return rows
