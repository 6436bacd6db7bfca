"""Target models: potential energy, gradient and Hessian-vector products.

Every model is immutable after construction and safe to evaluate from
multiple chains.  Dense prior precisions (correlated Gaussian, Cox) are
factored once at construction and cached.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class IngestionError(ValueError):
    """Raised when a data file cannot be turned into a design matrix."""


@dataclass
class TargetModel:
    """Bundle of dimension, potential U, gradient and Hessian-vector product.

    ``precision`` carries the dense precision matrix for Gaussian targets
    (used by condition-number diagnostics); ``extras`` holds model-specific
    arrays such as the Cox prior pieces.
    """

    dim: int
    potential: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hvp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = ""
    precision: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def default_hvp(model, q, w):
    """Central-difference Hessian-vector product from the model gradient."""
    w = np.asarray(w, dtype=float)
    wmax = np.max(np.abs(w)) if w.size else 0.0
    if wmax == 0.0:
        return np.zeros_like(w)
    eps = 1e-5 * (1.0 + np.max(np.abs(q))) / max(wmax, 1e-12)
    return (model.grad(q + eps * w) - model.grad(q - eps * w)) / (2.0 * eps)


def _as_precision(prec, dim=None):
    """Turn a precision argument (scalar, diagonal vector, dense SPD) into a dense matrix."""
    prec = np.asarray(prec, dtype=float)
    if prec.ndim == 0:
        if dim is None:
            raise ValueError("scalar precision needs an explicit dimension")
        return float(prec) * np.eye(dim)
    if prec.ndim == 1:
        if np.any(prec <= 0):
            raise ValueError("diagonal precision entries must be positive")
        return np.diag(prec)
    if prec.ndim == 2 and prec.shape[0] == prec.shape[1]:
        return prec.copy()
    raise ValueError("precision must be scalar, vector or square matrix")


def gaussian_target(precision=None, covariance=None, cov_factor=None, mean=None, name="gaussian"):
    """Gaussian with U(q) = 0.5 (q - mean)^T P (q - mean).

    Exactly one of ``precision``, ``covariance`` or ``cov_factor`` (F with
    covariance F F^T) must be given, as a vector (diagonal) or dense SPD
    matrix.  The gradient is P (q - mean) and the Hessian-vector product
    P w, independent of position.
    """
    given = [s is not None for s in (precision, covariance, cov_factor)]
    if sum(given) != 1:
        raise ValueError("give exactly one of precision, covariance, cov_factor")
    if cov_factor is not None:
        F = np.atleast_2d(np.asarray(cov_factor, dtype=float))
        covariance = F @ F.T
    if covariance is not None:
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 1:
            if np.any(cov <= 0):
                raise ValueError("diagonal covariance entries must be positive")
            P = np.diag(1.0 / cov)
        else:
            try:
                cf = cho_factor(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError("covariance is not positive definite") from exc
            P = cho_solve(cf, np.eye(cov.shape[0]))
            P = 0.5 * (P + P.T)
    else:
        P = _as_precision(precision)
        try:
            cho_factor(P)
        except np.linalg.LinAlgError as exc:
            raise ValueError("precision is not positive definite") from exc
    d = P.shape[0]
    mu = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    if mu.shape != (d,):
        raise ValueError("mean has wrong length")

    def potential(q):
        r = q - mu
        return 0.5 * float(r @ (P @ r))

    def grad(q):
        return P @ (q - mu)

    def hvp(q, w):
        return P @ w

    return TargetModel(d, potential, grad, hvp, name=name, precision=P,
                       extras={"mean": mu})


def anisotropic_gaussian(d, c):
    """Diagonal Gaussian with variances exp(c (i-1)/(d-1) log 10), i = 1..d.

    Marginal standard deviations grow geometrically from 1 to 10^(c/2);
    the largest variance is 10^c.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    variances = np.exp(c * np.arange(d) / (d - 1) * np.log(10.0))
    return gaussian_target(covariance=variances, name=f"anisotropic(d={d},c={c})")


def correlated_gaussian(grid_points=51):
    """Zero-mean Gaussian with a squared-exponential kernel plus white noise.

    Covariance k(x_i, x_j) = exp(-0.5 (x_i - x_j)^2 / 0.4^2) + 0.01 delta_ij
    on a regular grid over [0, 4].  The precision comes from one dense SPD
    factorization at construction.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    x = np.linspace(0.0, 4.0, grid_points)
    diff = x[:, None] - x[None, :]
    K = np.exp(-0.5 * diff**2 / 0.4**2) + 0.01 * np.eye(grid_points)
    try:
        model = gaussian_target(covariance=K, name=f"correlated(d={grid_points})")
    except ValueError as exc:
        raise RuntimeError("kernel matrix factorization failed") from exc
    model.extras["covariance"] = K
    return model


def _log1pexp(t):
    # log(1 + e^t) without overflow for large t
    return np.logaddexp(0.0, t)


def logistic_target(X, y, prior_cov=1.0):
    """Bayesian logistic regression posterior (negative log, unnormalized).

    U(q) = sum_i [ -y_i x_i^T q + log(1 + e^{x_i^T q}) ] + 0.5 q^T P0 q
    with P0 the prior precision.  ``prior_cov`` may be a scalar, diagonal
    vector or dense SPD covariance.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d design matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite entries")
    n, d = X.shape
    if y.shape != (n,):
        raise ValueError("y length does not match X")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    cov = np.asarray(prior_cov, dtype=float)
    if cov.ndim == 0:
        P0 = np.eye(d) / float(cov)
    elif cov.ndim == 1:
        P0 = np.diag(1.0 / cov)
    else:
        cf = cho_factor(cov)
        P0 = cho_solve(cf, np.eye(d))
        P0 = 0.5 * (P0 + P0.T)

    def potential(q):
        t = X @ q
        return float(np.sum(_log1pexp(t) - y * t) + 0.5 * q @ (P0 @ q))

    def grad(q):
        s = _sigmoid(X @ q)
        return X.T @ (s - y) + P0 @ q

    def hvp(q, w):
        s = _sigmoid(X @ q)
        return X.T @ (s * (1.0 - s) * (X @ w)) + P0 @ w

    return TargetModel(d, potential, grad, hvp, name=f"logistic(n={n},d={d})",
                       extras={"prior_precision": P0})


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def load_logistic_csv(path, intercept=True, standardize=True):
    """Read a numeric CSV with the binary label in the last column.

    Covariate columns are optionally z-scored (constant columns map to
    all zeros); a constant-1 column is appended when ``intercept`` is set.
    Errors name the offending row and column.
    """
    rows = []
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        fields = line.split(",")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            bad = next(j for j, f in enumerate(fields) if not _is_float(f))
            raise IngestionError(
                f"{path}: non-numeric field at row {i + 1}, column {bad + 1}"
            ) from None
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise IngestionError(f"{path}: row {i + 1} has {len(r)} fields, expected {width}")
    data = np.asarray(rows, dtype=float)
    X, y = data[:, :-1], data[:, -1]
    bad = np.where(~np.isin(y, (0.0, 1.0)))[0]
    if bad.size:
        raise IngestionError(f"{path}: label outside {{0,1}} at row {bad[0] + 1}")
    if standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        X = np.where(std > 0, (X - mean) / np.where(std > 0, std, 1.0), 0.0)
    if intercept:
        X = np.column_stack([X, np.ones(len(X))])
    return X, y


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def simulate_logistic_data(n, d, seed=0, coef_scale=1.5):
    """Synthetic logistic-regression data: standard-normal covariates and
    labels from a random coefficient vector."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    beta = coef_scale * rng.standard_normal(d) / np.sqrt(d)
    y = (rng.uniform(size=n) < _sigmoid(X @ beta)).astype(float)
    return X, y


# -- log-Gaussian Cox process on an n x n grid ---------------------------

COX_SIGMA2 = 1.91
COX_BETA = 1.0 / 33.0


def cox_default_mu(sigma2=COX_SIGMA2):
    return np.log(126.0) - sigma2 / 2.0


def _cox_prior_cov(n, sigma2, beta):
    idx = np.arange(n)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    dist = np.sqrt((ii[:, None] - ii[None, :]) ** 2 + (jj[:, None] - jj[None, :]) ** 2)
    return sigma2 * np.exp(-dist / (n * beta))


def cox_target(n, y, mu=None, sigma2=COX_SIGMA2, beta=COX_BETA):
    """Log-Gaussian Cox process posterior on an n-by-n grid (d = n^2).

    Counts are Poisson with intensity per cell m exp(x_ij), m = n^{-2};
    the latent field has mean mu and exponential-decay covariance
    sigma2 * exp(-dist / (n beta)).  The prior precision is factored once;
    the likelihood Hessian is diagonal with entries m exp(x_ij).
    """
    d = n * n
    y = np.asarray(y, dtype=float).ravel()
    if y.shape != (d,):
        raise ValueError(f"y must have n^2 = {d} entries")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("counts must be nonnegative integers")
    if mu is None:
        mu = cox_default_mu(sigma2)
    m = 1.0 / d
    cov = _cox_prior_cov(n, sigma2, beta)
    try:
        cf = cho_factor(cov)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("Cox prior covariance is not positive definite") from exc
    P = cho_solve(cf, np.eye(d))
    P = 0.5 * (P + P.T)
    mu_vec = np.full(d, float(mu))

    def potential(x):
        r = x - mu_vec
        return float(np.sum(m * np.exp(x) - y * x) + 0.5 * r @ (P @ r))

    def grad(x):
        return m * np.exp(x) - y + P @ (x - mu_vec)

    def hvp(x, w):
        return m * np.exp(x) * w + P @ w

    return TargetModel(d, potential, grad, hvp, name=f"cox(n={n})",
                       extras={"prior_precision": P, "prior_cov": cov,
                               "mu": float(mu), "m": m})


def simulate_cox_data(n, mu=None, sigma2=COX_SIGMA2, beta=COX_BETA, seed=0):
    """Draw a latent field from the Cox prior and counts from the Poisson likelihood."""
    if mu is None:
        mu = cox_default_mu(sigma2)
    d = n * n
    rng = np.random.default_rng(seed)
    cov = _cox_prior_cov(n, sigma2, beta)
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(d))
    x = mu + L @ rng.standard_normal(d)
    lam = np.exp(x) / d
    y = rng.poisson(lam)
    return x, y


# -- stochastic volatility model -----------------------------------------


def _softplus(t):
    return np.logaddexp(0.0, t)


def sv_target(returns):
    """Stochastic volatility posterior in unconstrained coordinates.

    State q = (h_1..h_T, mu, a, b) with persistence phi = 2 sigmoid(a) - 1
    and noise scale sigma = softplus(b).  Latent log-volatilities follow an
    AR(1) process, h_1 ~ N(0, sigma^2/(1 - phi^2)); observations are
    y_t ~ N(0, exp(mu + h_t)).  Priors: (phi+1)/2 ~ Beta(20, 1.5),
    mu ~ Cauchy(0, 2), sigma ~ Half-Cauchy(0, 1); the potential includes
    the log-Jacobians of both transforms.  The Hessian-vector product uses
    the central-difference fallback.
    """
    y = np.asarray(returns, dtype=float)
    T = y.size
    if T < 2:
        raise ValueError("need at least two observations")
    if not np.all(np.isfinite(y)):
        raise ValueError("returns contain non-finite values")
    d = T + 3

    def unpack(q):
        return q[:T], q[T], q[T + 1], q[T + 2]

    def potential(q):
        h, mu, a, b = unpack(q)
        z = _sigmoid(np.asarray(a))
        phi = 2.0 * z - 1.0
        sigma = _softplus(b)
        s2 = sigma * sigma
        # observations
        u = np.sum(0.5 * (mu + h) + 0.5 * y**2 * np.exp(-(mu + h)))
        # AR(1) prior on the latent path
        one_m_phi2 = 1.0 - phi * phi
        u += 0.5 * np.log(s2 / one_m_phi2) + 0.5 * h[0] ** 2 * one_m_phi2 / s2
        r = h[1:] - phi * h[:-1]
        u += (T - 1) * np.log(sigma) + 0.5 * np.sum(r**2) / s2
        # transformed priors: Beta(20, 1.5) on (phi+1)/2 = sigmoid(a)
        u += -20.0 * np.log(z) - 1.5 * np.log1p(-z)
        # mu ~ Cauchy(0, 2)
        u += np.log1p((mu / 2.0) ** 2)
        # sigma ~ Half-Cauchy(0, 1) with softplus Jacobian
        u += np.log1p(sigma * sigma) - np.log(_sigmoid(np.asarray(b)))
        return float(u)

    def grad(q):
        h, mu, a, b = unpack(q)
        z = float(_sigmoid(np.asarray(a)))
        phi = 2.0 * z - 1.0
        sb = float(_sigmoid(np.asarray(b)))
        sigma = float(_softplus(b))
        s2 = sigma * sigma
        g = np.zeros(d)
        e = 0.5 - 0.5 * y**2 * np.exp(-(mu + h))
        g[:T] += e
        g[T] += float(np.sum(e)) + (mu / 2.0) / (1.0 + (mu / 2.0) ** 2)
        one_m_phi2 = 1.0 - phi * phi
        r = h[1:] - phi * h[:-1]
        # latent-path terms
        g[0] += h[0] * one_m_phi2 / s2
        g[1:T] += r / s2
        g[: T - 1] += -phi * r / s2
        # phi chain (through h1 prior and transitions), then to a
        du_dphi = phi / one_m_phi2 - phi * h[0] ** 2 / s2 - float(np.sum(r * h[:-1])) / s2
        g[T + 1] += du_dphi * 2.0 * z * (1.0 - z) - 20.0 * (1.0 - z) + 1.5 * z
        # sigma chain, then to b
        du_dsigma = (
            1.0 / sigma
            - h[0] ** 2 * one_m_phi2 / (s2 * sigma)
            + (T - 1) / sigma
            - float(np.sum(r**2)) / (s2 * sigma)
            + 2.0 * sigma / (1.0 + s2)
        )
        g[T + 2] += du_dsigma * sb - (1.0 - sb)
        return g

    model = TargetModel(d, potential, grad, None, name=f"sv(T={T})",
                        extras={"returns": y})
    model.hvp = lambda q, w: default_hvp(model, q, w)
    return model


def simulate_sv_data(T, phi=0.98, sigma=0.15, mu=-1.0, seed=0):
    """Simulate a return series from the stochastic volatility model."""
    if T < 2:
        raise ValueError("need T >= 2")
    rng = np.random.default_rng(seed)
    h = np.empty(T)
    h[0] = rng.normal(0.0, sigma / np.sqrt(1.0 - phi**2))
    for t in range(T - 1):
        h[t + 1] = phi * h[t] + rng.normal(0.0, sigma)
    y = rng.normal(0.0, np.exp(0.5 * (mu + h)))
    return y


def load_returns_csv(path):
    """Read a single-column CSV of log-returns."""
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=1)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read returns from {path}: {exc}") from exc
    if values.ndim != 1:
        raise IngestionError(f"{path}: expected a single column of returns")
    return values
