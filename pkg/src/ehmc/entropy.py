"""Entropy surrogate machinery: the midpoint-Hessian operator, the
Russian-roulette series with spectral normalization, and the eigenvalue
penalty.

The operator D(w) = -h^2 (L^2 - 1)/6 * C^T H(q_mid) C w costs one
Hessian-vector product per application.  One roulette pass per adaptation
step serves both the entropy surrogate and the penalty's power-iteration
eigenvalue estimate.
"""

from dataclasses import dataclass

import numpy as np

N_MIN = 3
DELTA_PRIME = 0.99
PENALTY_DELTA = 0.75


@dataclass
class RouletteDraw:
    """One truncated-series draw.

    epsilon: Rademacher probe (+-1 entries)
    n_terms: truncation level N (>= n_min)
    survival: p_k = P(N >= k) for k = 1..N, nonincreasing, positive
    eta_bar: final normalized power iterate
    y: alternating-series accumulator sum_k ((-1)^k / p_k) eta_k
    b: unit eigenvector estimate (zero vector when degenerate)
    mu: b^T D b, the dominant-eigenvalue estimate
    eps_eta: epsilon^T eta_k for k = 1..N (for the log-det estimate)
    clamp_count: how many iterations the spectral clamp fired
    degenerate: an iterate hit exactly zero, so b and mu are zeroed
    """

    epsilon: np.ndarray
    n_terms: int
    survival: np.ndarray
    eta_bar: np.ndarray
    y: np.ndarray
    b: np.ndarray
    mu: float
    eps_eta: np.ndarray
    clamp_count: int
    degenerate: bool


def dl_coeff(h, L):
    """Scalar prefactor -h^2 (L^2 - 1) / 6 of the surrogate operator."""
    return -h * h * (L * L - 1) / 6.0


def dl_matvec(q_mid, precond, model, h, L, w):
    """Apply the midpoint-Hessian surrogate operator to w.

    One hvp call; exactly zero for L = 1.  Raises on non-finite output so
    the adaptation step can skip the update.
    """
    if L == 1:
        return np.zeros_like(np.asarray(w, dtype=float))
    z = precond.rmatvec(model.hvp(q_mid, precond.matvec(w)))
    out = dl_coeff(h, L) * z
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return out


def dl_operator(q_mid, precond, model, h, L):
    """Close over the frozen midpoint, returning w -> D w."""
    return lambda w: dl_matvec(q_mid, precond, model, h, L, w)


def sample_truncation(rng, n_min=N_MIN):
    """Truncation level N = n_min + Geometric(1/2) on {0,1,...} and its
    survival probabilities p_k = P(N >= k)."""
    extra = int(rng.geometric(0.5)) - 1
    n = n_min + extra
    k = np.arange(1, n + 1)
    p = np.where(k <= n_min, 1.0, 0.5 ** np.maximum(k - n_min, 0))
    return n, p


def roulette_pass(dl, dim, rng, delta_prime=DELTA_PRIME, n_min=N_MIN):
    """Run the alternating power series with spectral normalization.

    Iterates eta_k = (D eta_{k-1}) * min{1, delta' ||eta_{k-1}|| / ||D eta_{k-1}||},
    so iterates contract whenever the clamp fires and can never overflow.
    Accumulates y and the probe inner products, then spends one extra
    operator application on mu = b^T D b.
    """
    epsilon = rng.integers(0, 2, size=dim).astype(float) * 2.0 - 1.0
    n, survival = sample_truncation(rng, n_min)
    eta = epsilon.copy()
    y = np.zeros(dim)
    eps_eta = np.zeros(n)
    clamps = 0
    degenerate = False
    for k in range(1, n + 1):
        z = dl(eta)
        zn = float(np.linalg.norm(z))
        en = float(np.linalg.norm(eta))
        if zn == 0.0:
            eta = np.zeros(dim)
            degenerate = True
            break
        if zn > delta_prime * en:
            z = z * (delta_prime * en / zn)
            clamps += 1
        eta = z
        y += ((-1.0) ** k / survival[k - 1]) * eta
        eps_eta[k - 1] = float(epsilon @ eta)
    if degenerate or float(np.linalg.norm(eta)) == 0.0:
        b = np.zeros(dim)
        mu = 0.0
        degenerate = True
    else:
        b = eta / float(np.linalg.norm(eta))
        mu = float(b @ dl(b))
    return RouletteDraw(
        epsilon=epsilon,
        n_terms=n,
        survival=survival,
        eta_bar=eta,
        y=y,
        b=b,
        mu=mu,
        eps_eta=eps_eta,
        clamp_count=clamps,
        degenerate=degenerate,
    )


def roulette_logdet_estimate(draw):
    """Unbiased log det(I + D) estimate from one pass.

    Sums ((-1)^{k+1} / (k p_k)) epsilon^T eta_k; unbiased for contractive
    D when no clamps fired (clamping trades a little bias for stability).
    """
    k = np.arange(1, draw.n_terms + 1)
    signs = (-1.0) ** (k + 1)
    return float(np.sum(signs / (k * draw.survival) * draw.eps_eta))


def penalty_h(x, delta=PENALTY_DELTA, delta2=None):
    """Hinge-like eigenvalue penalty: zero up to delta, quadratic on
    (delta, delta2], linear beyond.  Continuous with continuous slope at
    delta (slope 0) and a slope match at delta2."""
    if delta2 is None:
        delta2 = 1.0 + delta
    if not 0 < delta < delta2:
        raise ValueError("need 0 < delta < delta2")
    if x <= delta:
        return 0.0
    if x <= delta2:
        return (x - delta) ** 2
    w = delta2 - delta
    return w * w + w * w * (x - delta2)


def penalty_h_grad(x, delta=PENALTY_DELTA, delta2=None):
    """Derivative of penalty_h away from the kink points."""
    if delta2 is None:
        delta2 = 1.0 + delta
    if not 0 < delta < delta2:
        raise ValueError("need 0 < delta < delta2")
    if x <= delta:
        return 0.0
    if x <= delta2:
        return 2.0 * (x - delta)
    return (delta2 - delta) ** 2
