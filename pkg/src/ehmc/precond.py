"""Parameterizations of the mass-matrix factor C with C C^T = M^{-1}.

Three kinds are supported:

* ``diagonal``  -- C = diag(exp(theta)), d parameters.
* ``dense``     -- C is a lower-triangular Cholesky factor with
  exp-transformed diagonal, d(d+1)/2 parameters (log-diagonal first,
  then the strict lower triangle packed row by row).
* ``banded``    -- C = B^{-1} for an upper-triangular tridiagonal B,
  2d-1 parameters (log of B's diagonal, then its superdiagonal).
  All maps run in O(d).

Diagonal entries of C (or of B) are stored as unconstrained reals and
mapped through exp, which keeps C C^T positive definite for every theta.
Parameter vectors are treated as immutable snapshots by the sampler; the
gradient helpers accumulate into caller-owned arrays.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded, solve_triangular

KINDS = ("diagonal", "dense", "banded")


def n_params(kind, dim):
    """Length of the parameter vector for a factor kind."""
    if kind == "diagonal":
        return dim
    if kind == "dense":
        return dim * (dim + 1) // 2
    if kind == "banded":
        return 2 * dim - 1
    raise ValueError(f"unknown preconditioner kind {kind!r}")


@dataclass
class Preconditioner:
    """Learnable factor C exposing matvec, adjoint, solve and logdet maps."""

    kind: str
    dim: int
    theta: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (n_params(self.kind, self.dim),):
            raise ValueError(
                f"theta has length {self.theta.size}, expected "
                f"{n_params(self.kind, self.dim)} for kind {self.kind!r}"
            )

    # -- internal views -------------------------------------------------

    def _dense_factor(self):
        """Materialize C as a dense lower-triangular matrix (dense kind)."""
        d = self.dim
        C = np.zeros((d, d))
        C[np.diag_indices(d)] = np.exp(self.theta[:d])
        rows, cols = np.tril_indices(d, k=-1)
        C[rows, cols] = self.theta[d:]
        return C

    def _band_diag(self):
        return np.exp(self.theta[: self.dim])

    def _band_super(self):
        return self.theta[self.dim :]

    def _band_ab_upper(self):
        # ab layout for solve_banded((0, 1), ...): row 0 superdiag, row 1 diag
        d = self.dim
        ab = np.zeros((2, d))
        ab[0, 1:] = self._band_super()
        ab[1] = self._band_diag()
        return ab

    def _band_ab_lower(self):
        # B^T is lower bidiagonal: row 0 diag, row 1 subdiag
        d = self.dim
        ab = np.zeros((2, d))
        ab[0] = self._band_diag()
        ab[1, : d - 1] = self._band_super()
        return ab

    def _check_vec(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"vector has shape {w.shape}, expected ({self.dim},)")
        return w

    # -- linear maps ----------------------------------------------------

    def matvec(self, w):
        """C w.  For the banded kind this solves B x = w by back-substitution."""
        w = self._check_vec(w)
        if self.kind == "diagonal":
            return np.exp(self.theta) * w
        if self.kind == "dense":
            return self._dense_factor() @ w
        return solve_banded((0, 1), self._band_ab_upper(), w)

    def rmatvec(self, w):
        """C^T w."""
        w = self._check_vec(w)
        if self.kind == "diagonal":
            return np.exp(self.theta) * w
        if self.kind == "dense":
            return self._dense_factor().T @ w
        return solve_banded((1, 0), self._band_ab_lower(), w)

    def solve(self, w):
        """C^{-1} w."""
        w = self._check_vec(w)
        if self.kind == "diagonal":
            return np.exp(-self.theta) * w
        if self.kind == "dense":
            return solve_triangular(self._dense_factor(), w, lower=True)
        # C^{-1} = B: multiply by the bidiagonal matrix directly
        diag, sup = self._band_diag(), self._band_super()
        out = diag * w
        out[:-1] += sup * w[1:]
        return out

    def solve_t(self, w):
        """C^{-T} w."""
        w = self._check_vec(w)
        if self.kind == "diagonal":
            return np.exp(-self.theta) * w
        if self.kind == "dense":
            return solve_triangular(self._dense_factor(), w, lower=True, trans="T")
        diag, sup = self._band_diag(), self._band_super()
        out = diag * w
        out[1:] += sup * w[:-1]
        return out

    def logdet(self):
        """log |det C|; finite for every parameter vector."""
        s = float(np.sum(self.theta[: self.dim]))
        return -s if self.kind == "banded" else s

    def dense(self):
        """Materialize C as a dense matrix (small d only)."""
        eye = np.eye(self.dim)
        return np.column_stack([self.matvec(eye[:, j]) for j in range(self.dim)])

    # -- parameter gradients --------------------------------------------

    def accumulate_bilinear_grad(self, u, w, out, scale=1.0):
        """Add scale * d(u^T C w)/d(theta) into ``out``.

        Respects the exp reparameterization of diagonal entries; for the
        banded kind uses d(u^T B^{-1} w)/dB = -(B^{-T} u)(B^{-1} w)^T
        restricted to the band.
        """
        u = self._check_vec(u)
        w = self._check_vec(w)
        d = self.dim
        if self.kind == "diagonal":
            out += scale * (u * w * np.exp(self.theta))
            return
        if self.kind == "dense":
            out[:d] += scale * (u * w * np.exp(self.theta[:d]))
            rows, cols = np.tril_indices(d, k=-1)
            out[d:] += scale * (u[rows] * w[cols])
            return
        a = self.rmatvec(u)  # B^{-T} u
        b = self.matvec(w)  # B^{-1} w
        out[:d] += scale * (-a * b * np.exp(self.theta[:d]))
        out[d:] += scale * (-a[: d - 1] * b[1:])

    def accumulate_logdet_grad(self, out, scale=1.0):
        """Add scale * d(log|det C|)/d(theta) into ``out``."""
        d = self.dim
        if self.kind == "banded":
            out[:d] -= scale
        else:
            out[:d] += scale


def make_preconditioner(kind, dim, init_scale=1.0):
    """Create factor parameters with C = init_scale * I."""
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError("dim must be a positive integer")
    if init_scale <= 0:
        raise ValueError("init_scale must be positive")
    theta = np.zeros(n_params(kind, dim))
    log_s = np.log(init_scale)
    # banded stores B's diagonal; C = B^{-1} = init_scale * I needs B = I / init_scale
    theta[:dim] = -log_s if kind == "banded" else log_s
    return Preconditioner(kind, int(dim), theta)


def from_dense_factor(C):
    """Wrap an explicit lower-triangular factor as dense-kind parameters.

    Used by fixed-metric baseline kernels where C is given, not learned.
    """
    C = np.asarray(C, dtype=float)
    d = C.shape[0]
    if C.shape != (d, d):
        raise ValueError("C must be square")
    if np.any(np.triu(C, k=1) != 0):
        raise ValueError("factor must be lower triangular")
    diag = np.diag(C)
    if np.any(diag <= 0):
        raise ValueError("factor diagonal must be strictly positive")
    theta = np.empty(n_params("dense", d))
    theta[:d] = np.log(diag)
    rows, cols = np.tril_indices(d, k=-1)
    theta[d:] = C[rows, cols]
    return Preconditioner("dense", d, theta)
