"""Conjugate exponential-family pieces: Dirichlet rows and Gaussian emissions.

Gaussian emissions carry a normal-inverse-Wishart (NIW) posterior over
``(mu, Sigma)``; the univariate normal-inverse-gamma (NIG) case is the
``d = 1`` specialisation with the same natural-parameter layout.

The natural parameter vector of a ``d``-dimensional family is laid out as::

    eta = [kappa * m,  vec(Psi + kappa * m m^T),  kappa,  nu + d + 2]

which pairs with the observation statistics ``t_y(y) = [y, vec(y y^T), 1, 1]``
and the parameter statistics
``t_phi = [Sigma^-1 mu, vec(-Sigma^-1 / 2), -mu^T Sigma^-1 mu / 2, -ln|Sigma| / 2]``.
A conjugate posterior update is therefore plain vector addition.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln, multigammaln

LOG_2PI = np.log(2.0 * np.pi)


# --------------------------------------------------------------------------
# Dirichlet / Beta
# --------------------------------------------------------------------------

def check_dirichlet(conc):
    conc = np.asarray(conc, dtype=float)
    if conc.ndim == 0 or conc.shape[-1] < 1:
        raise ValueError("Dirichlet concentration must be a non-empty vector")
    if not np.all(np.isfinite(conc)) or np.any(conc <= 0):
        raise ValueError(f"Dirichlet concentration must be finite and > 0, got min {conc.min()!r}")
    return conc


def dirichlet_expected_log(conc):
    """E[ln pi_j] = psi(c_j) - psi(sum_k c_k), along the last axis."""
    conc = check_dirichlet(conc)
    return digamma(conc) - digamma(conc.sum(axis=-1, keepdims=True))


def dirichlet_log_normalizer(conc):
    conc = np.asarray(conc, dtype=float)
    return gammaln(conc).sum(axis=-1) - gammaln(conc.sum(axis=-1))


def dirichlet_kl(q_conc, p_conc):
    """KL(Dir(q) || Dir(p)), summed over leading axes."""
    q_conc = np.asarray(q_conc, dtype=float)
    p_conc = np.asarray(p_conc, dtype=float)
    elog = dirichlet_expected_log(q_conc)
    kl = (
        dirichlet_log_normalizer(p_conc)
        - dirichlet_log_normalizer(q_conc)
        + ((q_conc - p_conc) * elog).sum(axis=-1)
    )
    return float(np.sum(kl))


def beta_logpdf(x, a, b):
    x = np.asarray(x, dtype=float)
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - (gammaln(a) + gammaln(b) - gammaln(a + b))


def natural_gradient_blend(prior, current, stats, m, rho, family=None):
    """One SVI step on natural parameters: (1 - rho) * current + rho * (prior + m * stats).

    ``prior`` may be a single row that broadcasts over stacked ``current``.

    If ``family`` is given the result is checked against its natural domain
    and a ``ValueError`` is raised when it falls outside.
    """
    if m <= 0:
        raise ValueError(f"scale m must be positive, got {m}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"step size rho must lie in [0, 1], got {rho}")
    prior = np.asarray(prior, dtype=float)
    current = np.asarray(current, dtype=float)
    stats = np.asarray(stats, dtype=float)
    if current.shape != stats.shape or np.broadcast_shapes(prior.shape, current.shape) != current.shape:
        raise ValueError(f"shape mismatch: prior {prior.shape}, current {current.shape}, stats {stats.shape}")
    out = (1.0 - rho) * current + rho * (prior + m * stats)
    if family is not None:
        try:
            family.validate(out)
        except ValueError as err:
            raise ValueError(f"natural-gradient step left the {family.tag} domain (rho={rho}, m={m}): {err}") from err
    return out


# --------------------------------------------------------------------------
# Gaussian emissions
# --------------------------------------------------------------------------

class NormalInverseWishart:
    """Multivariate Gaussian likelihood with a conjugate NIW posterior."""

    tag = "niw"

    def __init__(self, dim):
        if int(dim) < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(dim)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def __eq__(self, other):
        return type(self) is type(other) and self.dim == other.dim

    def __hash__(self):
        return hash((self.tag, self.dim))

    @property
    def n_params(self):
        d = self.dim
        return d + d * d + 2

    # -- parameter conversion ------------------------------------------------

    def pack(self, mean, kappa, scatter, dof):
        d = self.dim
        mean = np.asarray(mean, dtype=float).reshape(d)
        scatter = np.asarray(scatter, dtype=float).reshape(d, d)
        eta = np.empty(self.n_params)
        eta[:d] = kappa * mean
        eta[d:d + d * d] = (scatter + kappa * np.outer(mean, mean)).ravel()
        eta[-2] = kappa
        eta[-1] = dof + d + 2
        self.validate(eta)
        return eta

    def unpack(self, eta):
        """Return ``(mean, kappa, scatter, dof)`` for one natural vector."""
        d = self.dim
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.n_params,):
            raise ValueError(f"expected natural vector of length {self.n_params}, got shape {eta.shape}")
        kappa = eta[-2]
        mean = eta[:d] / kappa
        scatter = eta[d:d + d * d].reshape(d, d) - kappa * np.outer(mean, mean)
        dof = eta[-1] - d - 2
        return mean, kappa, scatter, dof

    def validate(self, eta):
        """Raise ``ValueError`` unless every row of ``eta`` is a valid natural vector."""
        eta = np.asarray(eta, dtype=float)
        if eta.shape[-1:] != (self.n_params,) or eta.ndim > 2:
            raise ValueError(f"expected natural vector(s) of length {self.n_params}, got shape {eta.shape}")
        if not np.all(np.isfinite(eta)):
            raise ValueError("natural parameters must be finite")
        d = self.dim
        _, kappa, scatter, dof = self.unpack_many(eta)
        if np.any(kappa <= 0):
            raise ValueError(f"pseudo-count kappa must be > 0, got {kappa.min()}")
        if np.any(dof <= d - 1):
            raise ValueError(f"degrees of freedom must exceed {d - 1}, got {dof.min()}")
        try:
            np.linalg.cholesky(0.5 * (scatter + np.swapaxes(scatter, 1, 2)))
        except np.linalg.LinAlgError:
            raise ValueError("scatter matrix is not positive definite") from None

    # -- statistics ------------------------------------------------------------

    def _obs(self, Y):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1) if self.dim == 1 else Y.reshape(1, -1)
        if Y.ndim != 2 or Y.shape[1] != self.dim:
            raise ValueError(f"observations must have dimension {self.dim}, got shape {Y.shape}")
        return Y

    def sufficient_stats(self, Y, weights=None):
        """Sum of t_y(y_t), optionally weighted.

        ``weights`` of shape ``(T,)`` gives one stat vector; shape ``(T, K)``
        gives a ``(K, n_params)`` array, one row per state.
        """
        Y = self._obs(Y)
        T, d = Y.shape
        outer = (Y[:, :, None] * Y[:, None, :]).reshape(T, d * d)
        ty = np.concatenate([Y, outer, np.ones((T, 2))], axis=1)
        if weights is None:
            return ty.sum(axis=0)
        weights = np.asarray(weights, dtype=float)
        if weights.shape[0] != T:
            raise ValueError("weights must have one row per observation")
        return weights.T @ ty

    def unpack_many(self, etas):
        """Batched ``unpack`` over the rows of a ``(K, n_params)`` array."""
        d = self.dim
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        if etas.shape[1] != self.n_params:
            raise ValueError(f"expected natural vectors of length {self.n_params}, got shape {etas.shape}")
        kappa = etas[:, -2]
        mean = etas[:, :d] / kappa[:, None]
        scatter = etas[:, d:d + d * d].reshape(-1, d, d) - kappa[:, None, None] * mean[:, :, None] * mean[:, None, :]
        dof = etas[:, -1] - d - 2
        return mean, kappa, scatter, dof

    def _log_det_terms(self, scatter, dof):
        d = self.dim
        _, logdet = np.linalg.slogdet(scatter)
        e_logdet = logdet - d * np.log(2.0) - digamma(0.5 * (dof[:, None] - np.arange(d))).sum(axis=1)
        return logdet, e_logdet

    def expected_log_det(self, eta):
        """E_q ln|Sigma|."""
        _, _, scatter, dof = self.unpack_many(eta)
        return float(self._log_det_terms(scatter, dof)[1][0])

    def expected_loglik(self, eta, Y):
        """E_q[ln N(y_t | mu, Sigma)] for each row of ``Y``."""
        return self.expected_loglik_matrix(np.atleast_2d(eta), Y)[:, 0]

    def expected_loglik_matrix(self, etas, Y):
        """(T, K) matrix of expected log-likelihoods for stacked naturals ``etas``."""
        Y = self._obs(Y)
        d = self.dim
        mean, kappa, scatter, dof = self.unpack_many(etas)
        _, e_logdet = self._log_det_terms(scatter, dof)
        resid = Y[None, :, :] - mean[:, None, :]  # (K, T, d)
        if d == 1:
            maha = resid[:, :, 0] ** 2 / scatter[:, 0, :]
        else:
            chol = np.linalg.cholesky(scatter)
            white = np.linalg.solve(chol, np.swapaxes(resid, 1, 2))  # (K, d, T)
            maha = np.sum(white * white, axis=1)
        out = -0.5 * (d * LOG_2PI + e_logdet[:, None] + dof[:, None] * maha + d / kappa[:, None])
        return out.T

    def expected_param_stats(self, eta):
        """E_q[t_phi], the gradient of the log partition."""
        return self.expected_param_stats_many(np.atleast_2d(eta))[0]

    def expected_param_stats_many(self, etas):
        d = self.dim
        mean, kappa, scatter, dof = self.unpack_many(etas)
        prec = dof[:, None, None] * np.linalg.inv(scatter)
        pm = np.einsum("kij,kj->ki", prec, mean)
        out = np.empty((len(kappa), self.n_params))
        out[:, :d] = pm
        out[:, d:d + d * d] = (-0.5 * prec).reshape(-1, d * d)
        out[:, -2] = -0.5 * (np.sum(mean * pm, axis=1) + d / kappa)
        out[:, -1] = -0.5 * self._log_det_terms(scatter, dof)[1]
        return out

    def log_partition(self, eta):
        return float(self.log_partition_many(np.atleast_2d(eta))[0])

    def log_partition_many(self, etas):
        d = self.dim
        _, kappa, scatter, dof = self.unpack_many(etas)
        logdet, _ = self._log_det_terms(scatter, dof)
        return (
            0.5 * d * LOG_2PI
            - 0.5 * d * np.log(kappa)
            - 0.5 * dof * logdet
            + 0.5 * dof * d * np.log(2.0)
            + multigammaln(0.5 * dof, d)
        )

    def kl(self, eta_q, eta_p):
        return float(self.kl_many(np.atleast_2d(eta_q), np.atleast_2d(eta_p)).sum())

    def kl_many(self, etas_q, etas_p):
        """Row-wise KL(q_k || p_k); a single prior row broadcasts against all of ``etas_q``."""
        etas_q = np.atleast_2d(np.asarray(etas_q, dtype=float))
        etas_p = np.atleast_2d(np.asarray(etas_p, dtype=float))
        lp = self.log_partition_many(etas_p)
        return (
            np.sum((etas_q - etas_p) * self.expected_param_stats_many(etas_q), axis=1)
            - self.log_partition_many(etas_q)
            + lp
        )

    def posterior_mean(self, eta):
        """Plug-in ``(mean, covariance)``.

        The covariance is E[Sigma] when it exists (nu > d + 1) and the
        posterior mode of Sigma otherwise.
        """
        d = self.dim
        mean, _, scatter, dof = self.unpack(eta)
        denom = dof - d - 1 if dof > d + 1 else dof + d + 1
        return mean, scatter / denom

    def prior_from_data(self, mean, kappa, scatter, dof):
        return self.pack(mean, kappa, scatter, dof)


class NormalInverseGamma(NormalInverseWishart):
    """Univariate Gaussian likelihood with a NIG(m, kappa, a, b) posterior.

    Shares the NIW layout with ``nu = 2a`` and ``Psi = 2b``.
    """

    tag = "nig"

    def __init__(self, dim=1):
        if int(dim) != 1:
            raise ValueError("normal-inverse-gamma is univariate")
        super().__init__(1)

    def from_standard(self, m, kappa, a, b):
        return self.pack([m], kappa, [[2.0 * b]], 2.0 * a)

    def to_standard(self, eta):
        mean, kappa, scatter, dof = self.unpack(eta)
        return float(mean[0]), float(kappa), 0.5 * float(dof), 0.5 * float(scatter[0, 0])

    def posterior_mean(self, eta):
        mean, cov = super().posterior_mean(eta)
        return float(mean[0]), float(cov[0, 0])


def emission_family(tag, dim):
    if tag == "nig":
        return NormalInverseGamma(dim)
    if tag == "niw":
        return NormalInverseWishart(dim)
    raise ValueError(f"unknown emission family {tag!r} (expected 'nig' or 'niw')")
