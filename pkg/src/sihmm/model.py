"""Hyperparameters, global variational state and the tilted quantities fed to message passing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .expfam import check_dirichlet, dirichlet_expected_log, emission_family

VARIANTS = ("feature-independent", "feature-based", "ihmm-baseline")
FEATURE_KINDS = ("raw", "bias+raw", "onehot")
OMEGA_CLAMP = 1e-6


@dataclass(frozen=True)
class EmissionPrior:
    """Conjugate Gaussian prior.

    For ``nig``: mu | s2 ~ N(mean, s2 / kappa0), s2 ~ InvGamma(shape, scale).
    For ``niw``: mu | S ~ N(mean, S / kappa0), S ~ InvWishart(scale * empirical_cov, shape).
    ``mean=None`` uses the empirical data mean.
    """

    family: str = "nig"
    mean: float | None = 0.0
    kappa0: float = 0.01
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in ("nig", "niw"):
            raise ValueError(f"emission family must be 'nig' or 'niw', got {self.family!r}")
        if self.kappa0 <= 0 or self.shape <= 0 or self.scale <= 0:
            raise ValueError("emission prior kappa0, shape and scale must be positive")


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 1.0
    alpha: float = 1.0
    K: int = 20
    a0: float = 1.0
    b0: float = 1.0
    kappa: float = 0.0
    emission: EmissionPrior = field(default_factory=EmissionPrior)
    variant: str = "feature-independent"
    features: str = "raw"

    def __post_init__(self):
        if self.gamma <= 0 or self.alpha <= 0:
            raise ValueError("gamma and alpha must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"truncation level K must be a positive integer, got {self.K}")
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("Beta hyperparameters a0, b0 must be positive")
        if self.kappa < 0:
            raise ValueError("sticky bias kappa must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.features.split(":")[0] not in FEATURE_KINDS:
            raise ValueError(f"feature kind must be one of {FEATURE_KINDS}, got {self.features!r}")


@dataclass(frozen=True)
class DataSummary:
    dim: int
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_sequences(cls, sequences):
        Y = np.concatenate([np.asarray(s, dtype=float).reshape(len(s), -1) for s in sequences])
        d = Y.shape[1]
        cov = np.atleast_2d(np.cov(Y, rowvar=False)) if len(Y) > 1 else np.eye(d)
        return cls(dim=d, mean=Y.mean(axis=0), cov=cov)


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

def n_features(kind, dim):
    base, _, arg = kind.partition(":")
    if base == "raw":
        return dim
    if base == "bias+raw":
        return dim + 1
    if base == "onehot":
        if not arg:
            raise ValueError("onehot features need a category count, e.g. 'onehot:5'")
        return int(arg)
    raise ValueError(f"unknown feature kind {kind!r}")


def make_features(kind, Y):
    """Observation features f(y_t), one row per timestep."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    base, _, arg = kind.partition(":")
    if base == "raw":
        return Y.copy()
    if base == "bias+raw":
        return np.hstack([np.ones((len(Y), 1)), Y])
    if base == "onehot":
        n = int(arg)
        cats = Y[:, 0].astype(int)
        if cats.min() < 0 or cats.max() >= n:
            raise ValueError(f"categorical observation outside [0, {n})")
        return np.eye(n)[cats]
    raise ValueError(f"unknown feature kind {kind!r}")


# --------------------------------------------------------------------------
# global state
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Everything fixed for the duration of a fit: hyperparameters and the emission prior."""

    hyper: Hyperparams
    dim: int
    emission_prior: np.ndarray

    @property
    def family(self):
        return emission_family(self.hyper.emission.family, self.dim)

    @property
    def K(self):
        return int(self.hyper.K)

    @property
    def variant(self):
        return self.hyper.variant

    @property
    def n_features(self):
        if self.variant != "feature-based":
            return 0
        return n_features(self.hyper.features, self.dim)

    @classmethod
    def from_summary(cls, hyper, summary):
        ep = hyper.emission
        d = summary.dim
        if ep.family == "nig" and d != 1:
            raise ValueError(f"normal-inverse-gamma emissions need 1-d data, got dimension {d}")
        family = emission_family(ep.family, d)
        mean = summary.mean if ep.mean is None else np.full(d, float(ep.mean))
        if ep.family == "nig":
            eta = family.from_standard(float(mean[0]), ep.kappa0, ep.shape, ep.scale)
        else:
            scatter = ep.scale * np.atleast_2d(summary.cov)
            eta = family.pack(mean, ep.kappa0, scatter, ep.shape)
        return cls(hyper=hyper, dim=d, emission_prior=eta)

    def transition_prior(self, beta):
        """Dirichlet prior rows alpha * beta (+ kappa on the diagonal), and the pi_0 prior."""
        K = self.K
        h = self.hyper
        rows = np.tile(h.alpha * beta, (K, 1))
        rows[np.arange(K), np.arange(K)] += h.kappa
        return rows, h.alpha * beta


@dataclass(frozen=True)
class GlobalState:
    """Variational global factors.

    ``beta`` (K+1,) and ``omega``/``theta`` are point estimates; ``trans_conc``
    (K, K+1) and ``init_conc`` (K+1,) are Dirichlet parameters whose last
    column is the truncation's rest mass; ``emission_eta`` (K, P) holds the
    per-state emission natural parameters.
    """

    spec: ModelSpec
    beta: np.ndarray
    trans_conc: np.ndarray
    init_conc: np.ndarray
    emission_eta: np.ndarray
    omega: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        K = self.spec.K
        if self.beta.shape != (K + 1,) or np.any(self.beta < 0) or abs(self.beta.sum() - 1.0) > 1e-8:
            raise ValueError("beta must be a length K+1 probability vector")
        if self.trans_conc.shape != (K, K + 1) or self.init_conc.shape != (K + 1,):
            raise ValueError("transition concentration shapes do not match K")
        check_dirichlet(self.trans_conc)
        check_dirichlet(self.init_conc)
        if self.emission_eta.shape != (K, self.spec.family.n_params):
            raise ValueError(f"expected {K} emission posteriors")
        if self.omega.shape != (K,):
            raise ValueError("omega must have length K")
        if self.theta.shape != (self.spec.n_features,):
            raise ValueError("theta length does not match the feature function")
        for arr in (self.beta, self.trans_conc, self.init_conc, self.emission_eta, self.omega, self.theta):
            arr.setflags(write=False)

    @property
    def K(self):
        return self.spec.K

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def stick_breaking_mean(gamma, K):
    """Expected GEM(gamma) weights for K sticks plus the rest mass."""
    frac = 1.0 / (1.0 + gamma)
    beta = frac * (1.0 - frac) ** np.arange(K)
    return np.append(beta, (1.0 - frac) ** K)


def init_global(hyper, summary, seed, spread=1.0):
    """Initial global state; the pseudo-means are jittered by ``spread`` times the data std."""
    spec = ModelSpec.from_summary(hyper, summary)
    rng = np.random.default_rng(seed)
    K = spec.K
    family = spec.family

    beta = stick_breaking_mean(hyper.gamma, K)
    beta = beta / beta.sum()
    trans, init = spec.transition_prior(beta)

    mean0, kappa0, scatter0, dof0 = family.unpack(spec.emission_prior)
    std = np.sqrt(np.diag(np.atleast_2d(summary.cov)))
    jitter = rng.standard_normal((K, spec.dim)) * spread * std
    etas = np.stack([family.pack(mean0 + jitter[k], kappa0, scatter0, dof0) for k in range(K)])

    if hyper.variant == "feature-independent":
        omega = np.full(K, np.clip(hyper.a0 / (hyper.a0 + hyper.b0), OMEGA_CLAMP, 1 - OMEGA_CLAMP))
    elif hyper.variant == "feature-based":
        omega = rng.standard_normal(K)
    else:
        omega = np.zeros(K)
    theta = rng.standard_normal(spec.n_features)
    return GlobalState(spec, beta, trans, init.copy(), etas, omega, theta)


# --------------------------------------------------------------------------
# segmentation head
# --------------------------------------------------------------------------

def log_sigmoid_pair(x):
    """(ln sigma(x), ln(1 - sigma(x))) for the standard logistic, computed stably."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x), -np.logaddexp(0.0, x)


def segmentation_logprob(variant, omega, theta, f_y, z):
    """(ln p(s=1 | z, y), ln p(s=0 | z, y)) for one timestep and state."""
    if variant == "feature-independent":
        w = float(np.clip(omega[z], OMEGA_CLAMP, 1 - OMEGA_CLAMP))
        return float(np.log(w)), float(np.log1p(-w))
    if variant == "feature-based":
        theta = np.asarray(theta, dtype=float)
        f_y = np.asarray(f_y, dtype=float)
        if f_y.shape != theta.shape:
            raise ValueError(f"feature vector length {f_y.shape} does not match theta {theta.shape}")
        lp, lq = log_sigmoid_pair(theta @ f_y + omega[z])
        return float(lp), float(lq)
    if variant == "ihmm-baseline":
        return -np.inf, 0.0
    raise ValueError(f"unknown variant {variant!r}")


def segmentation_logprob_matrix(state, features):
    """(T, K) arrays of ln p_seg and ln(1 - p_seg) for a whole sequence."""
    T = len(features)
    K = state.K
    variant = state.spec.variant
    if variant == "feature-independent":
        w = np.clip(state.omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP)
        return np.tile(np.log(w), (T, 1)), np.tile(np.log1p(-w), (T, 1))
    if variant == "feature-based":
        x = (features @ state.theta)[:, None] + state.omega[None, :]
        return log_sigmoid_pair(x)
    return np.full((T, K), -np.inf), np.zeros((T, K))


def sequence_features(spec, Y):
    if spec.variant != "feature-based":
        return np.zeros((len(Y), 0))
    return make_features(spec.hyper.features, Y)


# --------------------------------------------------------------------------
# tilted model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TiltedModel:
    log_trans: np.ndarray  # (K, K), E ln pi_ij with the rest column dropped
    log_init: np.ndarray  # (K,)
    log_lik: np.ndarray  # (T, K)
    log_seg: np.ndarray  # (T, K), ln p(s_t = 1 | z_t, y_t)
    log_noseg: np.ndarray  # (T, K), ln p(s_t = 0 | z_t, y_t)

    @property
    def T(self):
        return self.log_lik.shape[0]

    @property
    def K(self):
        return self.log_lik.shape[1]


def tilted_transitions(state):
    K = state.K
    return dirichlet_expected_log(state.trans_conc)[:, :K], dirichlet_expected_log(state.init_conc)[:K]


def build_tilted(state, Y, features=None, transitions=None):
    """Tilted chain for one observation sequence ``Y`` of shape (T, d)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] != state.spec.dim:
        raise ValueError(f"sequence dimension {Y.shape[1]} does not match model dimension {state.spec.dim}")
    if features is None:
        features = sequence_features(state.spec, Y)
    log_trans, log_init = transitions if transitions is not None else tilted_transitions(state)
    log_lik = state.spec.family.expected_loglik_matrix(state.emission_eta, Y)
    log_seg, log_noseg = segmentation_logprob_matrix(state, features)
    return TiltedModel(log_trans, log_init, log_lik, log_seg, log_noseg)


def mean_transition(state):
    """Plug-in (transition matrix, initial/reset distribution, per-state p_seg)."""
    K = state.K
    trans = state.trans_conc[:, :K]
    trans = trans / trans.sum(axis=1, keepdims=True)
    init = state.init_conc[:K] / state.init_conc[:K].sum()
    variant = state.spec.variant
    if variant == "feature-independent":
        pseg = np.clip(state.omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP).copy()
    elif variant == "feature-based":
        pseg = np.exp(log_sigmoid_pair(state.omega)[0])
    else:
        pseg = np.zeros(K)
    return trans, init, pseg
