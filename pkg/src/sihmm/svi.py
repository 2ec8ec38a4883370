"""Stochastic variational inference for the segmented iHMM."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .expfam import beta_logpdf, dirichlet_expected_log, dirichlet_kl, natural_gradient_blend
from .messages import infer
from .model import (
    OMEGA_CLAMP,
    DataSummary,
    build_tilted,
    init_global,
    log_sigmoid_pair,
    sequence_features,
    tilted_transitions,
)

BETA_FLOOR = 1e-8


@dataclass(frozen=True)
class SviConfig:
    batch_size: int = 2
    passes: int = 100
    tau: float = 1.0
    kappa_r: float = 0.6
    rho: float | None = None  # fixed step size; overrides the schedule
    lr_beta: float = 1.0
    lr_point: float = 1.0
    seed: int = 0
    tol: float | None = None
    init_spread: float = 1.0
    update_beta: bool = True
    update_segmentation: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.passes < 0:
            raise ValueError("batch_size must be >= 1 and passes >= 0")
        if self.rho is None and not 0.5 < self.kappa_r <= 1.0:
            raise ValueError(f"kappa_r must lie in (0.5, 1], got {self.kappa_r}")
        if self.rho is not None and not 0.0 < self.rho <= 1.0:
            raise ValueError(f"fixed rho must lie in (0, 1], got {self.rho}")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")

    def step_size(self, n):
        if self.rho is not None:
            return float(self.rho)
        return float((n + self.tau) ** (-self.kappa_r)) if n + self.tau > 0 else 1.0


@dataclass
class BatchStats:
    trans: np.ndarray
    init: np.ndarray
    emission: np.ndarray
    lnZ: float
    parts: list = field(default_factory=list)

    @property
    def n_steps(self):
        return sum(len(p.seg_marginal) for p in self.parts)


def _as_obs(Y):
    Y = np.asarray(Y, dtype=float)
    return Y[:, None] if Y.ndim == 1 else Y


# --------------------------------------------------------------------------
# local step
# --------------------------------------------------------------------------

def local_step(state, batch):
    """Run message passing on every sequence of ``batch`` and sum the statistics."""
    if len(batch) == 0:
        raise ValueError("minibatch is empty")
    family = state.spec.family
    transitions = tilted_transitions(state)
    K = state.K
    trans = np.zeros((K, K))
    init = np.zeros(K)
    emission = np.zeros((K, family.n_params))
    lnZ = 0.0
    parts = []
    for Y in batch:
        Y = _as_obs(Y)
        tilted = build_tilted(state, Y, transitions=transitions)
        st = infer(tilted, Y, family)
        trans += st.trans
        init += st.init
        emission += st.emission
        lnZ += st.lnZ
        parts.append(st)
    return BatchStats(trans, init, emission, lnZ, parts)


# --------------------------------------------------------------------------
# conjugate global step
# --------------------------------------------------------------------------

def global_step(state, stats, m, rho):
    """Blend the Dirichlet and emission factors toward their minibatch optima."""
    spec = state.spec
    K = state.K
    family = spec.family
    prior_rows, prior_init = spec.transition_prior(state.beta)
    trans_stats = np.hstack([stats.trans, np.zeros((K, 1))])
    init_stats = np.append(stats.init, 0.0)
    trans = natural_gradient_blend(prior_rows, state.trans_conc, trans_stats, m, rho)
    init = natural_gradient_blend(prior_init, state.init_conc, init_stats, m, rho)
    etas = natural_gradient_blend(spec.emission_prior, state.emission_eta, stats.emission, m, rho, family)
    return state.replace(trans_conc=trans, init_conc=init, emission_eta=etas)


# --------------------------------------------------------------------------
# beta
# --------------------------------------------------------------------------

def gem_logpdf(beta, gamma):
    """Log density of the K stick weights (rest mass last) under truncated GEM(gamma).

    Written with tail sums so it is smooth in all K+1 coordinates.
    """
    beta = np.asarray(beta, dtype=float)
    K = len(beta) - 1
    tails = np.cumsum(beta[::-1])[::-1]  # tails[k] = sum_{l >= k} beta_l
    return K * np.log(gamma) + (gamma - 1.0) * (np.log(tails[K]) - np.log(tails[0])) - np.log(tails[:K]).sum()


def gem_logpdf_grad(beta, gamma):
    beta = np.asarray(beta, dtype=float)
    K = len(beta) - 1
    tails = np.cumsum(beta[::-1])[::-1]
    grad = -(gamma - 1.0) / tails[0] * np.ones(K + 1)
    grad[K] += (gamma - 1.0) / tails[K]
    inv = np.cumsum(1.0 / tails[:K])
    grad[:K] -= inv
    grad[K] -= inv[-1]
    return grad


def _dirichlet_rows(state):
    """All Dirichlet factors (K transition rows then pi_0) with their sticky offsets."""
    K = state.K
    q = np.vstack([state.trans_conc, state.init_conc])
    offset = np.zeros((K + 1, K + 1))
    offset[np.arange(K), np.arange(K)] = state.spec.hyper.kappa
    return q, offset


def beta_objective(state, beta=None):
    """ln p(beta) + sum over rows of E_q ln p(pi_i | beta), including pi_0."""
    h = state.spec.hyper
    beta = state.beta if beta is None else np.asarray(beta, dtype=float)
    q, offset = _dirichlet_rows(state)
    elog = dirichlet_expected_log(q)
    c = h.alpha * beta[None, :] + offset
    rows = gammaln(c.sum(axis=1)) - gammaln(c).sum(axis=1) + ((c - 1.0) * elog).sum(axis=1)
    return float(gem_logpdf(beta, h.gamma) + rows.sum())


def beta_gradient(state, beta=None):
    h = state.spec.hyper
    beta = state.beta if beta is None else np.asarray(beta, dtype=float)
    q, offset = _dirichlet_rows(state)
    elog = dirichlet_expected_log(q)
    c = h.alpha * beta[None, :] + offset
    rows = h.alpha * (digamma(c.sum(axis=1))[:, None] - digamma(c) + elog)
    return gem_logpdf_grad(beta, h.gamma) + rows.sum(axis=0)


def project_simplex(v, floor=0.0):
    """Euclidean projection onto {x : x_j >= floor, sum x = 1}."""
    v = np.asarray(v, dtype=float)
    n = len(v)
    budget = 1.0 - n * floor
    if budget <= 0:
        raise ValueError("floor too large for the simplex dimension")
    u = np.sort(v - floor)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, n + 1)
    r = np.nonzero(u - css / idx > 0)[0][-1]
    shift = css[r] / (r + 1)
    return np.maximum(v - floor - shift, 0.0) + floor


def beta_step(state, step):
    """Projected ascent step on beta.

    The gradient is preconditioned by the inverse curvature of the Dirichlet
    terms, with the sum constraint enforced inside the preconditioned metric;
    the result is projected to the simplex with a 1e-8 floor.
    """
    if step == 0:
        return state
    h = state.spec.hyper
    q, offset = _dirichlet_rows(state)
    grad = beta_gradient(state)
    c = h.alpha * state.beta[None, :] + offset
    curv = h.alpha ** 2 * polygamma(1, c).sum(axis=0)
    scale = 1.0 / curv
    centre = (scale * grad).sum() / scale.sum()
    direction = scale * (grad - centre)
    beta = project_simplex(state.beta + step * direction, BETA_FLOOR)
    beta = beta / beta.sum()
    return state.replace(beta=beta)


# --------------------------------------------------------------------------
# segmentation parameters
# --------------------------------------------------------------------------

def segmentation_objective(state, batch, stats, m, theta=None, omega=None):
    """The part of the ELBO that depends on (theta, omega) with q(z, s) held fixed.

    m * sum_t sum_i [q(z=i, s=1) ln p_seg + q(z=i, s=0) ln(1 - p_seg)], plus the
    Beta log prior on omega in the feature-independent variant.
    """
    spec = state.spec
    theta = state.theta if theta is None else np.asarray(theta, dtype=float)
    omega = state.omega if omega is None else np.asarray(omega, dtype=float)
    total = 0.0
    for Y, st in zip(batch, stats.parts):
        on = st.seg_state
        off = st.state_marginal - on
        if spec.variant == "feature-based":
            feats = sequence_features(spec, _as_obs(Y))
            lp, lq = log_sigmoid_pair((feats @ theta)[:, None] + omega[None, :])
        elif spec.variant == "feature-independent":
            w = np.clip(omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP)
            lp, lq = np.log(w)[None, :], np.log1p(-w)[None, :]
        else:
            return 0.0
        total += float((on * lp).sum() + (off * lq).sum())
    total *= m
    if spec.variant == "feature-independent":
        h = spec.hyper
        total += float(beta_logpdf(np.clip(omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP), h.a0, h.b0).sum())
    return total


def segmentation_gradient(state, batch, stats, m):
    """Analytic (grad_theta, grad_omega) of :func:`segmentation_objective`."""
    spec = state.spec
    K = state.K
    g_theta = np.zeros(spec.n_features)
    g_omega = np.zeros(K)
    if spec.variant == "feature-based":
        for Y, st in zip(batch, stats.parts):
            feats = sequence_features(spec, _as_obs(Y))
            p = np.exp(log_sigmoid_pair((feats @ state.theta)[:, None] + state.omega[None, :])[0])
            resid = st.seg_state - st.state_marginal * p  # (T, K)
            g_theta += feats.T @ resid.sum(axis=1)
            g_omega += resid.sum(axis=0)
        return m * g_theta, m * g_omega
    if spec.variant == "feature-independent":
        h = spec.hyper
        w = np.clip(state.omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP)
        on = sum(st.seg_state.sum(axis=0) for st in stats.parts)
        tot = sum(st.state_marginal.sum(axis=0) for st in stats.parts)
        g_omega = m * (on / w - (tot - on) / (1 - w)) + (h.a0 - 1) / w - (h.b0 - 1) / (1 - w)
    return g_theta, g_omega


def theta_omega_step(state, batch, stats, m, step):
    """Fisher-preconditioned ascent on (theta, omega).

    Feature-independent: the preconditioned step on each omega_i is
    ``step * (omega_map_i - omega_i)``.  Feature-based: a damped Newton step
    using the expected logistic Fisher information.
    """
    spec = state.spec
    if step == 0 or spec.variant == "ihmm-baseline":
        return state
    h = spec.hyper
    if spec.variant == "feature-independent":
        w = np.clip(state.omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP)
        _, g = segmentation_gradient(state, batch, stats, m)
        tot = sum(st.state_marginal.sum(axis=0) for st in stats.parts)
        info = (m * tot + h.a0 + h.b0 - 2.0) / (w * (1 - w))
        delta = np.where(info > 1e-12, g / np.where(info > 1e-12, info, 1.0), 0.0)
        omega = np.clip(w + step * delta, OMEGA_CLAMP, 1 - OMEGA_CLAMP)
        return state.replace(omega=omega)

    K = state.K
    D = spec.n_features
    g_theta, g_omega = segmentation_gradient(state, batch, stats, m)
    fisher = np.zeros((D + K, D + K))
    for Y, st in zip(batch, stats.parts):
        feats = sequence_features(spec, _as_obs(Y))
        p = np.exp(log_sigmoid_pair((feats @ state.theta)[:, None] + state.omega[None, :])[0])
        wgt = st.state_marginal * p * (1 - p)  # (T, K)
        row = wgt.sum(axis=1)
        fisher[:D, :D] += feats.T @ (feats * row[:, None])
        fisher[:D, D:] += feats.T @ wgt
        fisher[D:, D:] += np.diag(wgt.sum(axis=0))
    fisher[D:, :D] = fisher[:D, D:].T
    fisher = m * fisher + np.eye(D + K)
    delta = np.linalg.solve(fisher, np.concatenate([g_theta, g_omega]))
    return state.replace(theta=state.theta + step * delta[:D], omega=state.omega + step * delta[D:])


# --------------------------------------------------------------------------
# ELBO
# --------------------------------------------------------------------------

def global_terms(state):
    """Prior-minus-posterior terms of the ELBO that involve only global factors."""
    spec = state.spec
    h = spec.hyper
    family = spec.family
    prior_rows, prior_init = spec.transition_prior(state.beta)
    value = -dirichlet_kl(state.trans_conc, prior_rows) - dirichlet_kl(state.init_conc, prior_init)
    value -= float(family.kl_many(state.emission_eta, spec.emission_prior).sum())
    value += gem_logpdf(state.beta, h.gamma)
    if spec.variant == "feature-independent":
        w = np.clip(state.omega, OMEGA_CLAMP, 1 - OMEGA_CLAMP)
        value += float(beta_logpdf(w, h.a0, h.b0).sum())
    return float(value)


def elbo_estimate(state, batch, m=1.0):
    """m * sum of tilted log normalisers over ``batch`` plus the global terms."""
    stats = local_step(state, batch)
    return m * stats.lnZ + global_terms(state)


# --------------------------------------------------------------------------
# fitting loop
# --------------------------------------------------------------------------

@dataclass
class TraceRecord:
    iteration: int
    rho: float
    elbo: float
    delta: float
    wall_time: float

    def as_dict(self, timing=False):
        out = {"iteration": self.iteration, "rho": self.rho, "elbo": self.elbo, "delta": self.delta}
        if timing:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class FitTrace:
    records: list
    state: object
    initial: object


def _flat(state):
    return np.concatenate([
        state.beta, state.trans_conc.ravel(), state.init_conc, state.emission_eta.ravel(), state.omega, state.theta,
    ])


def fit(sequences, hyper, config=SviConfig(), callback=None):
    """Fit the model to a list of (T_s, d) observation arrays."""
    sequences = [_as_obs(Y) for Y in sequences]
    S = len(sequences)
    if S == 0:
        raise ValueError("dataset is empty")
    if config.batch_size > S:
        raise ValueError(f"batch_size {config.batch_size} exceeds the number of sequences {S}")
    rng = np.random.default_rng(config.seed)
    init_seed = int(rng.integers(2**63))
    state = init_global(hyper, DataSummary.from_sequences(sequences), init_seed, spread=config.init_spread)
    initial = state
    records = []
    start = time.perf_counter()
    n = 0
    prev_pass = None
    for _ in range(config.passes):
        order = rng.permutation(S)
        pass_elbos = []
        for lo in range(0, S, config.batch_size):
            batch = [sequences[i] for i in order[lo:lo + config.batch_size]]
            m = S / len(batch)
            rho = config.step_size(n)
            stats = local_step(state, batch)
            elbo = m * stats.lnZ + global_terms(state)
            new = global_step(state, stats, m, rho)
            if config.update_beta:
                new = beta_step(new, config.lr_beta * rho)
            if config.update_segmentation:
                new = theta_omega_step(new, batch, stats, m, config.lr_point * rho)
            delta = float(np.linalg.norm(_flat(new) - _flat(state)))
            state = new
            records.append(TraceRecord(n, rho, float(elbo), delta, time.perf_counter() - start))
            pass_elbos.append(elbo)
            if callback is not None:
                callback(records[-1], state)
            n += 1
        avg = float(np.mean(pass_elbos))
        if config.tol is not None and prev_pass is not None and abs(avg - prev_pass) <= config.tol * abs(avg):
            break
        prev_pass = avg
    return FitTrace(records, state, initial)


def decode(state, sequences):
    """Per-sequence LocalStats under ``state`` (full posterior marginals)."""
    return local_step(state, [_as_obs(Y) for Y in sequences]).parts
