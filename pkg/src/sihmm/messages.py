"""Forward-backward over the augmented (z_t, s_t) chain.

The 2K x 2K augmented transition operator is never formed.  Its upper half
(s_{t-1} = 0) is the K x K matrix of tilted transitions; every row of its
lower half (s_{t-1} = 1) equals the reset distribution, so that half reduces
to one sum over the s = 1 messages followed by a scaled copy of pi_0.

Messages are kept in log space and normalised per step: ``exp(lnF[t])`` sums
to one over (z, s) and ``log_scale[t]`` carries the step's log normaliser, so
``lnZ = log_scale.sum()``.  The backward messages share the forward scales,
which makes ``exp(lnF[t] + lnB[t])`` the posterior marginal at ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# Tilted transition and reset log-probabilities are floored here so every
# state stays reachable in floating point; e^-500 is zero for all practical
# purposes but keeps the per-step normaliser strictly positive.
LOG_FLOOR = -500.0


@njit(cache=True)
def _forward_kernel(log_trans, log_init, log_lik, log_seg, log_noseg):
    T, K = log_lik.shape
    P = np.exp(np.maximum(log_trans, LOG_FLOOR))
    p0 = np.exp(np.maximum(log_init, LOG_FLOOR))
    lnF = np.empty((T, K, 2))
    log_scale = np.empty(T)
    pred = np.empty(K)
    e0 = np.empty(K)
    e1 = np.empty(K)
    ops = 0
    for t in range(T):
        if t == 0:
            shift = 0.0
            for j in range(K):
                pred[j] = p0[j]
        else:
            shift = -np.inf
            for i in range(K):
                shift = max(shift, lnF[t - 1, i, 0], lnF[t - 1, i, 1])
            # lower half: all rows equal pi_0, so only the s = 1 mass matters
            reset = 0.0
            for i in range(K):
                reset += np.exp(lnF[t - 1, i, 1] - shift)
            ops += K
            for j in range(K):
                pred[j] = reset * p0[j]
            ops += K
            # upper half: dense K x K product
            for i in range(K):
                u = np.exp(lnF[t - 1, i, 0] - shift)
                for j in range(K):
                    pred[j] += u * P[i, j]
            ops += K * K
        mx = -np.inf
        for j in range(K):
            lp = np.log(pred[j]) + log_lik[t, j]
            e0[j] = lp + log_noseg[t, j]
            e1[j] = lp + log_seg[t, j]
            mx = max(mx, e0[j], e1[j])
        total = 0.0
        for j in range(K):
            e0[j] = np.exp(e0[j] - mx)
            e1[j] = np.exp(e1[j] - mx)
            total += e0[j] + e1[j]
        ops += 2 * K
        log_total = np.log(total)
        for j in range(K):
            lnF[t, j, 0] = np.log(e0[j]) - log_total
            lnF[t, j, 1] = np.log(e1[j]) - log_total
        log_scale[t] = log_total + mx + shift
    return lnF, log_scale, ops


@njit(cache=True)
def _backward_kernel(log_trans, log_init, log_lik, log_seg, log_noseg, log_scale):
    T, K = log_lik.shape
    P = np.exp(np.maximum(log_trans, LOG_FLOOR))
    p0 = np.exp(np.maximum(log_init, LOG_FLOOR))
    lnB = np.zeros((T, K, 2))
    w = np.empty(K)
    ops = 0
    for t in range(T - 2, -1, -1):
        mx = -np.inf
        for j in range(K):
            a = log_lik[t + 1, j] + log_noseg[t + 1, j] + lnB[t + 1, j, 0]
            b = log_lik[t + 1, j] + log_seg[t + 1, j] + lnB[t + 1, j, 1]
            mx = max(mx, a, b)
        for j in range(K):
            w[j] = (np.exp(log_lik[t + 1, j] + log_noseg[t + 1, j] + lnB[t + 1, j, 0] - mx)
                    + np.exp(log_lik[t + 1, j] + log_seg[t + 1, j] + lnB[t + 1, j, 1] - mx))
        ops += 2 * K
        reset = 0.0
        for j in range(K):
            reset += p0[j] * w[j]
        ops += K
        offset = mx - log_scale[t + 1]
        log_reset = np.log(reset) + offset
        for i in range(K):
            acc = 0.0
            for j in range(K):
                acc += P[i, j] * w[j]
            lnB[t, i, 0] = np.log(acc) + offset
            lnB[t, i, 1] = log_reset
        ops += K * K
    return lnB, ops


def _args(tilted):
    return (
        np.ascontiguousarray(tilted.log_trans, dtype=np.float64),
        np.ascontiguousarray(tilted.log_init, dtype=np.float64),
        np.ascontiguousarray(tilted.log_lik, dtype=np.float64),
        np.ascontiguousarray(tilted.log_seg, dtype=np.float64),
        np.ascontiguousarray(tilted.log_noseg, dtype=np.float64),
    )


@dataclass
class Messages:
    lnF: np.ndarray  # (T, K, 2)
    lnB: np.ndarray  # (T, K, 2)
    log_scale: np.ndarray  # (T,)
    lnZ: float


def forward(tilted):
    """Return ``(lnF, log_scale, lnZ)``."""
    if tilted.T < 1:
        raise ValueError("sequence must contain at least one timestep")
    lnF, log_scale, _ = _forward_kernel(*_args(tilted))
    return lnF, log_scale, float(log_scale.sum())


def backward(tilted, log_scale):
    lnB, _ = _backward_kernel(*_args(tilted), np.ascontiguousarray(log_scale, dtype=np.float64))
    return lnB


def forward_backward(tilted):
    lnF, log_scale, lnZ = forward(tilted)
    lnB = backward(tilted, log_scale)
    return Messages(lnF, lnB, log_scale, lnZ)


@dataclass
class LocalStats:
    """Expected sufficient statistics and marginals of one sequence.

    ``trans[i, j]`` is E sum_t 1[z_{t-1}=i, s_{t-1}=0, z_t=j]; ``init[j]`` is
    E(1[z_1=j] + sum_t 1[z_t=j, s_{t-1}=1]); ``emission`` rows are the
    state-weighted observation statistics.
    """

    trans: np.ndarray
    init: np.ndarray
    emission: np.ndarray
    state_marginal: np.ndarray  # (T, K), q(z_t = i)
    seg_marginal: np.ndarray  # (T,), q(s_t = 1)
    seg_state: np.ndarray  # (T, K), q(z_t = i, s_t = 1)
    lnZ: float


def _finite_max(a):
    """Row maxima with all -inf rows mapped to 0, so subtracting them is safe."""
    m = a.max(axis=1, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def marginals_and_stats(tilted, msgs, Y=None, family=None):
    """Posterior marginals and expected sufficient statistics from messages.

    Emission statistics need the observations ``Y`` and the emission
    ``family``; without them ``emission`` is left empty.
    """
    lnF, lnB, log_scale = msgs.lnF, msgs.lnB, msgs.log_scale
    post = np.exp(lnF + lnB)
    state_marginal = post.sum(axis=2)
    state_marginal /= state_marginal.sum(axis=1, keepdims=True)
    seg_state = post[:, :, 1]
    seg_marginal = np.clip(seg_state.sum(axis=1), 0.0, 1.0)

    # lnW[t, j] = ln[L(t, j) sum_s p(s | j) B(t, j, s) / C_t] for t >= 1.  W alone can
    # overflow for nearly unreachable states, so rows of F and W are rescaled by
    # their maxima and the combined offset is applied once per step; with the
    # transition floor every pairwise term is <= 1, which bounds that offset.
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        into = np.logaddexp(tilted.log_noseg[1:] + lnB[1:, :, 0], tilted.log_seg[1:] + lnB[1:, :, 1])
        lnW = tilted.log_lik[1:] + into - log_scale[1:, None]
    P = np.exp(np.maximum(tilted.log_trans, LOG_FLOOR))
    p0 = np.exp(np.maximum(tilted.log_init, LOG_FLOOR))
    w_max = _finite_max(lnW)
    W = np.exp(lnW - w_max)
    f0 = lnF[:-1, :, 0]
    f0_max = _finite_max(f0)
    F0 = np.exp(f0 - f0_max) * np.exp(f0_max + w_max)
    trans = P * (F0.T @ W)
    log_leave = np.logaddexp.reduce(lnF[:-1, :, 1], axis=1)
    init = state_marginal[0] + p0 * (np.exp(log_leave[:, None] + w_max).T @ W)[0]

    if Y is not None and family is not None:
        emission = family.sufficient_stats(Y, state_marginal)
    else:
        emission = np.zeros((tilted.K, 0))
    return LocalStats(trans, init, emission, state_marginal, seg_marginal, seg_state, msgs.lnZ)


def infer(tilted, Y=None, family=None):
    """Forward, backward and statistics in one call."""
    return marginals_and_stats(tilted, forward_backward(tilted), Y, family)


def segment_boundaries(seg_marginal, threshold=0.5):
    """Indices t with q(s_t = 1) > threshold; a new segment starts at t + 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return [int(t) for t in np.flatnonzero(np.asarray(seg_marginal) > threshold)]


# --------------------------------------------------------------------------
# operation counting
# --------------------------------------------------------------------------

def _random_tilted(K, T, seed=0):
    from .model import TiltedModel

    rng = np.random.default_rng(seed)
    log_trans = np.log(rng.dirichlet(np.ones(K), size=K))
    log_init = np.log(rng.dirichlet(np.ones(K)))
    log_lik = rng.normal(size=(T, K))
    p = rng.uniform(0.05, 0.95, size=(T, K))
    return TiltedModel(log_trans, log_init, log_lik, np.log(p), np.log1p(-p))


def op_count_probe(K, T):
    """Multiply-adds in one forward plus backward pass of the structured kernels."""
    tilted = _random_tilted(K, T)
    args = _args(tilted)
    _, log_scale, fops = _forward_kernel(*args)
    _, bops = _backward_kernel(*args, log_scale)
    return int(fops + bops)


def dense_op_count(K, T):
    """Same count for a pass that multiplies by the materialised 2K x 2K operator."""
    tilted = _random_tilted(K, T)
    _, ops = dense_forward_backward(tilted)
    return ops


def dense_forward_backward(tilted):
    """Reference pass over the explicit augmented chain; returns (lnZ, multiply-adds).

    Kept for checking only.  Works in probability space with per-step scaling.
    """
    T, K = tilted.T, tilted.K
    P = np.exp(tilted.log_trans)
    p0 = np.exp(tilted.log_init)
    A = np.zeros((2 * K, 2 * K))
    ops = 0
    lnZ = 0.0
    alpha = None
    scales = []
    for t in range(T):
        emit = np.exp(tilted.log_lik[t] - tilted.log_lik[t].max())
        ps = np.exp(tilted.log_seg[t])
        pn = np.exp(tilted.log_noseg[t])
        col = np.concatenate([emit * pn, emit * ps])
        if t == 0:
            alpha = np.concatenate([p0, p0]) * col
        else:
            A[:K, :K] = P
            A[:K, K:] = P
            A[K:, :K] = p0
            A[K:, K:] = p0
            alpha = (alpha @ A) * col
            ops += 4 * K * K
        c = alpha.sum()
        alpha = alpha / c
        scales.append(c)
        lnZ += np.log(c) + tilted.log_lik[t].max()
    beta = np.ones(2 * K)
    for t in range(T - 2, -1, -1):
        emit = np.exp(tilted.log_lik[t + 1] - tilted.log_lik[t + 1].max())
        col = np.concatenate([emit * np.exp(tilted.log_noseg[t + 1]), emit * np.exp(tilted.log_seg[t + 1])])
        beta = (A @ (col * beta)) / scales[t + 1]
        ops += 4 * K * K
    return lnZ, ops
