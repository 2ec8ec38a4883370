"""Scoring: matched Hamming distance, predictive log-likelihood, boundaries and segment labels."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .messages import forward, segment_boundaries
from .model import TiltedModel, log_sigmoid_pair, mean_transition, sequence_features


@dataclass(frozen=True)
class Assignment:
    mapping: dict  # inferred label index -> true label index
    overlap: float


def munkres_assign(overlap):
    """Injective row -> column matching that maximises the total overlap."""
    overlap = np.asarray(overlap, dtype=float)
    if overlap.ndim != 2 or not np.all(np.isfinite(overlap)):
        raise ValueError("overlap must be a finite 2-d matrix")
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return Assignment({int(r): int(c) for r, c in zip(rows, cols)}, float(overlap[rows, cols].sum()))


def contingency(inferred, true):
    inferred = np.asarray(inferred)
    true = np.asarray(true)
    inf_labels, inf_idx = np.unique(inferred, return_inverse=True)
    true_labels, true_idx = np.unique(true, return_inverse=True)
    table = np.zeros((len(inf_labels), len(true_labels)))
    np.add.at(table, (inf_idx, true_idx), 1.0)
    return table, inf_labels, true_labels


def normalized_hamming(true, inferred):
    """1 - (best matched overlap) / T over injective relabellings of ``inferred``."""
    true = np.asarray(true).ravel()
    inferred = np.asarray(inferred).ravel()
    if true.shape != inferred.shape:
        raise ValueError(f"length mismatch: {true.shape[0]} true vs {inferred.shape[0]} inferred labels")
    if true.size == 0:
        return 0.0
    table, _, _ = contingency(inferred, true)
    return 1.0 - munkres_assign(table).overlap / true.size


def relabel(inferred, true):
    """Map inferred labels onto true labels with the Munkres matching; unmatched get -1."""
    table, inf_labels, true_labels = contingency(inferred, true)
    assign = munkres_assign(table)
    lookup = {inf_labels[r]: true_labels[c] for r, c in assign.mapping.items()}
    return np.array([lookup.get(v, -1) for v in np.asarray(inferred)])


# --------------------------------------------------------------------------
# predictive log-likelihood
# --------------------------------------------------------------------------

def plugin_tilted(state, Y):
    """A TiltedModel built from posterior-mean parameters instead of expected logs."""
    from scipy.stats import multivariate_normal

    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    spec = state.spec
    if Y.shape[1] != spec.dim:
        raise ValueError(f"sequence dimension {Y.shape[1]} does not match model dimension {spec.dim}")
    family = spec.family
    trans, init, pseg = mean_transition(state)
    log_lik = np.empty((len(Y), state.K))
    for k, eta in enumerate(state.emission_eta):
        mean, cov = family.posterior_mean(eta)
        log_lik[:, k] = multivariate_normal(np.atleast_1d(mean), np.atleast_2d(cov)).logpdf(Y).reshape(-1)
    if spec.variant == "feature-based":
        feats = sequence_features(spec, Y)
        log_seg, log_noseg = log_sigmoid_pair((feats @ state.theta)[:, None] + state.omega[None, :])
    elif spec.variant == "feature-independent":
        log_seg = np.tile(np.log(pseg), (len(Y), 1))
        log_noseg = np.tile(np.log1p(-pseg), (len(Y), 1))
    else:
        log_seg = np.full_like(log_lik, -np.inf)
        log_noseg = np.zeros_like(log_lik)
    with np.errstate(divide="ignore"):
        return TiltedModel(np.log(trans), np.log(init), log_lik, log_seg, log_noseg)


def predictive_loglik(state, heldout):
    """Sum over held-out sequences of the plug-in log marginal likelihood."""
    return float(sum(forward(plugin_tilted(state, Y))[2] for Y in heldout))


# --------------------------------------------------------------------------
# boundaries
# --------------------------------------------------------------------------

def boundary_starts(seg_marginal, threshold=0.5):
    """Segment start positions implied by thresholded q(s_t = 1) (the step after each boundary)."""
    T = len(seg_marginal)
    return [b + 1 for b in segment_boundaries(seg_marginal, threshold) if b + 1 < T]


def boundary_f1(true_positions, inferred_positions, window=0):
    """Greedy one-to-one matching of boundary positions within +-window steps.

    Returns (precision, recall, F1); an empty side gives 0 for its ratio.
    """
    if window < 0:
        raise ValueError("window must be nonnegative")
    true_positions = sorted(int(t) for t in true_positions)
    inferred_positions = sorted(int(t) for t in inferred_positions)
    used = set()
    hits = 0
    for p in inferred_positions:
        best = None
        for i, t in enumerate(true_positions):
            if i in used or abs(t - p) > window:
                continue
            if best is None or abs(t - p) < abs(true_positions[best] - p):
                best = i
        if best is not None:
            used.add(best)
            hits += 1
    precision = hits / len(inferred_positions) if inferred_positions else 0.0
    recall = hits / len(true_positions) if true_positions else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


# --------------------------------------------------------------------------
# segment labelling
# --------------------------------------------------------------------------

@dataclass
class SegmentDescriptor:
    seq: int
    start: int
    end: int  # exclusive
    transitions: np.ndarray  # row-normalised K x K
    cluster: int = -1


def segment_descriptors(state_paths, seg_marginals, K, threshold=0.5, smoothing=1e-3):
    out = []
    for s, (path, seg) in enumerate(zip(state_paths, seg_marginals)):
        cuts = [0] + boundary_starts(seg, threshold) + [len(path)]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi - lo < 2:
                mat = np.full((K, K), 1.0 / K)
            else:
                counts = np.zeros((K, K))
                np.add.at(counts, (path[lo:hi - 1], path[lo + 1:hi]), 1.0)
                counts += smoothing
                mat = counts / counts.sum(axis=1, keepdims=True)
            out.append(SegmentDescriptor(s, lo, hi, mat))
    return out


def cluster_segments(descriptors, n_labels, seed=0, n_init=50):
    X = np.stack([d.transitions.ravel() for d in descriptors])
    if len(descriptors) <= n_labels:
        warnings.warn(f"only {len(descriptors)} segments for {n_labels} labels; each segment gets its own cluster")
        ids = np.arange(len(descriptors))
    else:
        km = KMeans(n_clusters=n_labels, init="k-means++", n_init=n_init, random_state=seed)
        ids = km.fit_predict(X)
    for d, c in zip(descriptors, ids):
        d.cluster = int(c)
    return descriptors


def label_paths(state_paths, seg_marginals, K, n_labels, true_labels=None, threshold=0.5, seed=0):
    """Cluster inferred segments by their empirical transition matrices.

    Returns per-sequence predicted labels and, when ``true_labels`` is given,
    the Munkres-matched error rate over all timesteps (else None).
    """
    if n_labels < 1:
        raise ValueError("n_labels must be >= 1")
    descs = cluster_segments(segment_descriptors(state_paths, seg_marginals, K, threshold), n_labels, seed)
    labels = [np.empty(len(p), dtype=int) for p in state_paths]
    for d in descs:
        labels[d.seq][d.start:d.end] = d.cluster
    error = None
    if true_labels is not None:
        error = normalized_hamming(np.concatenate(true_labels), np.concatenate(labels))
    return labels, error


def decode_paths(state, sequences):
    """Argmax state paths and boundary marginals for each sequence."""
    from .svi import decode

    parts = decode(state, sequences)
    return [p.state_marginal.argmax(axis=1) for p in parts], [p.seg_marginal for p in parts]


def label_segments(state, sequences, n_labels, true_labels=None, threshold=0.5, seed=0):
    """Decode ``sequences`` under ``state`` and label their segments by K-means."""
    paths, segs = decode_paths(state, sequences)
    return label_paths(paths, segs, state.K, n_labels, true_labels, threshold, seed)


# --------------------------------------------------------------------------
# transition block structure
# --------------------------------------------------------------------------

def block_structure(trans, inferred, true_states, true_regime):
    """Mean within-regime and cross-regime mass of the rows of ``trans``.

    Inferred states are Munkres-matched to true states by timestep overlap;
    only matched states enter, and each is given the regime of its match.
    Returns ``(within, cross)`` averaged over matched rows.
    """
    inferred = np.asarray(inferred).ravel()
    true_states = np.asarray(true_states).ravel()
    true_regime = np.asarray(true_regime).ravel()
    regime_of = {}
    for z, r in zip(true_states, true_regime):
        regime_of.setdefault(int(z), int(r))
    table, inf_labels, true_labels = contingency(inferred, true_states)
    assign = munkres_assign(table)
    matched = {int(inf_labels[r]): regime_of[int(true_labels[c])] for r, c in assign.mapping.items() if table[r, c] > 0}
    if not matched:
        raise ValueError("no inferred state overlaps the truth")
    idx = np.array(sorted(matched))
    reg = np.array([matched[i] for i in idx])
    sub = np.asarray(trans)[np.ix_(idx, idx)]
    same = reg[:, None] == reg[None, :]
    return float(np.mean((sub * same).sum(axis=1))), float(np.mean((sub * ~same).sum(axis=1)))
