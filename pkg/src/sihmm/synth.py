"""Multi-regime synthetic sequences with known states, segment starts and regimes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SynthConfig:
    n_regimes: int = 3
    states_per_regime: int = 3
    total_points: int = 5000
    hazard: float = 0.05
    dirichlet_conc: float = 1.0
    self_bias: float = 1.0
    mean_prior_var: float = 100.0
    var_shape: float = 2.0
    var_scale: float = 1.0
    n_sequences: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_regimes < 1 or self.states_per_regime < 1 or self.total_points < 1 or self.n_sequences < 1:
            raise ValueError("regime, state, point and sequence counts must be positive")
        if self.n_sequences > self.total_points:
            raise ValueError("more sequences than points")
        if not 0.0 <= self.hazard <= 1.0:
            raise ValueError(f"hazard must lie in [0, 1], got {self.hazard}")
        if self.dirichlet_conc <= 0 or self.self_bias < 0 or self.mean_prior_var <= 0:
            raise ValueError("dirichlet_conc and mean_prior_var must be positive, self_bias nonnegative")
        if self.var_shape <= 0 or self.var_scale <= 0:
            raise ValueError("inverse-gamma shape and scale must be positive")

    @property
    def n_states(self):
        return self.n_regimes * self.states_per_regime


@dataclass(frozen=True)
class SynthDraws:
    """Parameters drawn by the generator."""

    transitions: np.ndarray  # (n_regimes, k, k), within-regime transition matrices
    means: np.ndarray  # (n_states,)
    variances: np.ndarray  # (n_states,)


@dataclass
class LabeledSequence:
    y: np.ndarray  # (T, 1)
    states: np.ndarray  # global state index
    segment_start: np.ndarray  # 1 at the first step of each regime run
    regime: np.ndarray


@dataclass
class LabeledDataset:
    sequences: list
    draws: SynthDraws
    config: SynthConfig

    @property
    def observations(self):
        return [s.y for s in self.sequences]


def _draw_parameters(c, rng):
    k = c.states_per_regime
    mats = np.empty((c.n_regimes, k, k))
    for r in range(c.n_regimes):
        rows = rng.dirichlet(np.full(k, c.dirichlet_conc), size=k)
        rows[np.arange(k), np.arange(k)] += c.self_bias
        mats[r] = rows / rows.sum(axis=1, keepdims=True)
    means = rng.normal(0.0, np.sqrt(c.mean_prior_var), size=c.n_states)
    variances = 1.0 / rng.gamma(c.var_shape, 1.0 / c.var_scale, size=c.n_states)
    return SynthDraws(mats, means, variances)


def generate(c=SynthConfig()):
    """Simulate one chain of ``total_points`` steps and split it into ``n_sequences`` pieces."""
    rng = np.random.default_rng(c.seed)
    draws = _draw_parameters(c, rng)
    k = c.states_per_regime
    N = c.total_points
    local = np.empty(N, dtype=int)
    regime = np.empty(N, dtype=int)
    start = np.zeros(N, dtype=int)

    regime[0] = rng.integers(c.n_regimes)
    local[0] = rng.integers(k)
    start[0] = 1
    for t in range(1, N):
        if rng.random() < c.hazard:
            if c.n_regimes > 1:
                other = rng.integers(c.n_regimes - 1)
                regime[t] = other if other < regime[t - 1] else other + 1
            else:
                regime[t] = regime[t - 1]
            local[t] = rng.integers(k)
            start[t] = 1
        else:
            regime[t] = regime[t - 1]
            local[t] = rng.choice(k, p=draws.transitions[regime[t], local[t - 1]])
    states = regime * k + local
    y = rng.normal(draws.means[states], np.sqrt(draws.variances[states]))

    sequences = []
    for idx in np.array_split(np.arange(N), c.n_sequences):
        flags = start[idx].copy()
        flags[0] = 1
        sequences.append(LabeledSequence(y[idx][:, None], states[idx], flags, regime[idx]))
    return LabeledDataset(sequences, draws, c)


def true_transition_render(c, draws):
    """Global (n*k) x (n*k) transition matrix implied by the generator."""
    n, k = c.n_regimes, c.states_per_regime
    h = c.hazard
    out = np.zeros((n * k, n * k))
    for r in range(n):
        block = slice(r * k, (r + 1) * k)
        out[block, block] = (1.0 - h) * draws.transitions[r]
        if n > 1:
            for o in range(n):
                if o != r:
                    out[block, o * k:(o + 1) * k] = h / ((n - 1) * k)
        else:
            out[block, block] += h / k
    return out
