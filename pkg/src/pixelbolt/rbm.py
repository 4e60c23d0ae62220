"""Bipartite binary energy model used as the latent prior.

Energy convention: E(v, h) = -a.v - b.h - v.W.h with p(v, h) = e^{-E} / Z.
The energy is bilinear, so relaxed (continuous, in [0,1]) states plug into
the same expression. Exact partition sums exploit the bipartite structure:
summing one side analytically leaves 2^min(m,k) terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

ENUM_LIMIT = 24  # max m + k for exact partition sums


@dataclass
class RbmParams:
    """Couplings [m, k] plus per-side biases (left length m, right length k)."""
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        m, k = self.w.shape
        if self.a.shape != (m,) or self.b.shape != (k,):
            raise ValueError(f"bias shapes {self.a.shape}/{self.b.shape} do not match couplings {self.w.shape}")
        if m < 1 or k < 1:
            raise ValueError("both sides need at least one variable")
        if not (np.isfinite(self.w).all() and np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise ValueError("parameters must be finite")

    @property
    def sides(self):
        return self.w.shape

    @staticmethod
    def init(m, k, rng, coupling_scale=0.01) -> "RbmParams":
        return RbmParams(rng.normal(0.0, coupling_scale, size=(m, k)),
                         np.zeros(m), np.zeros(k))


@dataclass
class RbmState:
    """One configuration; bits when discrete, values in [0,1] when relaxed."""
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)


def energy(params: RbmParams, state: RbmState) -> float:
    v, h = state.left, state.right
    m, k = params.sides
    if v.shape[-1] != m or h.shape[-1] != k:
        raise ValueError(f"state shapes {v.shape}/{h.shape} do not match params {params.sides}")
    return float(-(params.a @ v) - (params.b @ h) - v @ params.w @ h)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _bitmatrix(n_bits, offset=0, count=None):
    """Rows are the binary expansions of offset .. offset+count-1."""
    if count is None:
        count = 1 << n_bits
    ints = np.arange(offset, offset + count, dtype=np.int64)
    return ((ints[:, None] >> np.arange(n_bits)) & 1).astype(np.float64)


def exact_log_z(params: RbmParams) -> float:
    """log Z by enumerating the smaller side and summing the other analytically."""
    m, k = params.sides
    if m + k > ENUM_LIMIT:
        raise ValueError(f"exact_log_z limited to m + k <= {ENUM_LIMIT}, got {m + k}")
    w, a, b = params.w, params.a, params.b
    if k < m:  # enumerate the smaller side
        w, a, b = w.T, b, a
        m, k = k, m
    terms = np.empty(1 << m)
    chunk = 1 << 16
    for lo in range(0, 1 << m, chunk):
        v = _bitmatrix(m, lo, min(chunk, (1 << m) - lo))
        terms[lo:lo + v.shape[0]] = v @ a + _softplus(b + v @ w).sum(axis=1)
    mx = terms.max()
    return float(mx + np.log(np.exp(terms - mx).sum()))


def exact_moments(params: RbmParams):
    """(E[v h^T], E[v], E[h]) under the model, by enumeration of the left side."""
    m, k = params.sides
    if m > 20:
        raise ValueError(f"exact_moments limited to m <= 20, got {m}")
    v = _bitmatrix(m)
    f = params.b + v @ params.w
    logp = v @ params.a + _softplus(f).sum(axis=1)
    p = np.exp(logp - logp.max())
    p /= p.sum()
    eh_given_v = 1.0 / (1.0 + np.exp(-f))
    ev = p @ v
    eh = p @ eh_given_v
    evh = (v * p[:, None]).T @ eh_given_v
    return evh, ev, eh


def exact_state_probs(params: RbmParams) -> np.ndarray:
    """Joint probability over bitmask states, indexed v + (h << m); tiny RBMs only."""
    m, k = params.sides
    if m + k > 16:
        raise ValueError("exact_state_probs limited to m + k <= 16")
    v = _bitmatrix(m)
    h = _bitmatrix(k)
    e = -(v @ params.a)[:, None] - (h @ params.b)[None, :] - v @ params.w @ h.T
    logp = -e
    p = np.exp(logp - logp.max())
    p /= p.sum()
    return p.T.reshape(-1)  # index = vmask + (hmask << m): vmask varies fastest


def gibbs_block_step(params: RbmParams, state: RbmState, rng: np.random.Generator) -> RbmState:
    """One full alternation: resample right | left, then left | right."""
    v = state.left
    ph = 1.0 / (1.0 + np.exp(-(params.b + v @ params.w)))
    h = (rng.random(ph.shape) < ph).astype(np.float64)
    pv = 1.0 / (1.0 + np.exp(-(params.a + params.w @ h)))
    v = (rng.random(pv.shape) < pv).astype(np.float64)
    return RbmState(v, h)


def gibbs_chain(params: RbmParams, n_steps, n_chains, burn_in=0, seed=0,
                init_v=None):
    """Independent chains from Bernoulli(0.5) starts; returns (V, H) bit arrays.

    Each chain runs burn_in + n_steps alternations with its own stream.
    Passing init_v keeps chains persistent across calls.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    m, k = params.sides
    states = _kernels.make_rng_states(seed, n_chains)
    if init_v is None:
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        V = (init_rng.random((n_chains, m)) < 0.5).astype(np.float64)
    else:
        V = np.array(init_v, dtype=np.float64)
    H = np.zeros((n_chains, k))
    _kernels.gibbs_chains(params.w, params.a, params.b, V, H,
                          int(burn_in + n_steps), states)
    return V, H


def gibbs_joint_histogram(params: RbmParams, n_steps, seed=0) -> np.ndarray:
    """Visit counts over joint states of a single chain (m + k <= 16)."""
    m, k = params.sides
    if m + k > 16:
        raise ValueError("histogram limited to m + k <= 16")
    st = _kernels.make_rng_states(seed, 1)[0]
    return _kernels.gibbs_histogram(params.w, params.a, params.b, int(n_steps), st)


def grad_log_z(params: RbmParams, samples, weights=None):
    """Monte-Carlo estimate of (d log Z / dW, d/da, d/db) from prior samples.

    samples is a (V, H) pair of [n, m] / [n, k] arrays. With `weights`
    (unnormalized log-weights), the estimate is self-normalized.
    """
    V, H = samples
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if V.shape[0] == 0:
        raise ValueError("empty sample set")
    if V.shape[1] != params.sides[0] or H.shape[1] != params.sides[1]:
        raise ValueError(f"sample shapes {V.shape}/{H.shape} do not match params {params.sides}")
    if weights is None:
        p = np.full(V.shape[0], 1.0 / V.shape[0])
    else:
        lw = np.asarray(weights, dtype=np.float64)
        p = np.exp(lw - lw.max())
        p /= p.sum()
    dw = (V * p[:, None]).T @ H
    da = p @ V
    db = p @ H
    return dw, da, db


def log_prior(params: RbmParams, state: RbmState, log_z: float) -> float:
    """log p(state) = -E(state) - log Z; valid for relaxed or discrete states."""
    return -energy(params, state) - log_z
