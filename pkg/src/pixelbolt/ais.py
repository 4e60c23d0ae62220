"""Annealed importance estimation of the RBM log-partition function.

Intermediate distributions scale only the coupling term:
p_beta(v, h) proportional to e^{a.v + b.h + beta * v.W.h}, so the base
(beta = 0) is the factorized RBM with a closed-form log Z0 and exact
samples. Each chain accumulates log-weight increments dbeta * v.W.h along
a beta ladder; log Z = log Z0 + log-mean-exp(weights). Weights are always
accumulated in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rbm import RbmParams

#: per-side size above which the mask-table engine would blow past L3
_MASK_ENGINE_MAX_SIDE = 10


@dataclass
class AisSchedule:
    betas: np.ndarray
    mcmc_updates_per_step: int
    n_chains: int

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 2:
            raise ValueError("need at least two ladder values")
        if self.betas[0] != 0.0 or self.betas[-1] != 1.0 or (np.diff(self.betas) < 0).any():
            raise ValueError("ladder must rise monotonically from 0 to 1")
        if self.mcmc_updates_per_step < 1 or self.n_chains < 1:
            raise ValueError("updates per step and chain count must be positive")

    @property
    def n_steps(self):
        return self.betas.size - 1


@dataclass
class AisResult:
    log_z_estimate: float
    per_chain_log_weights: np.ndarray
    ess: float
    degenerate: bool = field(default=False)


def make_schedule(n_steps, updates_per_step, n_chains, spacing="linear") -> AisSchedule:
    """Ladder of n_steps transitions; `geometric-tail` packs rungs near beta=1."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if spacing == "linear":
        betas = np.linspace(0.0, 1.0, n_steps + 1)
    elif spacing == "geometric-tail":
        r = 1e-4
        u = np.linspace(0.0, 1.0, n_steps + 1)
        betas = (1.0 - r ** u) / (1.0 - r)
        betas[0], betas[-1] = 0.0, 1.0
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    return AisSchedule(betas, int(updates_per_step), int(n_chains))


def training_schedule(n_chains=5000) -> AisSchedule:
    """Ladder used while training on binary data: 1000 steps, 50 updates."""
    return make_schedule(1000, 50, n_chains)


def evaluation_schedule(n_chains=50000) -> AisSchedule:
    """Tenfold ladder for final evaluation: 10000 steps, 50 updates."""
    return make_schedule(10000, 50, n_chains)


def base_log_z(params: RbmParams) -> float:
    """Closed-form log Z of the factorized (beta = 0) distribution."""
    def sp(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    return float(sp(params.a).sum() + sp(params.b).sum())


def effective_sample_size(log_weights) -> float:
    """(sum w)^2 / sum w^2, evaluated in log space."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        raise ValueError("no weights")
    m = lw.max()
    s1 = np.exp(lw - m).sum()
    s2 = np.exp(2.0 * (lw - m)).sum()
    return float(s1 * s1 / s2)


def _run_chains(params: RbmParams, schedule: AisSchedule, seed, engine):
    m, k = params.sides
    nc = schedule.n_chains
    states = _kernels.make_rng_states(seed, nc)
    logw = np.zeros(nc)
    if engine == "auto":
        engine = "masktable" if max(m, k) <= _MASK_ENGINE_MAX_SIDE else "generic"
    if engine == "masktable":
        if max(m, k) > _MASK_ENGINE_MAX_SIDE:
            raise ValueError(f"mask-table engine supports sides up to {_MASK_ENGINE_MAX_SIDE}")
        vmask = np.zeros(nc, dtype=np.int64)
        hmask = np.zeros(nc, dtype=np.int64)
        _kernels.ais_masktable(params.w, params.a, params.b, schedule.betas,
                               schedule.mcmc_updates_per_step, states, vmask, hmask, logw)
        V = ((vmask[:, None] >> np.arange(m)) & 1).astype(np.float64)
        H = ((hmask[:, None] >> np.arange(k)) & 1).astype(np.float64)
    elif engine == "generic":
        V = np.zeros((nc, m))
        H = np.zeros((nc, k))
        _kernels.ais_generic(params.w, params.a, params.b, schedule.betas,
                             schedule.mcmc_updates_per_step, states, V, H, logw)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return V, H, logw


def _result(params, schedule, logw) -> AisResult:
    nc = logw.size
    m = logw.max()
    lme = m + np.log(np.exp(logw - m).sum()) - np.log(nc)
    ess = effective_sample_size(logw)
    return AisResult(log_z_estimate=base_log_z(params) + float(lme),
                     per_chain_log_weights=logw,
                     ess=ess,
                     degenerate=bool(ess < 0.01 * nc))


def ais_log_z(params: RbmParams, schedule: AisSchedule, seed=0, engine="auto") -> AisResult:
    """Annealed importance estimate of log Z."""
    _, _, logw = _run_chains(params, schedule, seed, engine)
    return _result(params, schedule, logw)


def ais_samples(params: RbmParams, schedule: AisSchedule, seed=0, engine="auto"):
    """Final-rung states with their log-weights: ((V, H), log_weights, result).

    The states are (weighted) prior samples; consumers self-normalize the
    weights, e.g. for log-partition gradient moments.
    """
    V, H, logw = _run_chains(params, schedule, seed, engine)
    return (V, H), logw, _result(params, schedule, logw)
