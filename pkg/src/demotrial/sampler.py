"""Adaptive random-walk Metropolis-within-Gibbs.

One chain updates its parameter blocks in a fixed order with Gaussian
random-walk proposals on an unconstrained scale (positive parameters are
log-transformed, bounded ones logit-transformed, with the Jacobian folded
into the acceptance ratio). Per-block proposal scales adapt during burn-in
by a Robbins-Monro recursion targeting a fixed acceptance rate and are
frozen afterwards, so the retained draws come from a fixed kernel.

The RNG is counter-based (Philox underneath numpy's Generator): one
seeded generator per chain, consumed in a fixed order, which makes runs
bit-identical for identical (spec, blocks, data) regardless of how many
chains run elsewhere in the process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ADAPT_GAIN = 1.0
_ADAPT_DECAY = 0.6


@dataclass
class ChainSpec:
    n_burn: int
    n_keep: int
    seed: int
    thin: int = 1
    target_accept: float = 0.44
    init: np.ndarray | None = None

    def validate(self):
        if self.n_burn <= 0 or self.n_keep <= 0:
            raise ValueError("n_burn and n_keep must be > 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0.1 < self.target_accept < 0.8:
            raise ValueError("target_accept must be in (0.1, 0.8)")


@dataclass
class ParameterBlock:
    """One update block.

    logp, when given, is the block's conditional log-density contract:
    called as logp(x_full) with the full constrained parameter vector and
    must return the joint log-density up to terms not involving this
    block. When absent, run_chain falls back to the joint log_posterior.
    """

    name: str
    dim: int = 1
    support: str = "real"  # real | positive | bounded
    logp: object = None
    lo: float = 0.0
    hi: float = 1.0
    initial_scale: float = 0.5

    def __post_init__(self):
        if self.support not in ("real", "positive", "bounded"):
            raise ValueError(f"unknown support {self.support!r}")
        if self.support == "bounded" and not self.hi > self.lo:
            raise ValueError("bounded support requires hi > lo")


def _to_unconstrained(x, block):
    if block.support == "real":
        return x
    if block.support == "positive":
        if np.any(x <= 0):
            raise ValueError(f"block {block.name}: init must be positive")
        return np.log(x)
    p = (x - block.lo) / (block.hi - block.lo)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"block {block.name}: init outside ({block.lo}, {block.hi})")
    return np.log(p) - np.log1p(-p)


def _to_constrained(z, block):
    if block.support == "real":
        return z
    if block.support == "positive":
        return np.exp(z)
    sig = 1.0 / (1.0 + np.exp(-z))
    return block.lo + (block.hi - block.lo) * sig


def _log_jacobian(z, block):
    """log |d constrained / d unconstrained| summed over the block."""
    if block.support == "real":
        return 0.0
    if block.support == "positive":
        return float(np.sum(z))
    # derivative of lo + (hi-lo)*sigmoid(z)
    soft = np.logaddexp(0.0, -z) + np.logaddexp(0.0, z)
    return float(block.dim * math.log(block.hi - block.lo) - np.sum(soft))


@dataclass
class ChainResult:
    draws: np.ndarray                 # (n_keep, total_dim), constrained scale
    block_slices: dict
    accept_rate: dict
    scale_history: dict               # block name -> per-iteration proposal scale
    n_burn: int

    def column(self, name: str) -> np.ndarray:
        sl = self.block_slices[name]
        out = self.draws[:, sl]
        return out[:, 0] if out.shape[1] == 1 else out


def run_chain(spec: ChainSpec, blocks: list, log_posterior=None) -> ChainResult:
    """Run one adaptive Metropolis-within-Gibbs chain.

    Params:
    spec -- ChainSpec; spec.init is the full constrained start vector.
    blocks -- list of ParameterBlock in update order.
    log_posterior -- joint log-density f(x_full) used for blocks without
        their own conditional contract.
    """
    spec.validate()
    names = [b.name for b in blocks]
    if len(set(names)) != len(names):
        raise ValueError("block names must be unique")
    total = sum(b.dim for b in blocks)
    if spec.init is None or len(np.atleast_1d(spec.init)) != total:
        raise ValueError(f"init must have length {total}")
    slices, start = {}, 0
    for b in blocks:
        slices[b.name] = slice(start, start + b.dim)
        start += b.dim

    x = np.array(spec.init, dtype=float).copy()
    z = np.concatenate([np.atleast_1d(_to_unconstrained(x[slices[b.name]], b))
                        for b in blocks])

    def target(xfull, block):
        f = block.logp if block.logp is not None else log_posterior
        if f is None:
            raise ValueError(f"block {block.name} has no density and no joint log_posterior given")
        return f(xfull)

    for b in blocks:
        if not np.isfinite(target(x, b)):
            raise ValueError(f"log-density not finite at init for block {b.name}")

    rng = np.random.Generator(np.random.Philox(spec.seed))
    log_scale = {b.name: math.log(b.initial_scale) for b in blocks}
    n_iter = spec.n_burn + spec.n_keep * spec.thin
    draws = np.empty((spec.n_keep, total))
    accepts = {b.name: 0 for b in blocks}
    scale_history = {b.name: np.empty(n_iter) for b in blocks}
    kept = 0

    for it in range(n_iter):
        adapting = it < spec.n_burn
        for b in blocks:
            sl = slices[b.name]
            scale = math.exp(log_scale[b.name])
            step = scale * rng.standard_normal(b.dim)
            z_old = z[sl].copy()
            z_new = z_old + step
            x_new_block = _to_constrained(z_new, b)
            x_prop = x.copy()
            x_prop[sl] = x_new_block
            lp_old = target(x, b)
            lp_new = target(x_prop, b)
            if math.isnan(lp_new) or lp_new == -math.inf:
                alpha = 0.0
            else:
                delta = (lp_new - lp_old
                         + _log_jacobian(z_new, b) - _log_jacobian(z_old, b))
                alpha = 1.0 if delta >= 0 else math.exp(delta)
            if rng.random() < alpha:
                z[sl] = z_new
                x[sl] = x_new_block
                accepts[b.name] += 1
            if adapting:
                gain = _ADAPT_GAIN / (1.0 + it) ** _ADAPT_DECAY
                log_scale[b.name] += gain * (alpha - spec.target_accept)
            scale_history[b.name][it] = math.exp(log_scale[b.name])
        if not adapting and (it - spec.n_burn) % spec.thin == spec.thin - 1:
            draws[kept] = x
            kept += 1

    total_updates = n_iter
    return ChainResult(
        draws=draws,
        block_slices=slices,
        accept_rate={k: v / total_updates for k, v in accepts.items()},
        scale_history=scale_history,
        n_burn=spec.n_burn,
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def _autocovariance(x):
    n = len(x)
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def _ess_one(x):
    """Effective sample size by Geyer's initial monotone positive sequence."""
    n = len(x)
    acov = _autocovariance(x)
    if acov[0] <= 0:
        return math.nan
    rho = acov / acov[0]
    pair_sums = []
    t = 1
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s <= 0:
            break
        pair_sums.append(s)
        t += 2
    # enforce monotone nonincreasing pair sums
    for i in range(1, len(pair_sums)):
        pair_sums[i] = min(pair_sums[i], pair_sums[i - 1])
    tau = 1.0 + 2.0 * sum(pair_sums)
    return n / tau


def _split_rhat_one(x):
    n = len(x) // 2
    if n < 2:
        return math.nan
    halves = np.array([x[:n], x[n:2 * n]])
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    w = variances.mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return math.nan
    var_est = (n - 1) / n * w + b / n
    return math.sqrt(var_est / w)


def diagnostics(draws: np.ndarray, rhat_flag: float = 1.05) -> dict:
    """Per-parameter effective sample size and split-Rhat.

    Returns {"ess": array, "rhat": array, "flags": list of strings}; a
    constant (degenerate) parameter gets nan diagnostics and a flag.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[0] < 100:
        raise ValueError("diagnostics need at least 100 retained draws")
    n_params = draws.shape[1]
    ess = np.empty(n_params)
    rhat = np.empty(n_params)
    flags = []
    for k in range(n_params):
        x = draws[:, k]
        if np.allclose(x, x[0]):
            ess[k] = math.nan
            rhat[k] = math.nan
            flags.append(f"param {k}: degenerate (constant chain)")
            continue
        ess[k] = _ess_one(x)
        rhat[k] = _split_rhat_one(x)
        if rhat[k] > rhat_flag:
            flags.append(f"param {k}: split-Rhat {rhat[k]:.3f} exceeds {rhat_flag}")
    return {"ess": ess, "rhat": rhat, "flags": flags}
