"""Change-of-measure weights and weighted estimators along reference paths.

Paths are simulated under the ``Z = 0`` dynamics; accumulating

    log R_t = sum <Z(X_s, L_s), dW_s> - 1/2 sum |Z(X_s, L_s)|^2 ds

with left-endpoint values turns expectations under the reference law into
expectations under the law with drift ``+ sqrt(2) sigma_k Z_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeights

MIN_ESS = 10.0


@dataclass(frozen=True)
class WeightAccumulator:
    log_weight: float = 0.0
    quad_var_term: float = 0.0
    stoch_int_term: float = 0.0

    @property
    def weight(self):
        return math.exp(self.log_weight)


def accumulate_weight(acc: WeightAccumulator, z_value, dw, dt) -> WeightAccumulator:
    """Add one step: ``<Z, dW>`` to the stochastic integral and ``|Z|^2 dt / 2`` to the quadratic term."""
    z = np.atleast_1d(np.asarray(z_value, dtype=float))
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    stoch = acc.stoch_int_term + float(z @ dw)
    quad = acc.quad_var_term + 0.5 * float(z @ z) * dt
    return WeightAccumulator(stoch - quad, quad, stoch)


@dataclass(frozen=True)
class WeightedEstimate:
    estimate: float
    se: float
    ess: float
    mean_weight: float
    n_paths: int

    def to_dict(self):
        return {"estimate": self.estimate, "se": self.se, "ess": self.ess,
                "mean_weight": self.mean_weight, "n_paths": self.n_paths}


def _evaluate(f, paths, t):
    vals = np.empty(len(paths))
    logw = np.empty(len(paths))
    for n, p in enumerate(paths):
        i = p.index_at(t)
        vals[n] = f(p.x[i], int(p.lam[i]))
        logw[n] = p.log_weight[i] if p.log_weight is not None else 0.0
    return vals, logw


def weights_at(paths, t):
    """Log-weights of the non-exploded paths at time ``t``."""
    live = [p for p in paths if not p.exploded]
    return np.array([p.log_weight[p.index_at(t)] if p.log_weight is not None else 0.0 for p in live])


def weighted_expectation(f, paths, t, normalized=True, min_ess=MIN_ESS) -> WeightedEstimate:
    """Importance-sampling estimate of ``E f(X_t, L_t)`` under the perturbed law.

    ``normalized=True`` gives the ratio estimator ``sum w f / sum w`` with a
    delta-method standard error; ``False`` gives the plain mean of ``w f``.
    Exploded paths are dropped.
    """
    live = [p for p in paths if not p.exploded]
    if not live:
        raise DegenerateWeights("no non-exploded paths")
    vals, logw = _evaluate(f, live, t)
    n = len(live)
    w = np.exp(logw)
    ess = w.sum() ** 2 / np.sum(w * w)
    if ess < min_ess:
        raise DegenerateWeights(f"effective sample size {ess:.3g} below {min_ess}")
    mean_w = float(w.mean())
    if normalized:
        est = float(np.sum(w * vals) / np.sum(w))
        resid = w * (vals - est) / mean_w
        se = float(np.sqrt(np.sum(resid ** 2)) / n)
    else:
        wf = w * vals
        est = float(wf.mean())
        se = float(wf.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return WeightedEstimate(est, se, float(ess), mean_w, n)


def mean_weight(paths, t):
    """Mean unnormalized weight and its standard error; should be 1 for a true martingale."""
    w = np.exp(weights_at(paths, t))
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size))


def feynman_kac_estimate(F, f, paths, t):
    """Estimate ``E[f(X_t, L_t) exp(int_0^t F(X_s, L_s) ds)]`` by left-endpoint quadrature.

    Uses the recorded grid of each path, so the quadrature step is the
    recording interval.  Returns ``(estimate, se, sup_abs_F)``.
    """
    live = [p for p in paths if not p.exploded]
    if not live:
        raise DegenerateWeights("no non-exploded paths")
    vals = np.empty(len(live))
    sup_f = 0.0
    for n, p in enumerate(live):
        i_end = p.index_at(t)
        fv = np.array([F(p.x[i], int(p.lam[i])) for i in range(i_end)])
        if fv.size:
            sup_f = max(sup_f, float(np.max(np.abs(fv))))
        integral = float(np.sum(fv)) * p.record_dt
        vals[n] = f(p.x[i_end], int(p.lam[i_end])) * math.exp(integral)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.inf
    return float(vals.mean()), se, sup_f
