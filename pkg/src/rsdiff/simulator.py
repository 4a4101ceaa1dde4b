"""Time stepping of the coupled diffusion / switching system.

Each step is an Euler-Maruyama move of ``X`` with the coefficients of the
current state, followed by a switching decision with rates frozen at the
left endpoint (Lie splitting).  Brownian increments and Poisson marks come
from two independent per-path streams (see :mod:`rsdiff.rng`).

Builtin-family models run through a compiled kernel; anything else falls
back to a pure-Python loop that consumes the same random numbers.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernel
from .errors import BoundViolated, Exploded
from .families import ZField, q_bounds
from .jumps import JumpEvent, bernoulli_from_uniform, proposal_probability, thinning_from_uniforms
from .model import SQRT2, drift
from .rng import PathStreams, path_streams

log = logging.getLogger(__name__)

SCHEMES = ("euler", "euler_with_bernoulli_switch")
CHUNK = 1 << 16


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    burn_in: float = 0.0
    explosion_radius: float = 1e6
    seed: int = 0
    n_paths: int = 1
    scheme: str = "euler"
    record_stride: int = 1
    record_rejected: bool = False
    c_q: Optional[float] = None

    def __post_init__(self):
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")
        if not self.dt < self.t_end:
            raise ValueError("dt must be smaller than t_end")
        if not 0 <= self.burn_in < self.t_end:
            raise ValueError("burn_in must lie in [0, t_end)")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.n_paths < 1 or self.record_stride < 1:
            raise ValueError("n_paths and record_stride must be >= 1")

    @property
    def n_steps(self):
        n = self.t_end / self.dt
        return int(round(n)) if abs(n - round(n)) < 1e-9 * n else int(math.ceil(n))


@dataclass
class HybridPath:
    """Recorded trajectory of ``(X_t, Lambda_t)``.

    ``x[i]`` and ``lam[i]`` are the state at time ``i * dt * stride``.  When
    a Girsanov perturbation was supplied, ``log_weight[i]`` holds the running
    log-weight at the same times.
    """

    dt: float
    stride: int
    x: np.ndarray
    lam: np.ndarray
    jumps: list = field(default_factory=list)
    exploded_at: Optional[float] = None
    exploded_x: Optional[np.ndarray] = None
    log_weight: Optional[np.ndarray] = None
    weight: Optional[object] = None
    steps_done: int = 0

    @property
    def record_dt(self):
        return self.dt * self.stride

    @property
    def times(self):
        return np.arange(self.x.shape[0]) * self.record_dt

    @property
    def exploded(self):
        return self.exploded_at is not None

    @property
    def accepted_jumps(self):
        return [ev for ev in self.jumps if ev.accepted]

    def index_at(self, t):
        i = int(round(t / self.record_dt))
        if i >= self.x.shape[0] or abs(i * self.record_dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not on the recorded grid of this path")
        return i


def dominating_rate(model, cfg):
    return float(cfg.c_q) if cfg.c_q is not None else q_bounds(model).c_q


# --------------------------------------------------------------------------
# single step (reference implementation)
# --------------------------------------------------------------------------

def _advance(model, x, k, dt, xi, u, c_q, scheme, time):
    """One Euler step plus switching from pre-drawn ``xi`` (normal) and ``u`` (two uniforms)."""
    b = drift(model, x, k)
    s = np.atleast_2d(model.sigma(x, k))
    xn = x + b * dt + (SQRT2 * s) @ (math.sqrt(dt) * xi)
    ev = None
    if model.n_states > 1:
        if scheme == "euler":
            ev = thinning_from_uniforms(model.q_field, x, k, c_q, dt, u[0], u[1], time)
        else:
            ev = bernoulli_from_uniform(model.q_field, x, k, dt, u[0], time)
    kn = ev.to_state if ev is not None and ev.accepted else k
    return xn, kn, ev


def step(model, x, k, dt, streams: PathStreams, c_q=None, scheme="euler", radius=math.inf):
    """Advance ``(x, k)`` by one step of length ``dt``.

    Returns ``(x', k', event)`` where ``event`` is the (possibly rejected)
    jump proposal or ``None``.  Raises :class:`Exploded` if ``|x'|`` reaches
    ``radius``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if c_q is None:
        c_q = q_bounds(model).c_q
    xi = streams.diffusion.standard_normal(model.dim)
    u = streams.jumps.random(2)
    xn, kn, ev = _advance(model, x, k, dt, xi, u, c_q, scheme, dt)
    if not np.linalg.norm(xn) < radius:
        raise Exploded(dt, xn)
    return xn, kn, ev


# --------------------------------------------------------------------------
# path simulation
# --------------------------------------------------------------------------

def _kernel_arrays(model, weight_z):
    spec = model.builtin
    n, d = spec.n_states, spec.dim
    a = np.einsum("kij,klj->kil", spec.sigma, spec.sigma)
    G = np.ascontiguousarray(a @ spec.v_precision)
    B = np.ascontiguousarray(SQRT2 * spec.sigma @ spec.z_matrix)
    e = np.ascontiguousarray(np.einsum("kij,j->ki", G, spec.v_mean) + SQRT2 * np.einsum("kij,kj->ki", spec.sigma, spec.z_offset))
    gkind = np.array([0 if kind == "affine" else 1 for kind in spec.z_kind], dtype=np.int64)
    sig2 = np.ascontiguousarray(SQRT2 * spec.sigma)
    if weight_z is None:
        wA = np.zeros((n, d, d))
        wc = np.zeros((n, d))
        wkind = np.zeros(n, dtype=np.int64)
    else:
        wA = np.ascontiguousarray(weight_z.matrix, dtype=float)
        wc = np.ascontiguousarray(weight_z.offset, dtype=float)
        wkind = np.array([0 if kind == "affine" else 1 for kind in weight_z.kind], dtype=np.int64)
    return G, B, e, gkind, sig2, np.ascontiguousarray(spec.q_base, dtype=float), float(spec.q_theta), wA, wc, wkind


def simulate_path(model, x0, k0, cfg: SimConfig, streams: PathStreams = None, path_index=0,
                  weight_z=None, force_python=False) -> HybridPath:
    """Simulate one path on ``[0, t_end]``.

    ``weight_z`` switches on Girsanov accumulation for the perturbation
    ``+sqrt(2) sigma_k Z_k`` (a :class:`ZField` or any callable ``(x, k)``).
    An explosion is recorded on the returned path, never raised.
    """
    from .girsanov import WeightAccumulator

    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.shape != (model.dim,):
        raise ValueError(f"x0 must have dimension {model.dim}")
    if not np.linalg.norm(x) < cfg.explosion_radius:
        raise ValueError("explosion_radius must exceed |x0|")
    if streams is None:
        streams = path_streams(cfg.seed, path_index)
    c_q = dominating_rate(model, cfg)
    n_steps = cfg.n_steps
    dt = cfg.dt
    stride = cfg.record_stride
    n_rec = n_steps // stride + 1
    out_x = np.empty((n_rec, model.dim))
    out_k = np.empty(n_rec, dtype=np.int16)
    out_x[0] = x
    out_k[0] = k0
    track = weight_z is not None
    out_lw = np.zeros(n_rec) if track else np.zeros(1)
    acc = np.zeros(2)
    use_kernel = (
        model.builtin is not None
        and not force_python
        and (weight_z is None or isinstance(weight_z, ZField))
    )
    path = HybridPath(dt=dt, stride=stride, x=out_x, lam=out_k, log_weight=out_lw if track else None)
    k = int(k0)
    done = 0
    if use_kernel:
        arrays = _kernel_arrays(model, weight_z)
        kstate = np.array([k], dtype=np.int64)
        p_prop = proposal_probability(c_q, dt)
        scheme = _kernel.SCHEME_THINNING if cfg.scheme == "euler" else _kernel.SCHEME_BERNOULLI
    while done < n_steps:
        m = min(CHUNK, n_steps - done)
        xi = streams.diffusion.standard_normal((m, model.dim))
        u = streams.jumps.random((m, 2))
        if use_kernel:
            G, B, e, gkind, sig2, qbase, qtheta, wA, wc, wkind = arrays
            ev_step = np.empty(m, dtype=np.int64)
            ev_z = np.empty(m)
            ev_from = np.empty(m, dtype=np.int64)
            ev_to = np.empty(m, dtype=np.int64)
            ev_acc = np.empty(m, dtype=np.bool_)
            n_done, status, n_ev = _kernel.run_chunk(
                x, kstate, done, m, dt, xi, u,
                G, B, e, gkind, sig2,
                qbase, qtheta, c_q, p_prop, scheme, float(cfg.explosion_radius),
                track, wA, wc, wkind, acc,
                stride, out_x, out_k, out_lw,
                ev_step, ev_z, ev_from, ev_to, ev_acc, cfg.record_rejected,
            )
            for i in range(n_ev):
                path.jumps.append(JumpEvent(float(ev_step[i] * dt), float(ev_z[i]), int(ev_from[i]),
                                            int(ev_to[i]), bool(ev_acc[i])))
            k = int(kstate[0])
            if status == _kernel.BOUND_VIOLATED:
                raise BoundViolated(f"exit rate exceeded the dominating rate {c_q} near step {done + n_done}")
        else:
            n_done, status, k = _python_chunk(model, x, k, done, m, dt, xi, u, c_q, cfg, weight_z, acc,
                                              out_x, out_k, out_lw, path.jumps)
        done += n_done
        if status == _kernel.EXPLODED:
            path.exploded_at = done * dt
            path.exploded_x = x.copy()
            n_keep = done // stride + 1
            path.x = out_x[:n_keep]
            path.lam = out_k[:n_keep]
            if track:
                path.log_weight = out_lw[:n_keep]
            break
    path.steps_done = done
    if track:
        path.weight = WeightAccumulator(log_weight=acc[0] - acc[1], quad_var_term=acc[1], stoch_int_term=acc[0])
    return path


def _python_chunk(model, x, k, step0, m, dt, xi, u, c_q, cfg, weight_z, acc, out_x, out_k, out_lw, jumps):
    sq = math.sqrt(dt)
    radius = cfg.explosion_radius
    for s in range(m):
        g = step0 + s + 1
        if weight_z is not None:
            z = np.atleast_1d(weight_z(x, k))
            acc[0] += float(z @ (sq * xi[s]))
            acc[1] += 0.5 * float(z @ z) * dt
        xn, kn, ev = _advance(model, x, k, dt, xi[s], u[s], c_q, cfg.scheme, g * dt)
        if ev is not None and (ev.accepted or cfg.record_rejected):
            jumps.append(ev)
        x[:] = xn
        k = kn
        if g % cfg.record_stride == 0:
            idx = g // cfg.record_stride
            out_x[idx] = x
            out_k[idx] = k
            if weight_z is not None:
                out_lw[idx] = acc[0] - acc[1]
        if not np.linalg.norm(x) < radius:
            return s + 1, _kernel.EXPLODED, k
    return m, _kernel.OK, k


def simulate_batch(model, x0, k0, cfg: SimConfig, threads=1, weight_z=None):
    """``cfg.n_paths`` independent paths; path ``i`` uses streams derived from ``(seed, i)``.

    The result does not depend on ``threads``: paths are returned in index order.
    """
    def run(i):
        return simulate_path(model, x0, k0, cfg, path_index=i, weight_z=weight_z)

    if threads <= 1:
        return [run(i) for i in range(cfg.n_paths)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(cfg.n_paths)))


def ensemble_summary(paths):
    finals = np.array([p.x[-1] for p in paths if not p.exploded])
    states = np.array([p.lam[-1] for p in paths if not p.exploded])
    out = {
        "n_paths": len(paths),
        "n_exploded": sum(p.exploded for p in paths),
        "n_jumps": int(sum(len(p.accepted_jumps) for p in paths)),
    }
    if finals.size:
        out["mean_x_T"] = finals.mean(axis=0).tolist()
        out["var_x_T"] = finals.var(axis=0).tolist()
        out["state_fractions_T"] = np.bincount(states, minlength=max(states.max() + 1, 1)).tolist()
    return out


def transience_diagnostic(model, k, times=(1.0, 2.0, 4.0, 8.0), n_paths=200, dt=1e-3, seed=0, x0=None, threads=1):
    """Second moment growth of the state-``k`` diffusion with switching frozen.

    Returns a dict with ``E|X_T|^2`` (non-exploded paths) at each ``T``, the
    least-squares slope of ``E|X_T|^2`` against ``T`` and the explosion count.
    For affine drifts ``linear_drift_rate`` is the largest real part of the
    eigenvalues of the drift matrix; a positive value means the frozen
    diffusion is transient.
    """
    from .families import frozen_state_model

    frozen = frozen_state_model(model, k)
    x0 = np.zeros(model.dim) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    cfg = SimConfig(dt=dt, t_end=max(times), seed=seed, n_paths=n_paths)
    paths = simulate_batch(frozen, x0, 0, cfg, threads=threads)
    second = []
    for t in times:
        vals = [float(p.x[p.index_at(t)] @ p.x[p.index_at(t)]) for p in paths
                if p.exploded_at is None or p.exploded_at > t]
        second.append(float(np.mean(vals)) if vals else math.inf)
    slope = float(np.polyfit(np.asarray(times, float), np.asarray(second), 1)[0]) if all(map(math.isfinite, second)) else math.inf
    rate = None
    spec = model.builtin
    if spec is not None and spec.z_kind[k] == "affine":
        G, B = _kernel_arrays(model, None)[:2]
        rate = float(np.linalg.eigvals(B[k] - G[k]).real.max())
    return {
        "state": k,
        "linear_drift_rate": rate,
        "times": list(times),
        "second_moment": second,
        "slope": slope,
        "growing": bool(slope > 0),
        "n_exploded": int(sum(p.exploded for p in paths)),
        "n_paths": n_paths,
    }
