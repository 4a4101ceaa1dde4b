"""Builtin coefficient families, JSON model configs and plug-in registration.

The builtin family covers constant ``sigma_k``, a Gaussian potential, singular
drifts ``Z_k(x) = M_k g(x) + c_k`` with ``g`` the identity or ``tanh``, and
Q-fields of the form "constant base plus bounded trigonometric perturbation":

    q_ij(x) = base_ij * (1 + theta * sin(x_0))   for i < j
    q_ij(x) = base_ij * (1 + theta * cos(x_0))   for i > j

For two states this is exactly ``a(x) = theta a sin x``, ``b(x) = theta b cos x``.
Models of this family carry a :class:`BuiltinSpec`, which the simulator uses
to dispatch to its compiled kernel.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ConfigError
from .model import (
    GaussianPotential,
    QMatrixBounds,
    ReferenceMeasure,
    SwitchingModel,
    stationary_distribution,
)

Z_KINDS = ("affine", "tanh")


@dataclass(frozen=True, eq=False)
class ZField:
    """Per-state ``Z_k(x) = matrix_k g_k(x) + offset_k`` with ``g_k`` identity or tanh."""

    kind: tuple
    matrix: np.ndarray  # (N, d, d)
    offset: np.ndarray  # (N, d)

    def __call__(self, x, k):
        x = np.atleast_1d(x)
        g = x if self.kind[k] == "affine" else np.tanh(x)
        return self.matrix[k] @ g + self.offset[k]

    @classmethod
    def uniform(cls, kind, matrix, n_states, dim, offset=0.0):
        return cls(
            kind=(kind,) * n_states,
            matrix=_as_state_matrices(matrix, n_states, dim),
            offset=np.broadcast_to(np.asarray(offset, dtype=float), (n_states, dim)).copy(),
        )


@dataclass(frozen=True, eq=False)
class BuiltinSpec:
    sigma: np.ndarray        # (N, d, d)
    v_mean: np.ndarray       # (d,)
    v_precision: np.ndarray  # (d, d)
    z_kind: tuple            # per state, one of Z_KINDS
    z_matrix: np.ndarray     # (N, d, d)
    z_offset: np.ndarray     # (N, d)
    q_base: np.ndarray       # (N, N)
    q_theta: float = 0.0

    @property
    def dim(self):
        return self.v_mean.size

    @property
    def n_states(self):
        return self.q_base.shape[0]

    def q_matrix(self, x):
        base = self.q_base
        if self.q_theta == 0.0:
            return base.copy()
        x0 = float(np.atleast_1d(x)[0])
        up = 1.0 + self.q_theta * math.sin(x0)
        low = 1.0 + self.q_theta * math.cos(x0)
        q = np.triu(base, 1) * up + np.tril(base, -1) * low
        np.fill_diagonal(q, -q.sum(axis=1))
        return q

    @property
    def z_field(self):
        return ZField(self.z_kind, self.z_matrix, self.z_offset)

    def z_value(self, x, k):
        x = np.atleast_1d(x)
        g = x if self.z_kind[k] == "affine" else np.tanh(x)
        return self.z_matrix[k] @ g + self.z_offset[k]

    def q_bounds(self):
        """Exact envelopes: ``sin`` and ``cos`` of ``x_0`` both sweep [-1, 1]."""
        base = self.q_base
        th = self.q_theta
        off = base - np.diag(np.diag(base))
        q_bar = off * (1 + th)
        q_hat = off * (1 - th)
        s_up = np.triu(base, 1).sum(axis=1)
        s_low = np.tril(base, -1).sum(axis=1)
        total = s_up + s_low
        spread = th * np.hypot(s_up, s_low)
        np.fill_diagonal(q_bar, -(total - spread))
        np.fill_diagonal(q_hat, -(total + spread))
        return QMatrixBounds(q_bar=q_bar, q_hat=q_hat, c_q=float((total + spread).max()), exact=True)


def _check_spec(spec):
    n, d = spec.n_states, spec.dim
    if spec.sigma.shape != (n, d, d):
        raise ConfigError(f"sigma must have shape {(n, d, d)}, got {spec.sigma.shape}")
    if spec.z_matrix.shape != (n, d, d) or spec.z_offset.shape != (n, d):
        raise ConfigError("Z parameters have inconsistent shapes")
    if len(spec.z_kind) != n or any(k not in Z_KINDS for k in spec.z_kind):
        raise ConfigError(f"z_kind must list one of {Z_KINDS} per state")
    if not 0.0 <= spec.q_theta < 1.0:
        raise ConfigError("perturbation amplitude theta must lie in [0, 1)")
    off = spec.q_base - np.diag(np.diag(spec.q_base))
    if np.any(off < 0):
        raise ConfigError("base Q has negative off-diagonal rates")


def model_from_spec(spec: BuiltinSpec, name="builtin", config=None) -> SwitchingModel:
    _check_spec(spec)
    sigma = spec.sigma
    d = spec.dim
    zero = np.zeros(d)

    def sigma_fn(x, k):
        return sigma[k]

    def div_fn(x, k):
        return zero

    return SwitchingModel(
        dim=d,
        n_states=spec.n_states,
        sigma=sigma_fn,
        potential=GaussianPotential(spec.v_mean, spec.v_precision),
        Z=spec.z_value,
        q_field=spec.q_matrix,
        div_a=div_fn,
        builtin=spec,
        name=name,
        config=config,
    )


# --------------------------------------------------------------------------
# convenience constructors
# --------------------------------------------------------------------------

def example_spec(a=1.0, b=1.0, theta=0.0, delta=0.5):
    """Two-state, one-dimensional model with ``b_1 = -x`` and ``b_2 = -x + sqrt(2) delta x``."""
    if a <= 0 or b <= 0:
        raise ConfigError("a and b must be positive")
    return BuiltinSpec(
        sigma=np.ones((2, 1, 1)),
        v_mean=np.zeros(1),
        v_precision=np.ones((1, 1)),
        z_kind=("affine", "affine"),
        z_matrix=np.array([[[0.0]], [[delta]]]),
        z_offset=np.zeros((2, 1)),
        q_base=np.array([[-a, a], [b, -b]], dtype=float),
        q_theta=float(theta),
    )


def example_model(a=1.0, b=1.0, theta=0.0, delta=0.5):
    cfg = {"family": {"name": "example", "a": a, "b": b, "theta": theta, "delta": delta}}
    return model_from_spec(example_spec(a, b, theta, delta), name="example", config=cfg)


def ou_model(rate=1.0, dim=1):
    """Single-state Ornstein-Uhlenbeck model ``dX = -rate X dt + sqrt(2) dW``."""
    spec = BuiltinSpec(
        sigma=np.eye(dim)[None],
        v_mean=np.zeros(dim),
        v_precision=rate * np.eye(dim),
        z_kind=("affine",),
        z_matrix=np.zeros((1, dim, dim)),
        z_offset=np.zeros((1, dim)),
        q_base=np.zeros((1, 1)),
    )
    cfg = {"family": {"name": "ou", "rate": rate, "dim": dim}}
    return model_from_spec(spec, name="ou", config=cfg)


def constant_q_model(q, sigma=1.0, dim=1):
    """Z = 0, constant ``Q`` and standard Gaussian potential."""
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    spec = BuiltinSpec(
        sigma=np.broadcast_to(sigma * np.eye(dim), (n, dim, dim)).copy(),
        v_mean=np.zeros(dim),
        v_precision=np.eye(dim),
        z_kind=("affine",) * n,
        z_matrix=np.zeros((n, dim, dim)),
        z_offset=np.zeros((n, dim)),
        q_base=q,
    )
    return model_from_spec(spec, name="constant_q", config=spec_to_config(spec))


def with_z(model, z_kind, z_matrix, z_offset=None):
    """Same model with the singular drift parts replaced."""
    spec = _require_builtin(model)
    n, d = spec.n_states, spec.dim
    kinds = tuple([z_kind] * n) if isinstance(z_kind, str) else tuple(z_kind)
    mat = _as_state_matrices(z_matrix, n, d)
    off = np.zeros((n, d)) if z_offset is None else np.broadcast_to(np.asarray(z_offset, float), (n, d)).copy()
    new = replace(spec, z_kind=kinds, z_matrix=mat, z_offset=off)
    return model_from_spec(new, name=model.name + "+Z", config=spec_to_config(new))


def frozen_state_model(model, k):
    """Single-state model running the state-``k`` diffusion with switching switched off."""
    spec = _require_builtin(model)
    new = BuiltinSpec(
        sigma=spec.sigma[k : k + 1].copy(),
        v_mean=spec.v_mean,
        v_precision=spec.v_precision,
        z_kind=(spec.z_kind[k],),
        z_matrix=spec.z_matrix[k : k + 1].copy(),
        z_offset=spec.z_offset[k : k + 1].copy(),
        q_base=np.zeros((1, 1)),
    )
    return model_from_spec(new, name=f"{model.name}[frozen {k}]", config=spec_to_config(new))


def _require_builtin(model):
    if model.builtin is None:
        raise ConfigError("operation only available for builtin-family models")
    return model.builtin


def _as_state_matrices(value, n, d):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.broadcast_to(arr * np.eye(d), (n, d, d)).copy()
    if arr.ndim == 2:
        return np.broadcast_to(arr, (n, d, d)).copy()
    return arr.reshape(n, d, d).copy()


def q_bounds(model, probe_points=None):
    """Exact envelopes for builtin models, sampled ones otherwise."""
    if model.builtin is not None:
        return model.builtin.q_bounds()
    from .model import default_probes, sampled_q_bounds

    if probe_points is None:
        rng = np.random.default_rng(0)
        lo, hi = model.box()
        probe_points = list(default_probes(model, 101)) + list(rng.uniform(lo, hi, (200, model.dim)))
    return sampled_q_bounds(model.q_field, probe_points)


def default_reference(model):
    """``pi`` from the unperturbed Q (builtin) or from ``Q`` at the potential's mean."""
    if model.builtin is not None:
        q = model.builtin.q_base
    else:
        lo, hi = model.box()
        q = model.q(0.5 * (np.asarray(lo) + np.asarray(hi)))
    if model.n_states == 1:
        pi = np.ones(1)
    else:
        pi = stationary_distribution(q)
    return ReferenceMeasure(pi=pi, potential=model.potential)


def log_sobolev_preset(model):
    """``gamma_k = 2 / (c * lambda_min(a_k))``, ``beta_k = 0`` for Gaussian V with Hess V >= c I."""
    c = model.potential.curvature
    if c is None:
        raise ConfigError("log-Sobolev preset needs a Gaussian potential")
    x0 = np.asarray(model.box()[0]) * 0.0
    gamma = []
    for k in range(model.n_states):
        lam = float(np.linalg.eigvalsh(model.a(x0, k)).min())
        gamma.append(2.0 / (c * lam))
    return np.array(gamma), np.zeros(model.n_states)


# --------------------------------------------------------------------------
# JSON configs
# --------------------------------------------------------------------------

_REGISTRY: dict[str, Callable[[dict], SwitchingModel]] = {}


def register_family(name, factory):
    """Register ``factory(params: dict) -> SwitchingModel`` under ``name``.

    This is the only route for coefficients outside the builtin family.
    """
    _REGISTRY[name] = factory


def _example_factory(params):
    return example_model(
        a=float(params.get("a", 1.0)),
        b=float(params.get("b", 1.0)),
        theta=float(params.get("theta", 0.0)),
        delta=float(params.get("delta", 0.5)),
    )


def _ou_factory(params):
    return ou_model(rate=float(params.get("rate", 1.0)), dim=int(params.get("dim", 1)))


register_family("example", _example_factory)
register_family("ou", _ou_factory)


def _state_list(value, n, what):
    if isinstance(value, list) and len(value) == n and all(isinstance(v, dict) for v in value):
        return value
    if isinstance(value, dict):
        return [value] * n
    raise ConfigError(f"{what} must be an object or a list of {n} objects")


def _parse_sigma(entry, d):
    fam = entry.get("family", "constant")
    if fam != "constant":
        raise ConfigError(f"unknown sigma family {fam!r}")
    m = np.asarray(entry.get("params", {}).get("matrix", 1.0), dtype=float)
    return m * np.eye(d) if m.ndim == 0 else m.reshape(d, d)


def _parse_z(entry, d):
    fam = entry.get("family", "zero")
    params = entry.get("params", {})
    off = np.broadcast_to(np.asarray(params.get("offset", 0.0), dtype=float), (d,)).copy()
    if fam == "zero":
        return "affine", np.zeros((d, d)), np.zeros(d)
    key = {"affine": "matrix", "tanh": "scale"}.get(fam)
    if key is None:
        raise ConfigError(f"unknown Z family {fam!r}")
    m = np.asarray(params.get(key, 0.0), dtype=float)
    m = m * np.eye(d) if m.ndim == 0 else m.reshape(d, d)
    return fam, m, off


def spec_from_config(cfg):
    try:
        d = int(cfg["dim"])
        n = int(cfg["n_states"])
        v = cfg.get("v", {"family": "gaussian", "params": {}})
        if v.get("family", "gaussian") != "gaussian":
            raise ConfigError(f"unknown V family {v.get('family')!r}")
        vp = v.get("params", {})
        mean = np.broadcast_to(np.asarray(vp.get("mean", 0.0), dtype=float), (d,)).copy()
        prec = np.asarray(vp.get("precision", 1.0), dtype=float)
        prec = prec * np.eye(d) if prec.ndim == 0 else prec.reshape(d, d)
        sig = np.array([_parse_sigma(e, d) for e in _state_list(cfg.get("sigma", {}), n, "sigma")])
        zs = [_parse_z(e, d) for e in _state_list(cfg.get("z", {}), n, "z")]
        q = cfg["q"]
        base = np.asarray(q["base"], dtype=float).reshape(n, n)
        pert = q.get("perturbation", {"name": "none"})
        if isinstance(pert, str):
            pert = {"name": pert}
        if pert.get("name", "none") == "none":
            theta = 0.0
        elif pert["name"] == "sin_cos":
            theta = float(pert.get("theta", 0.0))
        else:
            raise ConfigError(f"unknown Q perturbation {pert['name']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed model config: {exc}") from exc
    return BuiltinSpec(
        sigma=sig,
        v_mean=mean,
        v_precision=prec,
        z_kind=tuple(z[0] for z in zs),
        z_matrix=np.array([z[1] for z in zs]),
        z_offset=np.array([z[2] for z in zs]),
        q_base=base,
        q_theta=theta,
    )


def spec_to_config(spec):
    d, n = spec.dim, spec.n_states
    return {
        "dim": d,
        "n_states": n,
        "sigma": [{"family": "constant", "params": {"matrix": spec.sigma[k].tolist()}} for k in range(n)],
        "v": {"family": "gaussian", "params": {"mean": spec.v_mean.tolist(), "precision": spec.v_precision.tolist()}},
        "z": [
            {
                "family": spec.z_kind[k],
                "params": {
                    ("matrix" if spec.z_kind[k] == "affine" else "scale"): spec.z_matrix[k].tolist(),
                    "offset": spec.z_offset[k].tolist(),
                },
            }
            for k in range(n)
        ],
        "q": {
            "base": spec.q_base.tolist(),
            "perturbation": {"name": "sin_cos" if spec.q_theta else "none", "theta": spec.q_theta},
        },
    }


def model_from_config(cfg: dict) -> SwitchingModel:
    if not isinstance(cfg, dict):
        raise ConfigError("model config must be a JSON object")
    fam = cfg.get("family")
    if fam is not None:
        name = fam.get("name") if isinstance(fam, dict) else fam
        if name not in _REGISTRY:
            raise ConfigError(f"unknown model family {name!r}")
        params = fam if isinstance(fam, dict) else {}
        model = _REGISTRY[name]({k: v for k, v in params.items() if k != "name"})
        return replace(model, config=cfg)
    return model_from_spec(spec_from_config(cfg), name=cfg.get("name", "builtin"), config=cfg)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_config(cfg)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_hash(model):
    cfg = model.config if model.config is not None else (
        spec_to_config(model.builtin) if model.builtin is not None else {"name": model.name}
    )
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
