"""Sufficient conditions for existence and uniqueness of an invariant measure.

Two ingredients are checked mechanically:

* exponential integrability ``mu_V(exp(w_k |Z_k|^2)) < inf`` of the
  singular drift parts;
* the M-matrix inequality ``-(K + Qbar) v >= 1`` with
  ``K = diag(1/(2 w_k) - 2/gamma_k)`` and ``Qbar`` the entrywise suprema of
  ``Q(x)`` (diagonal included).

The module also carries the closed-form feasibility region of the two-state
Ornstein-Uhlenbeck example and an a-priori relative entropy bound.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonFiniteBound, NotZMatrix, SingularSystem
from .families import example_spec, log_sobolev_preset, q_bounds
from .model import GaussianPotential, ReferenceMeasure, is_irreducible, validate_model

log = logging.getLogger(__name__)

Z_TOL = 1e-12
GH_NODES = {1: 200, 2: 64, 3: 32}
SEARCH_J = range(-10, 11)
REFINE_STEPS = 50


# --------------------------------------------------------------------------
# containers
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LogSobolevParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if g.shape != b.shape:
            raise DimensionMismatch("gamma and beta must have the same length")
        if np.any(g <= 0) or np.any(b < 0):
            raise ValueError("need gamma_k > 0 and beta_k >= 0")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    def combined(self, pi):
        """``(max_k gamma_k, max_k (beta_k - log pi_k))`` for the pooled inequality."""
        pi = np.asarray(pi, dtype=float)
        return float(self.gamma.max()), float(np.max(self.beta - np.log(pi)))

    @classmethod
    def preset(cls, model):
        gamma, beta = log_sobolev_preset(model)
        return cls(gamma, beta)


@dataclass(frozen=True, eq=False)
class IntegrabilityWeights:
    w: np.ndarray
    moments: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if np.any(w <= 0):
            raise ValueError("weights w_k must be positive")
        object.__setattr__(self, "w", w)
        if self.moments is not None:
            m = np.atleast_1d(np.asarray(self.moments, dtype=float))
            if np.any(m < 1.0 - 1e-9):
                raise ValueError("exponential moments are at least 1")
            object.__setattr__(self, "moments", m)


@dataclass(frozen=True, eq=False)
class MMatrixCertificate:
    K: np.ndarray
    A: np.ndarray
    v: Optional[np.ndarray]
    minors: np.ndarray
    verdict: bool

    def to_dict(self):
        return {
            "K": np.diag(self.K).tolist(),
            "A": self.A.tolist(),
            "v": None if self.v is None else self.v.tolist(),
            "minors": self.minors.tolist(),
            "verdict": self.verdict,
        }


# --------------------------------------------------------------------------
# M-matrix machinery
# --------------------------------------------------------------------------

def build_K(weights, ls: LogSobolevParams):
    w = weights.w if isinstance(weights, IntegrabilityWeights) else np.atleast_1d(np.asarray(weights, float))
    if w.shape != ls.gamma.shape:
        raise DimensionMismatch(f"{w.size} weights for {ls.gamma.size} states")
    with np.errstate(divide="ignore"):
        return np.diag(0.5 / w - 2.0 / ls.gamma)


def leading_minors(A):
    A = np.asarray(A, dtype=float)
    return np.array([np.linalg.det(A[:m, :m]) for m in range(1, A.shape[0] + 1)])


def is_nonsingular_m_matrix(A, tol=Z_TOL):
    """Leading-principal-minor test for a Z-matrix.

    Returns ``(verdict, minors)``.  Raises :class:`NotZMatrix` when an
    off-diagonal entry is positive beyond ``tol * max(1, max|A|)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    off = A - np.diag(np.diag(A))
    if np.any(off > tol * max(1.0, float(np.abs(A).max()))):
        raise NotZMatrix("matrix has positive off-diagonal entries")
    minors = leading_minors(A)
    return bool(np.all(minors > 0)), minors


def solve_condition_vector(K, q_bar) -> MMatrixCertificate:
    """Solve ``-(K + Qbar) v = 1``.

    The certificate carries ``v`` only when the system matrix is a
    nonsingular M-matrix and ``v > 0``; otherwise ``v`` is ``None`` and the
    verdict is false.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    q_bar = np.atleast_2d(np.asarray(q_bar, dtype=float))
    if K.shape != q_bar.shape:
        raise DimensionMismatch("K and Qbar must have the same shape")
    A = -(K + q_bar)
    if not np.all(np.isfinite(A)):
        raise SingularSystem("non-finite entries in -(K + Qbar)")
    is_m, minors = is_nonsingular_m_matrix(A)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise SingularSystem("-(K + Qbar) is singular")
    v = np.linalg.solve(A, np.ones(A.shape[0]))
    ok = is_m and bool(np.all(v > 0))
    return MMatrixCertificate(K=K, A=A, v=v if ok else None, minors=minors, verdict=ok)


def _feasible(w, ls, q_bar):
    try:
        return solve_condition_vector(build_K(w, ls), q_bar)
    except SingularSystem:
        return None


def search_weights(q_bar, ls: LogSobolevParams, w_max):
    """Look for weights ``w_k < w_max_k`` making the M-matrix system feasible.

    The diagonal of ``-(K + Qbar)`` increases with every ``w_k``, so the
    largest admissible weights are the best candidates.  The grid
    ``2^j gamma_k / 4`` gives the starting point; coordinates are then pushed
    towards their supremum (``w_max (1 - 2^-m)``, or doubling when unbounded).

    Returns ``(weights, certificate)``; the certificate is that of the last
    candidate tried when nothing is feasible.
    """
    gamma = ls.gamma
    w_max = np.asarray(w_max, dtype=float)
    n = gamma.size
    w = np.empty(n)
    for k in range(n):
        grid = [2.0**j * gamma[k] / 4 for j in SEARCH_J if 2.0**j * gamma[k] / 4 < w_max[k]]
        w[k] = grid[-1] if grid else 0.5 * w_max[k]
    cert = _feasible(w, ls, q_bar)
    if cert is not None and cert.verdict:
        return w, cert
    for m in range(1, REFINE_STEPS + 1):
        cand = w.copy()
        for k in range(n):
            if math.isinf(w_max[k]):
                cand[k] = max(w[k], 2.0 ** (10 + m) * gamma[k] / 4)
            else:
                cand[k] = max(w[k], w_max[k] * (1.0 - 2.0**-m))
        c = _feasible(cand, ls, q_bar)
        if c is not None:
            cert = c
            if c.verdict:
                return cand, c
    return w, cert


# --------------------------------------------------------------------------
# exponential integrability
# --------------------------------------------------------------------------

def _z_operator(model, k, sigma_inv):
    """``(kind, A, c)`` with ``Z_k(x) = A g(x) + c``, optionally premultiplied by ``sigma_k^-1``."""
    spec = model.builtin
    A = spec.z_matrix[k]
    c = spec.z_offset[k]
    if sigma_inv:
        s_inv = np.linalg.inv(spec.sigma[k])
        A, c = s_inv @ A, s_inv @ c
    return spec.z_kind[k], A, c


def ewz_weight_limit(model, k, sigma_inv=False):
    """Supremum of admissible ``w`` for state ``k``.

    Exact for Gaussian ``V`` with affine ``Z = A x + c``: the moment is finite
    iff ``I - 2 w S^{1/2} A^T A S^{1/2}`` is positive definite, ``S`` the
    covariance.  Bounded ``Z`` (tanh family) gives ``inf``.  For models
    outside the builtin family the limit is unknown and ``inf`` is returned.
    """
    if model.builtin is None or not isinstance(model.potential, GaussianPotential):
        return math.inf
    kind, A, _ = _z_operator(model, k, sigma_inv)
    if kind != "affine":
        return math.inf
    root = np.linalg.cholesky(model.potential.covariance)
    lam = float(np.linalg.eigvalsh(root.T @ A.T @ A @ root).max())
    return math.inf if lam <= 0 else 0.5 / lam


def _gauss_hermite(potential, func, nodes):
    d = potential.dim
    t, wt = np.polynomial.hermite.hermgauss(nodes)
    grids = np.meshgrid(*([t] * d), indexing="ij")
    pts = np.stack(grids, axis=-1).reshape(-1, d)
    wts = np.ones(1)
    for _ in range(d):
        wts = np.multiply.outer(wts, wt).reshape(-1)
    chol = np.linalg.cholesky(potential.covariance)
    x = potential.mean + math.sqrt(2.0) * pts @ chol.T
    return float(np.sum(wts * func(x)) / math.pi ** (d / 2))


def _adaptive_1d(potential, func):
    from scipy.integrate import quad

    lo, hi = potential.default_box()
    val, _ = quad(lambda s: float(func(np.array([[s]]))[0]) * math.exp(float(potential.value(np.array([s])))),
                  float(lo[0]), float(hi[0]), limit=200)
    return val


@dataclass(frozen=True, eq=False)
class EwzResult:
    w: np.ndarray
    moments: np.ndarray
    se: np.ndarray
    divergent: np.ndarray
    method: str

    @property
    def finite(self):
        return bool(np.all(np.isfinite(self.moments)) and not np.any(self.divergent))

    def to_dict(self):
        return {
            "w": self.w.tolist(),
            "moments": [m if math.isfinite(m) else "inf" for m in self.moments.tolist()],
            "se": self.se.tolist(),
            "divergent": self.divergent.tolist(),
            "method": self.method,
        }


def check_ewz(model, weights, method="quadrature", sigma_inv=False, n_samples=200_000, seed=0) -> EwzResult:
    """Estimate ``mu_V(exp(w_k |Z_k|^2))`` for each state.

    ``quadrature`` uses Gauss-Hermite for Gaussian ``V`` and adaptive
    quadrature on the potential's box otherwise (d = 1 only);
    ``monte_carlo`` samples ``mu_V`` and also returns standard errors.
    Divergence is detected analytically for the builtin affine family and
    reported as an infinite moment.
    """
    w = weights.w if isinstance(weights, IntegrabilityWeights) else np.atleast_1d(np.asarray(weights, float))
    n = model.n_states
    if w.size != n:
        raise DimensionMismatch(f"{w.size} weights for {n} states")
    moments = np.empty(n)
    se = np.zeros(n)
    divergent = np.zeros(n, dtype=bool)
    pot = model.potential
    rng = np.random.default_rng(seed)
    samples = None
    for k in range(n):
        if w[k] >= ewz_weight_limit(model, k, sigma_inv):
            moments[k] = math.inf
            se[k] = math.nan
            divergent[k] = True
            continue

        def integrand(x, k=k):
            if model.builtin is not None:
                kind, A, c = _z_operator(model, k, sigma_inv)
                z = (x if kind == "affine" else np.tanh(x)) @ A.T + c
            else:
                z = np.array([_z_eval(model, p, k, sigma_inv) for p in x])
            return np.exp(w[k] * np.sum(z * z, axis=1))

        if method == "quadrature":
            if isinstance(pot, GaussianPotential):
                if pot.dim > 3:
                    raise ValueError("quadrature limited to d <= 3")
                moments[k] = _gauss_hermite(pot, integrand, GH_NODES[pot.dim])
            elif pot.dim == 1:
                moments[k] = _adaptive_1d(pot, integrand)
            else:
                raise ValueError("quadrature for non-Gaussian V limited to d = 1")
        elif method == "monte_carlo":
            if not hasattr(pot, "sample"):
                raise ValueError("monte_carlo needs a sampler for mu_V")
            if samples is None:
                samples = pot.sample(rng, n_samples)
            vals = integrand(samples)
            moments[k] = float(vals.mean())
            se[k] = float(vals.std(ddof=1) / math.sqrt(vals.size))
        else:
            raise ValueError(f"unknown method {method!r}")
        if not math.isfinite(moments[k]):
            divergent[k] = True
    return EwzResult(w=w, moments=moments, se=se, divergent=divergent, method=method)


def _z_eval(model, x, k, sigma_inv):
    z = np.atleast_1d(model.Z(x, k))
    if sigma_inv:
        z = np.linalg.solve(np.atleast_2d(model.sigma(x, k)), z)
    return z


# --------------------------------------------------------------------------
# the two-state example
# --------------------------------------------------------------------------

def example_threshold(a, b, theta):
    return (1 + (1 - theta) * (a + b) - 4 * theta * a * b) / (1 + (1 - theta) * a)


def example_feasible(a, b, theta, delta):
    """Closed-form feasibility: ``delta^2`` strictly below the example threshold."""
    if a <= 0 or b <= 0 or not 0 <= theta < 1:
        raise ValueError("need a, b > 0 and 0 <= theta < 1")
    return bool(delta * delta < example_threshold(a, b, theta))


def example_feasible_search(a, b, theta, delta):
    """Same question answered by weight search plus the M-matrix solve.

    Uses the exact envelopes of the example's Q, ``gamma = (2, 2)``, ``beta = 0``
    and the analytic integrability limit of each state.  Returns
    ``(feasible, weights, certificate)``.
    """
    from .families import model_from_spec

    model = model_from_spec(example_spec(a, b, theta, delta), name="example")
    ls = LogSobolevParams.preset(model)
    w_max = [ewz_weight_limit(model, k) for k in range(2)]
    w, cert = search_weights(model.builtin.q_bounds().q_bar, ls, w_max)
    return bool(cert is not None and cert.verdict), w, cert


# --------------------------------------------------------------------------
# entropy bound
# --------------------------------------------------------------------------

def log_plus(x):
    return math.log(x) if x > 1 else 0.0


def c_tilde_q(c_q, pi_min):
    return c_q * log_plus(c_q) + 2 * (c_q + 1) / math.e - 2 * c_q * math.log(pi_min)


def entropy_bound(ref, bounds, weights, ls: LogSobolevParams, v, moments, variant="log"):
    """A-priori bound on ``sum_k pi_k mu_V(rho_k log rho_k)``.

    ``max_k (v_k / w_k) M_k - log pi_min + Ctilde_Q sum_k v_k + 2 max_k v_k beta_k / gamma_k``
    with ``M_k`` the log-moment (``variant="log"``) or the raw moment
    (``variant="raw"``).
    """
    pi_min = ref.pi_min if isinstance(ref, ReferenceMeasure) else float(ref)
    c_q = bounds.c_q if hasattr(bounds, "c_q") else float(bounds)
    w = weights.w if isinstance(weights, IntegrabilityWeights) else np.atleast_1d(np.asarray(weights, float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    moments = np.atleast_1d(np.asarray(moments, dtype=float))
    inputs = np.concatenate([w, v, moments, ls.gamma, ls.beta, [c_q, pi_min]])
    if not np.all(np.isfinite(inputs)):
        raise NonFiniteBound("entropy bound needs finite moments, weights and rates")
    if variant == "log":
        m = np.log(moments)
    elif variant == "raw":
        m = moments
    else:
        raise ValueError("variant must be 'log' or 'raw'")
    return float(
        np.max(v / w * m)
        - math.log(pi_min)
        + c_tilde_q(c_q, pi_min) * v.sum()
        + 2 * np.max(v * ls.beta / ls.gamma)
    )


# --------------------------------------------------------------------------
# full report
# --------------------------------------------------------------------------

def _example_params(model):
    cfg = model.config or {}
    fam = cfg.get("family")
    if model.name != "example" or not isinstance(fam, dict):
        return None
    return {key: float(fam.get(key, default)) for key, default in
            (("a", 1.0), ("b", 1.0), ("theta", 0.0), ("delta", 0.5))}


def check_conditions(model, weights=None, ls: LogSobolevParams = None, ref: ReferenceMeasure = None,
                     method="quadrature", variant="log", sigma_inv=False, probe_points=None):
    """Evaluate every hypothesis and return ``(passed, report_dict)``.

    Without explicit ``weights`` the search of :func:`search_weights` is run
    against the analytic integrability limits.
    """
    from .families import default_reference

    report = {}
    val = validate_model(model, probe_points, raise_on_error=False)
    report["h1"] = {"passed": val.passed, "min_eigenvalue": val.min_eigenvalue}
    bounds = q_bounds(model, probe_points)
    q_ref = model.builtin.q_base if model.builtin is not None else bounds.q_hat
    irreducible = model.n_states == 1 or is_irreducible(q_ref)
    h2_ok = math.isfinite(bounds.c_q) and irreducible and val.passed
    report["h2"] = {"passed": bool(h2_ok), "c_q": bounds.c_q, "irreducible": bool(irreducible),
                    "bounds": bounds.to_dict()}
    if ls is None:
        ls = LogSobolevParams.preset(model)
    if ref is None:
        ref = default_reference(model)
    w_max = [ewz_weight_limit(model, k, sigma_inv) for k in range(model.n_states)]
    if weights is None:
        w, cert = search_weights(bounds.q_bar, ls, w_max)
    else:
        w = weights.w if isinstance(weights, IntegrabilityWeights) else np.atleast_1d(np.asarray(weights, float))
        try:
            cert = solve_condition_vector(build_K(w, ls), bounds.q_bar)
        except SingularSystem:
            cert = None
    ewz = check_ewz(model, w, method=method, sigma_inv=sigma_inv)
    report["ewz"] = ewz.to_dict()
    report["ewz"]["w_max"] = [x if math.isfinite(x) else "inf" for x in w_max]
    report["ls"] = {"gamma": ls.gamma.tolist(), "beta": ls.beta.tolist()}
    report["m_matrix"] = cert.to_dict() if cert is not None else {"verdict": False, "singular": True}
    m_ok = cert is not None and cert.verdict
    params = _example_params(model)
    if params is not None:
        thr = example_threshold(params["a"], params["b"], params["theta"])
        report["example_region"] = {
            **params,
            "threshold": thr,
            "delta_sq": params["delta"] ** 2,
            "feasible": example_feasible(**params),
        }
    bound = None
    if m_ok and ewz.finite:
        bound = entropy_bound(ref, bounds, w, ls, cert.v, ewz.moments, variant=variant)
    report["entropy_bound"] = bound
    passed = bool(val.passed and h2_ok and ewz.finite and m_ok)
    report["passed"] = passed
    return passed, report
