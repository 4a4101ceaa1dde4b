"""Problem objects for state-dependent regime-switching diffusions.

A model on R^d x {0, ..., N-1} is described by per-state diffusion matrices
``sigma_k(x)``, a reference potential ``V`` with ``e^V`` a probability
density, per-state singular drift parts ``Z_k(x)`` and a field of
conservative Q-matrices ``Q(x)``.  The drift is never stored directly; it is
always assembled as ``a_k grad V + div(a_k) + sqrt(2) sigma_k Z_k`` with
``a_k = sigma_k sigma_k^T``.

States are 0-based throughout the package.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateDiffusion,
    DimensionMismatch,
    NegativeRate,
    NonConservativeQ,
    NonFiniteCoefficient,
)

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
CONSERVATIVE_RTOL = 1e-10


# --------------------------------------------------------------------------
# reference potential
# --------------------------------------------------------------------------

class GaussianPotential:
    """``V(x) = c - (x - m)^T P (x - m) / 2`` with ``c`` fixing ``int e^V = 1``."""

    def __init__(self, mean, precision):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.precision = np.atleast_2d(np.asarray(precision, dtype=float))
        d = self.mean.size
        if self.precision.shape != (d, d):
            raise DimensionMismatch("precision must be d x d")
        evals = np.linalg.eigvalsh(self.precision)
        if evals.min() <= 0:
            raise ValueError("precision matrix must be positive definite")
        self.dim = d
        self.curvature = float(evals.min())
        self.covariance = np.linalg.inv(self.precision)
        _, logdet = np.linalg.slogdet(self.precision)
        self.normalization_c = -0.5 * d * math.log(2 * math.pi) + 0.5 * logdet

    def value(self, x):
        y = np.asarray(x, dtype=float) - self.mean
        return self.normalization_c - 0.5 * np.einsum("...i,ij,...j->...", y, self.precision, y)

    def grad(self, x):
        y = np.asarray(x, dtype=float) - self.mean
        return -(y @ self.precision.T)

    def hess(self, x):
        return -self.precision

    def sample(self, rng, n):
        chol = np.linalg.cholesky(self.covariance)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T

    def default_box(self, n_std=8.0):
        half = n_std * np.sqrt(np.diag(self.covariance))
        return self.mean - half, self.mean + half


class CallablePotential:
    """User-supplied potential.  ``value`` must already include the normalising constant."""

    def __init__(self, dim, value, grad, hess=None, box=None):
        self.dim = dim
        self._value = value
        self._grad = grad
        self._hess = hess
        self._box = box
        self.curvature = None

    def value(self, x):
        return self._value(np.asarray(x, dtype=float))

    def grad(self, x):
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)

    def hess(self, x):
        if self._hess is None:
            raise NotImplementedError("no Hessian supplied for this potential")
        return np.asarray(self._hess(np.asarray(x, dtype=float)), dtype=float)

    def default_box(self, n_std=8.0):
        if self._box is None:
            raise ValueError("CallablePotential needs an explicit box")
        lo, hi = self._box
        return np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))


def normalization_integral(potential, box=None, nodes_per_axis=400):
    """Tensor-grid quadrature of ``e^V`` over ``box``.

    Only attempted for d <= 2; for larger dimension the normalisation is
    taken on trust and ``nan`` is returned together with a warning.
    """
    if potential.dim > 2:
        warnings.warn("normalisation of e^V not verified for d >= 3", stacklevel=2)
        return float("nan")
    lo, hi = box if box is not None else potential.default_box()
    lo = np.atleast_1d(lo)
    hi = np.atleast_1d(hi)
    t, w = np.polynomial.legendre.leggauss(nodes_per_axis)
    axes = [0.5 * (h - l) * t + 0.5 * (h + l) for l, h in zip(lo, hi)]
    weights = [0.5 * (h - l) * w for l, h in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, potential.dim)
    wmesh = weights[0]
    for wk in weights[1:]:
        wmesh = np.multiply.outer(wmesh, wk)
    if isinstance(potential, GaussianPotential):
        vals = potential.value(mesh)
    else:
        vals = np.array([float(potential.value(p)) for p in mesh])
    return float(np.sum(np.exp(vals) * wmesh.reshape(-1)))


# --------------------------------------------------------------------------
# Q-matrices
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QMatrixSample:
    entries: np.ndarray
    point: np.ndarray

    @property
    def exit_rates(self):
        q = self.entries
        return q.sum(axis=1) - np.diag(q)


@dataclass(frozen=True, eq=False)
class QMatrixBounds:
    """Entrywise envelopes of ``Q(x)`` over the state space.

    ``q_bar`` holds suprema (diagonal included), ``q_hat`` infima and ``c_q``
    the largest exit rate.  ``exact`` is False when the envelopes come from
    sampling, in which case they are not certified.
    """

    q_bar: np.ndarray
    q_hat: np.ndarray
    c_q: float
    exact: bool

    @property
    def label(self):
        return "exact" if self.exact else "sampled, not certified"

    def to_dict(self):
        return {
            "q_bar": self.q_bar.tolist(),
            "q_hat": self.q_hat.tolist(),
            "c_q": self.c_q,
            "exact": self.exact,
            "label": self.label,
        }


def exit_rates(q):
    q = np.asarray(q, dtype=float)
    return q.sum(axis=-1) - np.diagonal(q, axis1=-2, axis2=-1)


def conservativity_defect(q):
    """Row sums of ``q`` scaled by the tolerance reference ``max(1, max|q_ij|)``."""
    q = np.asarray(q, dtype=float)
    return np.abs(q.sum(axis=1)) / max(1.0, float(np.abs(q).max()))


def sampled_q_bounds(q_field, points):
    """Envelope estimate of ``Q(x)`` from a finite set of evaluation points."""
    qs = np.array([q_field(np.atleast_1d(p)) for p in points])
    return QMatrixBounds(
        q_bar=qs.max(axis=0),
        q_hat=qs.min(axis=0),
        c_q=float(exit_rates(qs).max()),
        exact=False,
    )


def stationary_distribution(q):
    """Invariant probability vector ``pi`` with ``pi Q = 0`` of an irreducible Q-matrix."""
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    system = np.vstack([q.T, np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return pi


def is_irreducible(rates):
    """True iff the directed graph with edges ``i -> j`` where ``rates[i, j] > 0`` is strongly connected."""
    from scipy.sparse.csgraph import connected_components

    adj = (np.asarray(rates) > 0).astype(int)
    np.fill_diagonal(adj, 0)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1


# --------------------------------------------------------------------------
# reference measure
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceMeasure:
    """The product measure ``pi_k e^{V(x)} dx`` on R^d x S."""

    pi: np.ndarray
    potential: object

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"pi must be a positive probability vector, got {pi}")
        object.__setattr__(self, "pi", pi)

    @property
    def pi_min(self):
        return float(self.pi.min())


def reference_density(ref, x, k):
    return float(ref.pi[k] * math.exp(float(ref.potential.value(np.atleast_1d(x)))))


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SwitchingModel:
    """Full description of a regime-switching diffusion.

    Parameters
    ----------
    dim, n_states : int
    sigma : callable ``(x, k) -> (d, d) array``
    potential : GaussianPotential or CallablePotential
    Z : callable ``(x, k) -> (d,) array``, the singular drift part
    q_field : callable ``x -> (N, N) array``
    div_a : optional callable ``(x, k) -> (d,)``; finite differences otherwise
    builtin : optional ``BuiltinSpec`` enabling the compiled simulation kernel
    """

    dim: int
    n_states: int
    sigma: Callable
    potential: object
    Z: Callable
    q_field: Callable
    div_a: Optional[Callable] = None
    builtin: Optional[object] = None
    name: str = "custom"
    config: Optional[dict] = field(default=None, repr=False)

    def a(self, x, k):
        s = np.atleast_2d(self.sigma(np.atleast_1d(x), k))
        return s @ s.T

    def q(self, x):
        return np.asarray(self.q_field(np.atleast_1d(np.asarray(x, dtype=float))), dtype=float)

    def q_sample(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return QMatrixSample(self.q(x), x)

    def box(self):
        return self.potential.default_box()


def fd_step(x):
    return 1e-5 * max(1.0, float(np.linalg.norm(x)))


def div_a(model, x, k):
    """``div(a_k)_l = sum_i d_i a_k^{il}``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if model.div_a is not None:
        return np.asarray(model.div_a(x, k), dtype=float)
    h = fd_step(x)
    out = np.zeros(model.dim)
    for i in range(model.dim):
        e = np.zeros(model.dim)
        e[i] = h
        out += (model.a(x + e, k)[i] - model.a(x - e, k)[i]) / (2 * h)
    return out


def _finite(name, value):
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise NonFiniteCoefficient(f"{name} returned a non-finite value: {value}")
    return value


def reference_drift(model, x, k):
    """The ``Z^0_k`` part ``a_k grad V + div(a_k)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise NonFiniteCoefficient(f"non-finite position {x}")
    a = _finite("sigma", model.a(x, k))
    gv = _finite("grad V", model.potential.grad(x))
    return a @ gv + _finite("div(a)", div_a(model, x, k))


def drift(model, x, k):
    """Full drift ``a_k grad V + div(a_k) + sqrt(2) sigma_k Z_k`` at ``(x, k)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = _finite("sigma", np.atleast_2d(model.sigma(x, k)))
    z = _finite("Z", np.atleast_1d(model.Z(x, k)))
    return reference_drift(model, x, k) + SQRT2 * (s @ z)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass
class ProbeResult:
    point: np.ndarray
    min_eigenvalues: np.ndarray
    row_sum_defect: np.ndarray
    negative_rates: list

    def ok(self):
        return (
            bool(np.all(self.min_eigenvalues > 0))
            and bool(np.all(self.row_sum_defect <= CONSERVATIVE_RTOL))
            and not self.negative_rates
        )


@dataclass
class ValidationReport:
    probes: list
    normalization: float

    @property
    def passed(self):
        return all(p.ok() for p in self.probes)

    @property
    def min_eigenvalue(self):
        return float(min(p.min_eigenvalues.min() for p in self.probes))

    def raise_for_errors(self):
        for p in self.probes:
            if np.any(p.row_sum_defect > CONSERVATIVE_RTOL):
                raise NonConservativeQ(
                    f"Q({p.point.tolist()}) row sums deviate from zero: {p.row_sum_defect.tolist()}"
                )
            if p.negative_rates:
                raise NegativeRate(f"negative off-diagonal rates at {p.point.tolist()}: {p.negative_rates}")
            if np.any(p.min_eigenvalues <= 0):
                raise DegenerateDiffusion(
                    f"a_k({p.point.tolist()}) not positive definite: {p.min_eigenvalues.tolist()}"
                )

    def to_dict(self):
        return {
            "passed": self.passed,
            "normalization": self.normalization,
            "probes": [
                {
                    "point": p.point.tolist(),
                    "min_eigenvalues": p.min_eigenvalues.tolist(),
                    "row_sum_defect": p.row_sum_defect.tolist(),
                    "negative_rates": p.negative_rates,
                }
                for p in self.probes
            ],
        }


def default_probes(model, n=21):
    lo, hi = model.box()
    lo = np.atleast_1d(lo) / 2
    hi = np.atleast_1d(hi) / 2
    ts = np.linspace(0.0, 1.0, n)
    return [lo + t * (hi - lo) for t in ts]


def validate_model(model, probe_points: Sequence = None, raise_on_error=True, check_normalization=True):
    """Check (H1)-(H2)-type structure at a finite set of probe points.

    Builds a full report first; with ``raise_on_error`` the first violated
    category is raised (conservativity, then negative rates, then degeneracy).
    """
    if probe_points is None:
        probe_points = default_probes(model)
    probe_points = [np.atleast_1d(np.asarray(p, dtype=float)) for p in probe_points]
    if not probe_points:
        raise ValueError("probe_points must be non-empty")
    probes = []
    for x in probe_points:
        if x.shape != (model.dim,):
            raise DimensionMismatch(f"probe {x} has wrong dimension")
        eigs = np.array([np.linalg.eigvalsh(model.a(x, k)).min() for k in range(model.n_states)])
        q = model.q(x)
        if q.shape != (model.n_states, model.n_states):
            raise DimensionMismatch(f"Q(x) has shape {q.shape}")
        neg = [
            (i, j, float(q[i, j]))
            for i in range(model.n_states)
            for j in range(model.n_states)
            if i != j and q[i, j] < 0
        ]
        probes.append(ProbeResult(x, eigs, conservativity_defect(q), neg))
    norm = normalization_integral(model.potential) if check_normalization else float("nan")
    report = ValidationReport(probes, norm)
    if raise_on_error:
        report.raise_for_errors()
    return report
