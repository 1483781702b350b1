"""Potts prior on component labels: neighbourhood graphs, energy, and the
mean-field surrogate used to estimate the field parameters (alpha, beta).

The surrogate objective maximised over psi is the mean-field pseudo
log-likelihood of the soft labelling ``q``::

    f(psi) = sum_n [ sum_k q_nk (alpha_k + beta s_nk) - log sum_l exp(alpha_l + beta s_nl) ]

with ``s_nk = sum_{m in nbr(n)} q_mk``. It is concave in psi and vanishes in
gradient exactly when the mean-field prior reproduces ``q``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch, InvalidLabel, NonFinite, ParseError

log = logging.getLogger(__name__)

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected graph over sites stored in CSR form (``indptr``, ``indices``)."""

    n_sites: int
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, n_sites, edges):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n_sites):
            raise ValueError("edge endpoint out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        both = np.vstack([edges, edges[:, ::-1]])
        adj = sp.coo_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])),
                            shape=(n_sites, n_sites)).tocsr()
        adj.sum_duplicates()
        adj.sort_indices()
        return cls(n_sites, adj.indptr.astype(np.int64), adj.indices.astype(np.int64))

    @classmethod
    def lattice(cls, height, width, connectivity=8):
        """Raster-ordered image lattice; site index = row * width + col."""
        if connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        idx = np.arange(height * width).reshape(height, width)
        pairs = [(idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])]
        if connectivity == 8:
            pairs += [(idx[:-1, :-1], idx[1:, 1:]), (idx[:-1, 1:], idx[1:, :-1])]
        edges = np.vstack([np.column_stack([a.ravel(), b.ravel()]) for a, b in pairs])
        return cls.from_edges(height * width, edges)

    @classmethod
    def isolated(cls, n_sites):
        return cls(n_sites, np.zeros(n_sites + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @classmethod
    def load_edge_list(cls, path, n_sites=None):
        """Read ``u v`` pairs (0-based), one per line; ``#`` starts a comment."""
        edges = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError("edge line must hold two integers", row=lineno)
                try:
                    edges.append((int(parts[0]), int(parts[1])))
                except ValueError:
                    raise ParseError("edge endpoints must be integers", row=lineno) from None
        edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        if n_sites is None:
            n_sites = int(edges.max()) + 1 if edges.size else 0
        return cls.from_edges(n_sites, edges)

    def neighbors(self, n):
        return self.indices[self.indptr[n]:self.indptr[n + 1]]

    @property
    def adjacency(self):
        """Per-site neighbour index arrays."""
        return [self.neighbors(n) for n in range(self.n_sites)]

    @property
    def degree(self):
        return np.diff(self.indptr)

    @property
    def n_edges(self):
        return len(self.indices) // 2

    @cached_property
    def _matrix(self):
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_sites, self.n_sites))

    def matrix(self):
        return self._matrix

    def neighbor_sum(self, q):
        """s[n] = sum over neighbours m of q[m]."""
        return self._matrix @ q


@dataclass
class PottsField:
    alpha: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).copy()
        self.alpha -= self.alpha[0]
        self.beta = float(self.beta)
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    @property
    def K(self):
        return len(self.alpha)

    @classmethod
    def from_log_weights(cls, log_weights, beta=0.0):
        return cls(np.asarray(log_weights) - log_weights[0], beta)


def potts_energy(z, field: PottsField, graph: NeighborGraph) -> float:
    """H(z) = sum_n alpha_{z_n} + beta/2 sum_n sum_{m in nbr(n)} [z_n == z_m].

    Labels are 1-based as in the usual Potts notation.
    """
    z = np.asarray(z)
    if z.shape != (graph.n_sites,):
        raise DimensionMismatch(f"labelling has {z.size} sites, graph has {graph.n_sites}")
    if np.any(z < 1) or np.any(z > field.K) or not np.all(z == np.round(z)):
        raise InvalidLabel(f"labels must lie in 1..{field.K}")
    z0 = z.astype(np.int64) - 1
    src = np.repeat(np.arange(graph.n_sites), graph.degree)
    agree = np.count_nonzero(z0[src] == z0[graph.indices])
    return float(np.sum(field.alpha[z0]) + 0.5 * field.beta * agree)


def _exponent(q, field, graph, s=None):
    if s is None:
        s = graph.neighbor_sum(q)
    return field.alpha[None, :] + field.beta * s, s


def mean_field_prior(q, field: PottsField, graph: NeighborGraph) -> np.ndarray:
    """q_prior[n, k] proportional to exp(alpha_k + beta * sum_{m in nbr(n)} q[m, k])."""
    q = _check_q(q, field, graph)
    a, _ = _exponent(q, field, graph)
    return softmax(a, axis=1)


def psi_objective(q, field: PottsField, graph: NeighborGraph, s=None) -> float:
    q = _check_q(q, field, graph)
    a, _ = _exponent(q, field, graph, s)
    return float(np.sum(q * a) - np.sum(logsumexp(a, axis=1)))


def psi_gradient(q, field: PottsField, graph: NeighborGraph, s=None) -> np.ndarray:
    """Gradient of :func:`psi_objective` ordered as (beta, alpha_2, ..., alpha_K)."""
    q = _check_q(q, field, graph)
    a, s = _exponent(q, field, graph, s)
    diff = q - softmax(a, axis=1)
    return np.concatenate([[np.sum(s * diff)], diff[:, 1:].sum(axis=0)])


def _check_q(q, field, graph):
    q = np.asarray(q, dtype=float)
    if q.shape != (graph.n_sites, field.K):
        raise DimensionMismatch(f"q has shape {q.shape}, expected {(graph.n_sites, field.K)}")
    return q


def _pack(field):
    return np.concatenate([[field.beta], field.alpha[1:]])


def _unpack(x):
    return PottsField(np.concatenate([[0.0], x[1:]]), max(float(x[0]), 0.0))


def psi_hessian(q, field: PottsField, graph: NeighborGraph, s=None) -> np.ndarray:
    """Hessian of :func:`psi_objective` in the (beta, alpha_2..alpha_K) ordering.

    Equals minus the summed per-site covariance, under the mean-field prior, of
    the sufficient statistics (s_nk, [k == 2], ..., [k == K]).
    """
    q = _check_q(q, field, graph)
    a, s = _exponent(q, field, graph, s)
    p = softmax(a, axis=1)
    K = field.K
    ps = p * s
    Es = ps.sum(axis=1)
    H = np.empty((K, K))
    H[0, 0] = np.sum(ps * s) - np.sum(Es * Es)
    H[0, 1:] = H[1:, 0] = ps[:, 1:].sum(axis=0) - Es @ p[:, 1:]
    H[1:, 1:] = np.diag(p[:, 1:].sum(axis=0)) - p[:, 1:].T @ p[:, 1:]
    return -H


def estimate_psi(q, graph: NeighborGraph, init: PottsField, *, beta_max=100.0,
                 fix_beta=False, fix_alpha=False, tol=1e-6, max_iter=500,
                 return_trace=False):
    """Maximise the surrogate objective over (beta, alpha_2..alpha_K).

    Projected Newton ascent with Armijo backtracking (falling back to the
    gradient direction when the Newton step is not an ascent direction); beta
    is kept in [0, beta_max] and alpha_1 at 0. Stops when the projected
    gradient's sup-norm falls below ``tol``.
    """
    q = _check_q(q, init, graph)
    s = graph.neighbor_sum(q)
    free = np.ones(init.K, dtype=bool)
    if fix_beta:
        free[0] = False
    if fix_alpha:
        free[1:] = False

    x = _pack(init)
    x[0] = min(max(x[0], 0.0), beta_max)
    if free[0] and graph.n_edges and _beta_unbounded(q, s):
        warnings.warn("labelling is hard and spatially homogeneous; beta set to beta_max",
                      RuntimeWarning, stacklevel=2)
        x[0] = beta_max
        free[0] = False

    def fun(x):
        return psi_objective(q, _unpack(x), graph, s)

    def active(x, g):
        act = free.copy()
        if act[0] and ((x[0] <= 0.0 and g[0] < 0) or (x[0] >= beta_max and g[0] > 0)):
            act[0] = False
        return act

    f = fun(x)
    trace = [f]
    for _ in range(max_iter):
        if not np.isfinite(f):
            raise NonFinite("psi objective is not finite")
        g = psi_gradient(q, _unpack(x), graph, s)
        act = active(x, g)
        if not act.any() or np.max(np.abs(g[act])) < tol:
            break
        idx = np.flatnonzero(act)
        H = psi_hessian(q, _unpack(x), graph, s)[np.ix_(idx, idx)]
        direction = np.zeros_like(x)
        try:
            ridge = 1e-12 * max(1.0, np.max(np.abs(np.diag(H))))
            direction[idx] = np.linalg.solve(-H + ridge * np.eye(len(idx)), g[idx])
        except np.linalg.LinAlgError:
            direction[idx] = g[idx]
        if not np.dot(direction, g) > 0:
            direction = np.where(act, g, 0.0)
        step = 1.0
        while True:
            x_new = x + step * direction
            x_new[0] = min(max(x_new[0], 0.0), beta_max)
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * np.dot(g, x_new - x):
                break
            step *= 0.5
            if step < 1e-12:
                x_new, f_new = x, f
                break
        if x_new is x or f_new == f:
            break
        x, f = x_new, f_new
        trace.append(f)
    else:
        log.debug("estimate_psi stopped at max_iter=%d", max_iter)
    if x[0] >= beta_max and free[0]:
        warnings.warn(f"beta reached its upper bound {beta_max}", RuntimeWarning, stacklevel=2)
    out = _unpack(x)
    return (out, trace) if return_trace else out


def _beta_unbounded(q, s):
    # The beta-derivative sum_n sum_k s_nk (q_nk - p_nk) stays positive for every
    # beta exactly when each site already puts all its mass on a best-supported label.
    return bool(np.all(np.sum(q * s, axis=1) >= s.max(axis=1) - 1e-12) and np.any(s > 0)
                and np.all(np.isin(q, (0.0, 1.0))))


# --- asynchronous mean-field sweep ----------------------------------------

def _sweep_py(log_lik, alpha, beta, indptr, indices, q):
    N, K = log_lik.shape
    delta = 0.0
    for n in range(N):
        a = log_lik[n] + alpha
        nb = indices[indptr[n]:indptr[n + 1]]
        if nb.size:
            a = a + beta * q[nb].sum(axis=0)
        new = softmax(a)
        delta = max(delta, float(np.max(np.abs(new - q[n]))))
        q[n] = new
    return delta


if njit is not None:
    @njit(cache=True)
    def _sweep_nb(log_lik, alpha, beta, indptr, indices, q):
        N, K = log_lik.shape
        a = np.empty(K)
        delta = 0.0
        for n in range(N):
            for k in range(K):
                a[k] = log_lik[n, k] + alpha[k]
            for j in range(indptr[n], indptr[n + 1]):
                m = indices[j]
                for k in range(K):
                    a[k] += beta * q[m, k]
            mx = a[0]
            for k in range(1, K):
                if a[k] > mx:
                    mx = a[k]
            tot = 0.0
            for k in range(K):
                a[k] = np.exp(a[k] - mx)
                tot += a[k]
            for k in range(K):
                v = a[k] / tot
                d = abs(v - q[n, k])
                if d > delta:
                    delta = d
                q[n, k] = v
        return delta
else:  # pragma: no cover
    _sweep_nb = None


def async_sweep(log_lik, field: PottsField, graph: NeighborGraph, q):
    """One raster-order Gauss-Seidel pass of the mean-field label update, in place.

    Returns the largest absolute change of any q entry.
    """
    fn = _sweep_nb if _sweep_nb is not None else _sweep_py
    return float(fn(np.ascontiguousarray(log_lik, dtype=float), field.alpha, field.beta,
                    graph.indptr, graph.indices, q))
