"""High-to-low prediction from a learned inverse model.

The inverse parameters are converted in closed form to the parameters of
p(x | y), a K-component mixture of affine experts in y. Spatial prediction
couples neighbouring pixels through the Potts prior on the component labels.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch
from .model import InverseModel, log_gaussian_lowrank, spd_inverse
from .potts import NeighborGraph, PottsField, async_sweep, estimate_psi, mean_field_prior

log = logging.getLogger(__name__)


@dataclass
class ForwardModel:
    """Starred parameters; shapes ``c_star`` (K, D), ``Gamma_star`` (K, D, D),
    ``A_star`` (K, L, D), ``b_star`` (K, L), ``Sigma_star`` (K, L, L)."""

    c_star: np.ndarray
    Gamma_star: np.ndarray
    A_star: np.ndarray
    b_star: np.ndarray
    Sigma_star: np.ndarray
    log_weights: np.ndarray
    Lt: int
    # Factors of Gamma_star = diag(sigma2) + A Gamma A^T for low-rank evaluation.
    sigma2: np.ndarray
    A: np.ndarray
    Gamma: np.ndarray

    @property
    def K(self):
        return self.c_star.shape[0]

    @property
    def D(self):
        return self.c_star.shape[1]

    @property
    def L(self):
        return self.b_star.shape[1]


def to_forward(model: InverseModel) -> ForwardModel:
    K, D = model.b.shape
    A = model.A
    c = model.c
    Gamma = model.Gamma
    L = A.shape[2]
    c_star = np.einsum("kdl,kl->kd", A, c) + model.b
    Gamma_star = np.zeros((K, D, D))
    A_star = np.zeros((K, L, D))
    b_star = np.zeros((K, L))
    Sigma_star = np.zeros((K, L, L))
    for k in range(K):
        inv_s = 1.0 / model.sigma2[k]
        Gamma_star[k] = np.diag(model.sigma2[k]) + A[k] @ Gamma[k] @ A[k].T
        G_inv = spd_inverse(Gamma[k], k)
        Sigma_star[k] = spd_inverse(G_inv + (A[k].T * inv_s) @ A[k], k)
        A_star[k] = Sigma_star[k] @ (A[k].T * inv_s)
        b_star[k] = Sigma_star[k] @ (G_inv @ c[k] - (A[k].T * inv_s) @ model.b[k])
    return ForwardModel(c_star, Gamma_star, A_star, b_star, Sigma_star,
                        model.log_weights.copy(), model.dims.Lt,
                        model.sigma2.copy(), A.copy(), Gamma.copy())


def log_lik_y(fm: ForwardModel, Y) -> np.ndarray:
    """N x K matrix of log N(y_n; c*_k, Gamma*_k)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != fm.D:
        raise DimensionMismatch(f"spectra have {Y.shape[1]} bands, model expects {fm.D}")
    return np.column_stack([
        log_gaussian_lowrank(Y, fm.c_star[k], fm.sigma2[k], fm.A[k], fm.Gamma[k], k)
        for k in range(fm.K)
    ])


@dataclass
class ForwardMixture:
    """p(x | y) for one y: weights, affine means and covariances per component."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def mean(self):
        return self.weights @ self.means

    def log_pdf(self, x):
        from .model import log_gaussian
        x = np.atleast_2d(x)
        terms = [np.log(self.weights[k]) + log_gaussian(x, self.means[k], self.covs[k])
                 for k in range(len(self.weights)) if self.weights[k] > 0]
        return logsumexp(np.vstack(terms), axis=0)


def forward_density(fm: ForwardModel, y) -> ForwardMixture:
    y = np.asarray(y, dtype=float).reshape(1, -1)
    w = softmax(log_lik_y(fm, y)[0] + fm.log_weights)
    means = np.einsum("kld,d->kl", fm.A_star, y[0]) + fm.b_star
    return ForwardMixture(w, means, fm.Sigma_star.copy())


def _expert_means(fm, Y):
    return np.einsum("kld,nd->nkl", fm.A_star, Y) + fm.b_star[None]


def predict(fm: ForwardModel, Y, return_weights=False):
    """Posterior mean E[x | y] for each row of ``Y``.

    The first ``fm.Lt`` output columns estimate the observed parameters; any
    trailing columns are latent-coordinate estimates.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    w = softmax(log_lik_y(fm, Y) + fm.log_weights, axis=1)
    x = np.einsum("nk,nkl->nl", w, _expert_means(fm, Y))
    return (x, w) if return_weights else x


@dataclass
class SpatialOptions:
    beta: float | None = None  # None: estimate; otherwise hold fixed at this value
    alpha: str = "estimate"  # "estimate" or "fixed" (learned log mixture weights)
    beta_init: float = 0.0
    beta_max: float = 100.0
    tol: float = 1e-5
    max_sweeps: int = 200
    weights: str = "prior"  # "prior": q_prior * likelihood; "posterior": converged q


@dataclass
class SpatialResult:
    x: np.ndarray
    field: PottsField
    q: np.ndarray
    n_sweeps: int
    converged: bool

    @property
    def labels(self):
        return np.argmax(self.q, axis=1)


def predict_spatial(fm: ForwardModel, Y, graph: NeighborGraph, opts: SpatialOptions | None = None):
    """MRF-regularised prediction over the sites of ``graph``.

    Alternates asynchronous sweeps of the label posterior with re-estimation of
    the Potts parameters, then weights each expert by the converged mean-field
    prior times the spectral likelihood.
    """
    opts = opts or SpatialOptions()
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[0] != graph.n_sites:
        raise DimensionMismatch(f"{Y.shape[0]} spectra for a graph of {graph.n_sites} sites")
    fix_beta = opts.beta is not None
    fix_alpha = opts.alpha == "fixed"
    beta0 = opts.beta if fix_beta else opts.beta_init
    field = PottsField.from_log_weights(fm.log_weights, beta0)

    if fix_beta and beta0 == 0.0 and fix_alpha:
        x, w = predict(fm, Y, return_weights=True)
        return SpatialResult(x, field, w, 0, True)

    log_lik = log_lik_y(fm, Y)
    q = softmax(log_lik + field.alpha, axis=1)
    converged = False
    sweeps = 0
    for sweeps in range(1, opts.max_sweeps + 1):
        delta = async_sweep(log_lik, field, graph, q)
        if not (fix_beta and fix_alpha):
            old = np.concatenate([[field.beta], field.alpha])
            field = estimate_psi(q, graph, field, beta_max=opts.beta_max,
                                 fix_beta=fix_beta, fix_alpha=fix_alpha)
            delta = max(delta, float(np.max(np.abs(np.concatenate([[field.beta], field.alpha]) - old))))
        if delta < opts.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"label field did not converge in {opts.max_sweeps} sweeps",
                      RuntimeWarning, stacklevel=2)

    if opts.weights == "posterior":
        w = q
    else:
        prior = mean_field_prior(q, field, graph)
        with np.errstate(divide="ignore"):
            w = softmax(np.log(prior) + log_lik, axis=1)
    x = np.einsum("nk,nkl->nl", w, _expert_means(fm, Y))
    return SpatialResult(x, field, q, sweeps, converged)


def clamp_proportions(x_hat, bounds=None, Lt=None):
    """Clip observed coordinates to per-coordinate ``(lo, hi)`` bounds.

    ``bounds`` is a sequence of pairs (one per observed coordinate) or a single
    pair applied to all of them. Coordinates at index >= ``Lt`` are latent and
    left untouched.
    """
    x = np.array(x_hat, dtype=float, copy=True)
    if bounds is None:
        return x
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    Lt = x.shape[1] if Lt is None else Lt
    b = np.asarray(bounds, dtype=float)
    if b.shape == (2,):
        b = np.tile(b, (Lt, 1))
    if b.shape != (Lt, 2):
        raise DimensionMismatch(f"bounds shape {b.shape} does not match {Lt} observed coordinates")
    x[:, :Lt] = np.clip(x[:, :Lt], b[:, 0], b[:, 1])
    return x[0] if squeeze else x
