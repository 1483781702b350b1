"""Variational EM for hybrid GLLiM with an optional Potts prior on labels.

With ``beta`` fixed at 0 the E-steps are exact and the procedure is the
standard hGLLiM EM; with ``Lw = 0`` as well it is the EM of a mixture of
linear experts with Gaussian gating on the regressors.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, EmptyComponent, NonFinite
from .model import COVARIANCE_MODES, InverseModel, cholesky, log_lik_matrix, spd_inverse
from .potts import NeighborGraph, PottsField, async_sweep, estimate_psi, psi_objective

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 5
    Lw: int = 0
    max_iter: int = 200
    rel_tol: float = 1e-7
    n_restarts: int = 5
    seed: int = 0
    beta_mode: str = "fixed"  # "fixed" or "estimated"
    beta: float = 0.0  # value used when beta_mode == "fixed", start value otherwise
    beta_max: float = 100.0
    covariance_mode: str = "isotropic"
    init_strategy: str = "kmeans"
    sigma2_floor: float = 1e-8  # relative to the mean per-band variance of Y

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.Lw < 0:
            raise ConfigError("Lw must be >= 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise ConfigError("rel_tol must be > 0")
        if self.n_restarts < 1:
            raise ConfigError("n_restarts must be >= 1")
        if self.beta_mode not in ("fixed", "estimated"):
            raise ConfigError(f"unknown beta_mode {self.beta_mode!r}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ConfigError(f"unknown covariance_mode {self.covariance_mode!r}")
        if self.init_strategy not in ("kmeans", "random"):
            raise ConfigError(f"unknown init_strategy {self.init_strategy!r}")

    @property
    def spatial(self):
        return self.beta_mode == "estimated" or self.beta > 0

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        """Load from a JSON object whose keys are field names."""
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LatentWStats:
    mu: np.ndarray  # (N, K, Lw)
    S: np.ndarray  # (K, Lw, Lw)


@dataclass
class TrainReport:
    objective: list
    model: InverseModel
    field: PottsField
    q: np.ndarray
    n_iter: int
    restart: int
    converged: bool
    restart_objectives: list = field(default_factory=list)
    seconds: float = 0.0
    n_reinit: int = 0

    @property
    def final_objective(self):
        return self.objective[-1]

    def to_json(self, config: TrainConfig | None = None):
        w = np.exp(self.model.log_weights)
        doc = {
            "objective": [float(v) for v in self.objective],
            "n_iter": self.n_iter,
            "restart": self.restart,
            "restart_objectives": [float(v) for v in self.restart_objectives],
            "converged": self.converged,
            "seconds": self.seconds,
            "n_reinit": self.n_reinit,
            "alpha": self.field.alpha.tolist(),
            "beta": self.field.beta,
            "weights": w.tolist(),
            "surviving_components": int(np.sum(w * self.q.shape[0] >= 1.0)),
        }
        if config is not None:
            doc["config"] = asdict(config)
        return json.dumps(doc, indent=2)


# --- E-steps --------------------------------------------------------------

def e_step_z(model: InverseModel, field: PottsField | None, graph: NeighborGraph | None,
             Y, T, q_prev=None, log_lik=None):
    """Variational label posterior.

    Without interaction (no graph, or beta = 0) this is the exact posterior
    softmax(log p(y, t | k) + alpha). Otherwise one asynchronous raster-order
    sweep starting from ``q_prev`` is performed.
    """
    if log_lik is None:
        log_lik = log_lik_matrix(model, Y, T)
    if field is None:
        field = PottsField.from_log_weights(model.log_weights)
    if graph is None or field.beta == 0.0 or graph.n_edges == 0:
        return softmax(log_lik + field.alpha, axis=1)
    if q_prev is None:
        q = softmax(log_lik + field.alpha, axis=1)
    else:
        q = np.array(q_prev, dtype=float, copy=True)
    async_sweep(log_lik, field, graph, q)
    return q


def e_step_w(model: InverseModel, Y, T) -> LatentWStats:
    """Gaussian posterior of the latent block given (y, t, Z=k)."""
    Y = np.atleast_2d(Y)
    N = Y.shape[0]
    K, D, Lw = model.A_w.shape
    T = np.asarray(T, dtype=float).reshape(N, -1)
    mu = np.zeros((N, K, Lw))
    S = np.zeros((K, Lw, Lw))
    if Lw == 0:
        return LatentWStats(mu, S)
    for k in range(K):
        Aw = model.A_w[k]
        inv_s = 1.0 / model.sigma2[k]
        G_inv = spd_inverse(model.Gamma_w[k], k)
        S[k] = spd_inverse(G_inv + (Aw.T * inv_s) @ Aw, k)
        resid = Y - T @ model.A_t[k].T - model.b[k]
        mu[:, k, :] = ((resid * inv_s) @ Aw + G_inv @ model.c_w[k]) @ S[k].T
    return LatentWStats(mu, S)


# --- M-step ---------------------------------------------------------------

def m_step_theta(q, wstats: LatentWStats, Y, T, cfg: TrainConfig, sigma2_floor=0.0,
                 log_lik=None, prev: InverseModel | None = None):
    """Closed-form weighted updates of (pi, c, Gamma, A, b, Sigma).

    Components whose responsibility mass falls below ``K * 1e-8`` raise
    :class:`EmptyComponent` unless ``prev`` and ``log_lik`` are supplied, in
    which case they are reinitialised at the worst-fitted data point.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N, D = Y.shape
    T = np.asarray(T, dtype=float).reshape(N, -1)
    K = q.shape[1]
    Lt = T.shape[1]
    Lw = wstats.mu.shape[2]
    L = Lt + Lw

    mass = q.sum(axis=0)
    empty = np.flatnonzero(mass < K * 1e-8)
    if empty.size and (prev is None or log_lik is None):
        raise EmptyComponent(int(empty[0]))

    c_t = np.zeros((K, Lt))
    c_w = np.zeros((K, Lw))
    G_t = np.zeros((K, Lt, Lt))
    G_w = np.zeros((K, Lw, Lw))
    A = np.zeros((K, D, L))
    b = np.zeros((K, D))
    num = np.zeros((K, D))  # weighted residual power per band, incl. trace term

    for k in range(K):
        if k in empty:
            continue
        r = q[:, k]
        rk = mass[k]
        X = np.hstack([T, wstats.mu[:, k, :]])
        xbar = r @ X / rk
        ybar = r @ Y / rk
        Xc = X - xbar
        Yc = Y - ybar
        Sxx = (Xc * r[:, None]).T @ Xc / rk
        Sw = wstats.S[k]
        c_t[k], c_w[k] = xbar[:Lt], xbar[Lt:]
        G_t[k] = Sxx[:Lt, :Lt]
        G_w[k] = Sxx[Lt:, Lt:] + Sw
        Mxx = Sxx.copy()
        Mxx[Lt:, Lt:] += Sw
        Syx = (Yc * r[:, None]).T @ Xc / rk
        if L:
            try:
                A[k] = np.linalg.solve(Mxx, Syx.T).T
            except np.linalg.LinAlgError:
                A[k] = Syx @ np.linalg.pinv(Mxx)
        b[k] = ybar - A[k] @ xbar
        R = Y - X @ A[k].T - b[k]
        Aw = A[k][:, Lt:]
        num[k] = r @ (R * R) + rk * np.einsum("dl,lm,dm->d", Aw, Sw, Aw)

    mode = cfg.covariance_mode
    if mode == "isotropic":
        s2 = num.sum(axis=1) / (D * np.maximum(mass, 1e-300))
        sigma2 = np.repeat(s2[:, None], D, axis=1)
    elif mode == "equal":
        s2 = num.sum() / (D * mass.sum())
        sigma2 = np.full((K, D), s2)
    else:
        sigma2 = num / np.maximum(mass, 1e-300)[:, None]
    sigma2 = np.maximum(sigma2, sigma2_floor)

    log_w = np.log(np.maximum(mass, 1e-300)) - np.log(mass.sum())
    if empty.size:
        _reinit_empty(empty, c_t, c_w, G_t, G_w, A, b, sigma2, log_w, Y, T, log_lik, prev, mass)
        log_w = log_w - logsumexp(log_w)
    return InverseModel(c_t, c_w, G_t, G_w, A[:, :, :Lt].copy(), A[:, :, Lt:].copy(), b,
                        sigma2, log_w, mode)


def _reinit_empty(empty, c_t, c_w, G_t, G_w, A, b, sigma2, log_w, Y, T, log_lik, prev, mass):
    N = Y.shape[0]
    Lt = T.shape[1]
    fit = logsumexp(log_lik + prev.log_weights, axis=1)
    order = np.argsort(fit, kind="stable")
    donor = int(np.argmax(mass))
    for i, k in enumerate(empty):
        n = int(order[i % N])
        warnings.warn(f"component {k} emptied; reinitialised at data point {n}", RuntimeWarning,
                      stacklevel=3)
        c_t[k] = T[n]
        c_w[k] = c_w[donor]
        G_t[k] = G_t[donor]
        G_w[k] = G_w[donor]
        A[k] = A[donor]
        b[k] = Y[n] - A[k][:, :Lt] @ T[n] - A[k][:, Lt:] @ c_w[k]
        sigma2[k] = sigma2[donor]
        log_w[k] = -np.log(N)


# --- objectives -----------------------------------------------------------

def free_energy(q, log_lik, field: PottsField, graph: NeighborGraph):
    """Mean-field free energy with the surrogate Potts normaliser."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(q > 0, q * np.log(q), 0.0))
    return float(np.sum(q * log_lik) + psi_objective(q, field, graph) + ent)


# --- initialisation -------------------------------------------------------

def _initial_responsibilities(Y, T, cfg, rng):
    N = Y.shape[0]
    K = cfg.K
    if cfg.init_strategy == "random":
        return rng.dirichlet(np.ones(K), size=N)
    from sklearn.cluster import KMeans

    L = T.shape[1] + cfg.Lw
    Yc = Y - Y.mean(axis=0)
    n_comp = min(max(L, 1), Y.shape[1])
    _, _, Vt = np.linalg.svd(Yc, full_matrices=False)
    feats = np.hstack([T, Yc @ Vt[:n_comp].T])
    sd = feats.std(axis=0)
    feats = (feats - feats.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    labels = KMeans(n_clusters=K, n_init=1, random_state=int(rng.integers(2**31 - 1))).fit_predict(feats)
    q = np.zeros((N, K))
    q[np.arange(N), labels] = 1.0
    return q


def _initial_wstats(q, Y, T, Lw, rng):
    """Latent means from within-component residual principal components.

    Starting from zero means would make the latent block a fixed point of EM
    (A_w = 0 forever), so the latent coordinates are seeded with standardised
    PCA scores of the residual of y after regressing on t.
    """
    N, D = Y.shape
    K = q.shape[1]
    mu = np.zeros((N, K, Lw))
    S = np.zeros((K, Lw, Lw))
    if Lw == 0:
        return LatentWStats(mu, S)
    X1 = np.hstack([T, np.ones((N, 1))])
    for k in range(K):
        r = q[:, k]
        rk = r.sum()
        if rk < X1.shape[1] + Lw:
            mu[:, k, :] = rng.standard_normal((N, Lw))
            continue
        sw = np.sqrt(r)[:, None]
        coef, *_ = np.linalg.lstsq(X1 * sw, Y * sw, rcond=None)
        R = Y - X1 @ coef
        Rbar = r @ R / rk
        _, _, Vt = np.linalg.svd((R - Rbar) * sw, full_matrices=False)
        scores = (R - Rbar) @ Vt[:Lw].T
        sd = np.sqrt(r @ scores**2 / rk)
        mu[:, k, :] = scores / np.where(sd > 0, sd, 1.0)
    return LatentWStats(mu, S)


# --- driver ---------------------------------------------------------------

def train(Y, T, graph: NeighborGraph | None = None, cfg: TrainConfig | None = None,
          init_q=None) -> TrainReport:
    """Fit the model by (variational) EM, keeping the best of ``cfg.n_restarts`` runs."""
    cfg = cfg or TrainConfig()
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N = Y.shape[0]
    T = np.asarray(T, dtype=float).reshape(N, -1)
    if N <= cfg.K:
        raise ConfigError(f"need more samples (N={N}) than components (K={cfg.K})")
    if cfg.spatial and graph is None:
        raise ConfigError("a neighbourhood graph is required when beta is not fixed at 0")
    if graph is not None and graph.n_sites != N:
        raise ConfigError(f"graph has {graph.n_sites} sites but data has {N} rows")

    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts if init_q is None else 1)
    best = None
    objectives = []
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        q0 = _initial_responsibilities(Y, T, cfg, rng) if init_q is None else np.asarray(init_q, float)
        try:
            rep = _run(Y, T, graph, cfg, q0, rng)
        except (NonFinite, np.linalg.LinAlgError, EmptyComponent) as exc:
            if len(seeds) == 1:
                raise
            log.warning("restart %d failed: %s", r, exc)
            objectives.append(float("nan"))
            continue
        rep.restart = r
        objectives.append(rep.final_objective)
        log.info("restart %d: objective %.6f after %d iterations", r, rep.final_objective, rep.n_iter)
        if best is None or rep.final_objective > best.final_objective:
            best = rep
    if best is None:
        raise NonFinite("every restart failed")
    best.restart_objectives = objectives
    best.seconds = time.perf_counter() - t0
    return best


def _run(Y, T, graph, cfg, q0, rng):
    N, D = Y.shape
    floor = cfg.sigma2_floor * float(np.mean(Y.var(axis=0)))
    if floor <= 0:
        floor = cfg.sigma2_floor
    spatial = cfg.spatial and graph is not None
    wstats = _initial_wstats(q0, Y, T, cfg.Lw, rng)
    model = m_step_theta(q0, wstats, Y, T, cfg, floor)
    field = PottsField.from_log_weights(model.log_weights, cfg.beta if spatial else 0.0)
    q = q0
    trace = []
    converged = False
    n_reinit = 0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        log_lik = log_lik_matrix(model, Y, T)
        if spatial:
            q = e_step_z(model, field, graph, Y, T, q_prev=q, log_lik=log_lik)
            obj = free_energy(q, log_lik, field, graph)
        else:
            joint = log_lik + model.log_weights
            norm = logsumexp(joint, axis=1)
            obj = float(np.sum(norm))
            q = np.exp(joint - norm[:, None])
        if not np.isfinite(obj):
            raise NonFinite(f"objective became {obj} at iteration {it}")
        trace.append(obj)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.rel_tol * abs(trace[-2]):
            converged = True
            break
        if it == cfg.max_iter:
            break
        wstats = e_step_w(model, Y, T)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = m_step_theta(q, wstats, Y, T, cfg, floor, log_lik=log_lik, prev=model)
        n_reinit += sum(1 for w in caught if "emptied" in str(w.message))
        for w in caught:
            log.warning("%s", w.message)
        if spatial:
            if cfg.beta_mode == "estimated":
                field = estimate_psi(q, graph, field, beta_max=cfg.beta_max)
            else:
                field = PottsField(field.alpha, cfg.beta)
                field = estimate_psi(q, graph, field, fix_beta=True)
        else:
            field = PottsField.from_log_weights(model.log_weights)
    return TrainReport(trace, model, field, q, it, 0, converged, n_reinit=n_reinit)
