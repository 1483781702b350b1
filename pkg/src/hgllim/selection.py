"""BIC for trained models and the latent-dimension sweep."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NonFinite
from .model import Dims, InverseModel, log_likelihood
from .vem import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BicRecord:
    Lw: int
    dof: int
    loglik: float
    bic: float
    seed: int
    N: int

    def as_row(self):
        return {"L_w": self.Lw, "dof": self.dof, "loglik": repr(self.loglik), "bic": repr(self.bic)}


def dof(dims: Dims, covariance_mode: str = "equal") -> int:
    """Number of free parameters.

    For isotropic noise shared by all components this is
    ``K (D (Lw + Lt + 1) + Lt (Lt + 3) / 2 + 1)``. Per-component isotropic
    variances add ``K - 1``; per-band (diagonal) variances add ``K D - 1``.
    """
    K, D, Lt, Lw = dims.K, dims.D, dims.Lt, dims.Lw
    base = K * (D * (Lw + Lt + 1) + Lt * (Lt + 3) // 2 + 1)
    if covariance_mode == "equal":
        return base
    if covariance_mode == "isotropic":
        return base + K - 1
    if covariance_mode == "diagonal":
        return base + K * D - 1
    raise ValueError(f"unknown covariance mode {covariance_mode!r}")


def bic(model: InverseModel, Y, T, seed: int = 0) -> BicRecord:
    """BIC with the i.i.d. mixture likelihood (models trained without interaction)."""
    Y = np.atleast_2d(Y)
    N = Y.shape[0]
    ll = log_likelihood(model, Y, T)
    p = dof(model.dims, model.covariance_mode)
    return BicRecord(model.dims.Lw, p, ll, -2.0 * ll + p * math.log(N), seed, N)


def _fit_one(args):
    Y, T, cfg = args
    report = train(Y, T, None, cfg)
    return bic(report.model, Y, T, cfg.seed)


def select_lw(Y, T, cfg: TrainConfig, lw_range, workers: int = 1):
    """Train once per latent dimension and return (best Lw, records by Lw).

    Ties go to the smaller latent dimension. Fits that fail are skipped with a
    warning; at least one must succeed.
    """
    lw_values = sorted(set(int(v) for v in lw_range))
    if not lw_values:
        raise ConfigError("lw_range must not be empty")
    if cfg.spatial:
        raise ConfigError("BIC selection uses the i.i.d. likelihood; beta must be fixed at 0")
    jobs = [(Y, T, replace(cfg, Lw=lw)) for lw in lw_values]
    records = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fit_one, job) for job in jobs]
            outcomes = []
            for lw, fut in zip(lw_values, futures):
                try:
                    outcomes.append(fut.result())
                except (NonFinite, np.linalg.LinAlgError, ValueError) as exc:
                    log.warning("fit with Lw=%d failed: %s", lw, exc)
            records = outcomes
    else:
        for lw, job in zip(lw_values, jobs):
            try:
                records.append(_fit_one(job))
            except (NonFinite, np.linalg.LinAlgError, ValueError) as exc:
                log.warning("fit with Lw=%d failed: %s", lw, exc)
    if not records:
        raise NonFinite("no latent dimension could be fitted")
    best = min(records, key=lambda r: (r.bic, r.Lw))
    return best.Lw, records
