"""Hybrid GLLiM parameter containers and Gaussian density primitives.

An :class:`InverseModel` stores the low-to-high mapping of a K-component
mixture of affine regressions whose response is split into an observed block
``t`` (dimension ``Lt``) and a latent block ``w`` (dimension ``Lw``).
Parameters are held as stacked arrays (leading axis = component) so the
E- and M-steps can be written without per-component Python objects; the
:class:`Component` view is provided for inspection and tests.
"""
from __future__ import annotations

import io
import warnings
from urllib.parse import quote, unquote
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateCovariance, DimensionMismatch, ParseError

LOG_2PI = np.log(2.0 * np.pi)
COVARIANCE_MODES = ("isotropic", "equal", "diagonal")


@dataclass(frozen=True)
class Dims:
    D: int
    Lt: int
    Lw: int
    K: int
    N: int = 1

    def __post_init__(self):
        if self.D < 1 or self.Lt < 0 or self.Lw < 0 or self.K < 1 or self.N < 1:
            raise ValueError(f"invalid dimensions {self}")
        if self.L < 1:
            raise ValueError("L = Lt + Lw must be at least 1")
        if self.L > self.D:
            warnings.warn(f"L={self.L} exceeds D={self.D}; the model targets L << D",
                          stacklevel=3)

    @property
    def L(self) -> int:
        return self.Lt + self.Lw


def cholesky(cov, component=None):
    """Lower Cholesky factor with a single deterministic jitter retry.

    On failure ``1e-10 * trace / dim`` is added to the diagonal once; if the
    decomposition still fails :class:`DegenerateCovariance` is raised.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise DegenerateCovariance(component, "covariance has non-finite entries")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    jitter = 1e-10 * abs(np.trace(cov)) / d
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(d))
    except np.linalg.LinAlgError:
        raise DegenerateCovariance(component) from None


def log_gaussian(x, mean, cov, component=None):
    """Log-density of N(x; mean, cov).

    ``cov`` may be a scalar (isotropic variance), a 1-D array (diagonal) or a
    full matrix. ``x`` may carry leading batch axes; the result then has the
    batch shape.
    """
    diff = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(mean, dtype=float))
    d = diff.shape[-1]
    batch = diff.shape[:-1]
    diff = diff.reshape(-1, d)
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0 or cov.ndim == 1:
        var = np.broadcast_to(cov, (d,)).astype(float)
        if np.any(~(var > 0)) or not np.all(np.isfinite(var)):
            raise DegenerateCovariance(component)
        maha = np.sum(diff * diff / var, axis=1)
        logdet = np.sum(np.log(var))
    else:
        if cov.shape != (d, d):
            raise DimensionMismatch(f"covariance shape {cov.shape} vs dimension {d}")
        chol = cholesky(cov, component)
        z = solve_triangular(chol, diff.T, lower=True)
        maha = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (d * LOG_2PI + logdet + maha)
    return out.reshape(batch) if batch else float(out[0])


def log_gaussian_lowrank(X, mean, sigma2, A, Gamma, component=None):
    """Rows of ``X`` scored under N(mean, diag(sigma2) + A Gamma A^T).

    Evaluated with the Woodbury identity so the cost is O(N D L) instead of a
    D x D factorisation. ``A`` is D x L; with L = 0 the covariance is diagonal.
    """
    X = np.atleast_2d(X)
    R = X - mean
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (X.shape[1],))
    if np.any(~(sigma2 > 0)):
        raise DegenerateCovariance(component)
    inv_s = 1.0 / sigma2
    maha = np.einsum("nd,nd->n", R * inv_s, R)
    logdet = np.sum(np.log(sigma2))
    if A.shape[1] > 0:
        G_chol = cholesky(Gamma, component)
        logdet += 2.0 * np.sum(np.log(np.diag(G_chol)))
        G_inv = _chol_inverse(G_chol)
        M = G_inv + (A.T * inv_s) @ A
        M_chol = cholesky(M, component)
        logdet += 2.0 * np.sum(np.log(np.diag(M_chol)))
        U = (R * inv_s) @ A
        V = solve_triangular(M_chol, U.T, lower=True)
        maha = maha - np.sum(V * V, axis=0)
    return -0.5 * (X.shape[1] * LOG_2PI + logdet + maha)


def _chol_inverse(chol):
    inv_l = solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    return inv_l.T @ inv_l


def spd_inverse(mat, component=None):
    return _chol_inverse(cholesky(mat, component))


@dataclass(frozen=True)
class Component:
    c_t: np.ndarray
    c_w: np.ndarray
    Gamma_t: np.ndarray
    Gamma_w: np.ndarray
    A_t: np.ndarray
    A_w: np.ndarray
    b: np.ndarray
    sigma2: np.ndarray  # length-D diagonal of Sigma; constant when isotropic

    @property
    def c(self):
        return np.concatenate([self.c_t, self.c_w])

    @property
    def Gamma(self):
        return _block_diag(self.Gamma_t, self.Gamma_w)

    @property
    def A(self):
        return np.hstack([self.A_t, self.A_w])

    @property
    def Sigma(self):
        return np.diag(self.sigma2)


def _block_diag(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n + m, n + m))
    out[:n, :n] = a
    out[n:, n:] = b
    return out


@dataclass
class InverseModel:
    """Stacked inverse-regression parameters theta.

    Shapes: ``c_t`` (K, Lt), ``c_w`` (K, Lw), ``Gamma_t`` (K, Lt, Lt),
    ``Gamma_w`` (K, Lw, Lw), ``A_t`` (K, D, Lt), ``A_w`` (K, D, Lw),
    ``b`` (K, D), ``sigma2`` (K, D) and ``log_weights`` (K,).
    """

    c_t: np.ndarray
    c_w: np.ndarray
    Gamma_t: np.ndarray
    Gamma_w: np.ndarray
    A_t: np.ndarray
    A_w: np.ndarray
    b: np.ndarray
    sigma2: np.ndarray
    log_weights: np.ndarray
    covariance_mode: str = "isotropic"

    def __post_init__(self):
        K, D = self.b.shape
        Lt, Lw = self.c_t.shape[1], self.c_w.shape[1]
        expected = {
            "c_t": (K, Lt), "c_w": (K, Lw), "Gamma_t": (K, Lt, Lt), "Gamma_w": (K, Lw, Lw),
            "A_t": (K, D, Lt), "A_w": (K, D, Lw), "sigma2": (K, D), "log_weights": (K,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ValueError(f"unknown covariance mode {self.covariance_mode!r}")
        total = np.exp(logsumexp(self.log_weights))
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"mixture weights sum to {total}, not 1")

    @property
    def dims(self) -> Dims:
        K, D = self.b.shape
        return Dims(D=D, Lt=self.c_t.shape[1], Lw=self.c_w.shape[1], K=K)

    @property
    def K(self):
        return self.b.shape[0]

    @property
    def c(self):
        return np.concatenate([self.c_t, self.c_w], axis=1)

    @property
    def A(self):
        return np.concatenate([self.A_t, self.A_w], axis=2)

    @property
    def Gamma(self):
        return np.stack([_block_diag(self.Gamma_t[k], self.Gamma_w[k]) for k in range(self.K)])

    def component(self, k) -> Component:
        return Component(self.c_t[k], self.c_w[k], self.Gamma_t[k], self.Gamma_w[k],
                         self.A_t[k], self.A_w[k], self.b[k], self.sigma2[k])

    def components(self):
        return [self.component(k) for k in range(self.K)]

    @classmethod
    def from_components(cls, components, log_weights, covariance_mode="isotropic"):
        def stack(name):
            return np.stack([np.asarray(getattr(c, name), dtype=float) for c in components])
        D = np.asarray(components[0].b).shape[0]
        sigma2 = np.stack([np.broadcast_to(np.asarray(c.sigma2, dtype=float), (D,)) for c in components])
        return cls(stack("c_t"), stack("c_w"), stack("Gamma_t"), stack("Gamma_w"),
                   stack("A_t"), stack("A_w"), stack("b"), sigma2,
                   np.asarray(log_weights, dtype=float), covariance_mode)

    def copy(self):
        return replace(self, **{f: getattr(self, f).copy() for f in _ARRAY_FIELDS})

    def permuted(self, perm):
        perm = np.asarray(perm)
        return replace(self, **{f: getattr(self, f)[perm].copy() for f in _ARRAY_FIELDS})


_ARRAY_FIELDS = ("c_t", "c_w", "Gamma_t", "Gamma_w", "A_t", "A_w", "b", "sigma2", "log_weights")


def log_lik_y_t_given_z(model: InverseModel, y, t, k) -> float:
    """log p(y, t | Z=k) with the latent block integrated out."""
    y = np.asarray(y, dtype=float).reshape(1, -1)
    t = np.asarray(t, dtype=float).reshape(1, -1)
    return float(_log_lik_component(model, y, t, k)[0])


def _log_lik_component(model, Y, T, k):
    mean = T @ model.A_t[k].T + model.A_w[k] @ model.c_w[k] + model.b[k]
    out = log_gaussian_lowrank(Y, mean, model.sigma2[k], model.A_w[k], model.Gamma_w[k], k)
    if model.c_t.shape[1] > 0:
        out = out + log_gaussian(T, model.c_t[k], model.Gamma_t[k], k)
    return out


def log_lik_matrix(model: InverseModel, Y, T) -> np.ndarray:
    """N x K matrix of log p(y_n, t_n | Z_n = k)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    T = np.asarray(T, dtype=float).reshape(Y.shape[0], -1)
    return np.column_stack([_log_lik_component(model, Y, T, k) for k in range(model.K)])


def log_likelihood(model: InverseModel, Y, T) -> float:
    """Observed-data log-likelihood sum_n log sum_k pi_k p(y_n, t_n | k)."""
    ll = log_lik_matrix(model, Y, T) + model.log_weights
    return float(np.sum(logsumexp(ll, axis=1)))


# --- serialisation -------------------------------------------------------

MODEL_MAGIC = b"%HGLLIM\n"
MODEL_VERSION = 1


@dataclass
class ModelArchive:
    """Everything persisted next to a trained model."""

    model: InverseModel
    alpha: np.ndarray | None = None
    beta: float = 0.0
    normalizer: dict | None = None  # {"y_mean", "y_std", "t_mean", "t_std"}
    names: list = field(default_factory=list)


def _fmt(values):
    return " ".join("%.17g" % v for v in np.ravel(values))


def _write_array(out, name, arr):
    arr = np.asarray(arr, dtype=float)
    shape = " ".join(str(s) for s in arr.shape)
    out.write(f"{name} {arr.ndim} {shape} {_fmt(arr)}".rstrip() + "\n")


def dumps_model(archive: ModelArchive) -> bytes:
    m = archive.model
    d = m.dims
    out = io.StringIO()
    out.write(f"version {MODEL_VERSION}\n")
    out.write(f"dims {d.D} {d.Lt} {d.Lw} {d.K}\n")
    out.write(f"covariance_mode {m.covariance_mode}\n")
    out.write(f"names {len(archive.names)}" + "".join(f" {quote(n)}" for n in archive.names) + "\n")
    _write_array(out, "log_weights", m.log_weights)
    alpha = archive.alpha if archive.alpha is not None else np.zeros(0)
    _write_array(out, "alpha", alpha)
    out.write(f"beta {'%.17g' % archive.beta}\n")
    norm = archive.normalizer
    out.write(f"normalizer {0 if norm is None else 1}\n")
    if norm is not None:
        for key in ("y_mean", "y_std", "t_mean", "t_std"):
            _write_array(out, key, norm[key])
    for k in range(d.K):
        out.write(f"component {k}\n")
        for name in ("c_t", "c_w", "Gamma_t", "Gamma_w", "A_t", "A_w", "b", "sigma2"):
            _write_array(out, name, getattr(m, name)[k])
    return MODEL_MAGIC + out.getvalue().encode("ascii")


def loads_model(data: bytes) -> ModelArchive:
    if not data.startswith(MODEL_MAGIC):
        raise ParseError("not a model archive (bad magic)")
    lines = data[len(MODEL_MAGIC):].decode("ascii").splitlines()
    pos = 0

    def take(expected):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of archive, wanted {expected!r}", row=pos + 2)
        parts = lines[pos].split()
        if not parts or parts[0] != expected:
            raise ParseError(f"expected {expected!r}", row=pos + 2)
        pos += 1
        return parts[1:]

    def take_array(expected):
        parts = take(expected)
        ndim = int(parts[0])
        shape = tuple(int(s) for s in parts[1:1 + ndim])
        vals = np.array([float(v) for v in parts[1 + ndim:]], dtype=float)
        if vals.size != int(np.prod(shape)):
            raise ParseError(f"{expected}: {vals.size} values for shape {shape}", row=pos + 1)
        return vals.reshape(shape)

    version = int(take("version")[0])
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported model format version {version}")
    D, Lt, Lw, K = (int(v) for v in take("dims"))
    mode = take("covariance_mode")[0]
    names_part = take("names")
    names = [unquote(n) for n in names_part[1:]]
    log_weights = take_array("log_weights")
    alpha = take_array("alpha")
    beta = float(take("beta")[0])
    normalizer = None
    if int(take("normalizer")[0]):
        normalizer = {key: take_array(key) for key in ("y_mean", "y_std", "t_mean", "t_std")}
    comps = {n: [] for n in ("c_t", "c_w", "Gamma_t", "Gamma_w", "A_t", "A_w", "b", "sigma2")}
    shapes = {"c_t": (Lt,), "c_w": (Lw,), "Gamma_t": (Lt, Lt), "Gamma_w": (Lw, Lw),
              "A_t": (D, Lt), "A_w": (D, Lw), "b": (D,), "sigma2": (D,)}
    for k in range(K):
        if int(take("component")[0]) != k:
            raise ParseError(f"component blocks out of order at {k}", row=pos + 1)
        for name in comps:
            comps[name].append(take_array(name).reshape(shapes[name]))
    model = InverseModel(**{n: np.stack(v) if v[0].size else np.zeros((K,) + shapes[n])
                            for n, v in comps.items()},
                         log_weights=log_weights, covariance_mode=mode)
    return ModelArchive(model, alpha if alpha.size else None, beta, normalizer, names)


def save_model(path, archive: ModelArchive):
    from .io_utils import atomic_write_bytes
    atomic_write_bytes(path, dumps_model(archive))


def load_model(path) -> ModelArchive:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
