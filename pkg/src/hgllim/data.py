"""Datasets, file formats, normalisation, synthetic generators and metrics."""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import stdtr

from .errors import (ConstantColumn, ConstantTruth, DimensionMismatch, InsufficientNeighbors,
                     ParseError, RegionTooSmall, ZeroVariance)
from .io_utils import atomic_write_bytes
from .model import Dims, InverseModel

DATASET_MAGIC = b"HGLDSET\x00"
IMAGE_MAGIC = b"HGLIMG\x00\x00"
FORMAT_VERSION = 1
_DS_HEADER = struct.Struct("<IQQQ")
_IMG_HEADER = struct.Struct("<IQQQBQ")


@dataclass
class SpectralDataset:
    Y: np.ndarray  # (N, D)
    T: np.ndarray  # (N, Lt)
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.T = np.asarray(self.T, dtype=float)
        if self.T.size == 0:
            self.T = np.zeros((self.Y.shape[0], 0))
        elif self.T.ndim == 1:
            self.T = self.T[:, None]
        if self.T.shape[0] != self.Y.shape[0]:
            raise DimensionMismatch(f"{self.Y.shape[0]} spectra but {self.T.shape[0]} parameter rows")
        if not (np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.T))):
            raise ParseError("dataset contains non-finite values")
        if not self.names:
            self.names = [f"t_{j + 1}" for j in range(self.T.shape[1])]
        if len(self.names) != self.T.shape[1]:
            raise DimensionMismatch("one name per parameter column is required")

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def D(self):
        return self.Y.shape[1]

    @property
    def Lt(self):
        return self.T.shape[1]

    def subset(self, idx):
        return SpectralDataset(self.Y[idx], self.T[idx], list(self.names))


@dataclass
class SpectralImage:
    height: int
    width: int
    cube: np.ndarray  # (H*W, D), raster order
    truth: np.ndarray | None = None  # (H*W, Lt)
    clean: np.ndarray | None = None  # noiseless cube, kept in memory only

    def __post_init__(self):
        n = self.height * self.width
        if self.cube.shape[0] != n:
            raise DimensionMismatch(f"cube has {self.cube.shape[0]} rows for a {self.height}x{self.width} image")
        if self.truth is not None and self.truth.shape[0] != n:
            raise DimensionMismatch("truth rows do not match the image size")

    @property
    def D(self):
        return self.cube.shape[1]


# --- normalisation ----------------------------------------------------------

@dataclass
class Normalizer:
    """Column-wise standardisation with the sample (N - 1) standard deviation."""

    y_mean: np.ndarray
    y_std: np.ndarray
    t_mean: np.ndarray
    t_std: np.ndarray

    @classmethod
    def fit(cls, ds: SpectralDataset):
        if ds.N < 2:
            raise ValueError("normalisation needs at least two rows")
        stats = []
        for label, X in (("y", ds.Y), ("t", ds.T)):
            mean = X.mean(axis=0)
            std = X.std(axis=0, ddof=1)
            bad = np.flatnonzero(~(std > 0))
            if bad.size:
                raise ConstantColumn(f"column {label}_{bad[0] + 1} is constant")
            stats += [mean, std]
        return cls(*stats)

    def apply_y(self, Y):
        return (Y - self.y_mean) / self.y_std

    def apply_t(self, T):
        return (T - self.t_mean) / self.t_std

    def invert_y(self, Y):
        return Y * self.y_std + self.y_mean

    def invert_t(self, T):
        """Undo the parameter scaling on the first ``len(t_mean)`` columns only."""
        T = np.array(T, dtype=float, copy=True)
        Lt = len(self.t_mean)
        T[..., :Lt] = T[..., :Lt] * self.t_std + self.t_mean
        return T

    def apply(self, ds: SpectralDataset) -> SpectralDataset:
        return SpectralDataset(self.apply_y(ds.Y), self.apply_t(ds.T), list(ds.names))

    def invert(self, ds: SpectralDataset) -> SpectralDataset:
        return SpectralDataset(self.invert_y(ds.Y), self.invert_t(ds.T), list(ds.names))

    def to_dict(self):
        return {"y_mean": self.y_mean, "y_std": self.y_std, "t_mean": self.t_mean, "t_std": self.t_std}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("y_mean", "y_std", "t_mean", "t_std")))


# --- file formats -----------------------------------------------------------

def _guess_format(path):
    return "csv" if str(path).lower().endswith(".csv") else "bin"


def save_dataset(ds: SpectralDataset, path, format=None):
    format = format or _guess_format(path)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"y_{j + 1}" for j in range(ds.D)] + list(ds.names))
        for y, t in zip(ds.Y, ds.T):
            w.writerow([repr(float(v)) for v in y] + [repr(float(v)) for v in t])
        atomic_write_bytes(path, buf.getvalue().encode("ascii"))
    elif format in ("bin", "packed-binary"):
        header = DATASET_MAGIC + _DS_HEADER.pack(FORMAT_VERSION, ds.N, ds.D, ds.Lt)
        body = np.hstack([ds.Y, ds.T]).astype("<f8").tobytes(order="C")
        atomic_write_bytes(path, header + body)
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def load_dataset(path, format=None) -> SpectralDataset:
    path = Path(path)
    format = format or _guess_format(path)
    if format == "csv":
        return _load_csv(path)
    if format in ("bin", "packed-binary"):
        return _load_bin(path)
    raise ValueError(f"unknown dataset format {format!r}")


def _load_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        D = 0
        while D < len(header) and header[D] == f"y_{D + 1}":
            D += 1
        if D == 0:
            raise ParseError("header must start with y_1", row=1)
        names = header[D:]
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DimensionMismatch(f"row {rowno} has {len(row)} fields, header has {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"cannot parse {cell!r}", row=rowno, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r}", row=rowno, column=col)
                vals.append(v)
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return SpectralDataset(arr[:, :D], arr[:, D:], names)


def _load_bin(path):
    data = Path(path).read_bytes()
    if not data.startswith(DATASET_MAGIC):
        raise ParseError("not a packed dataset (bad magic)")
    off = len(DATASET_MAGIC)
    if len(data) < off + _DS_HEADER.size:
        raise ParseError("truncated header")
    version, N, D, Lt = _DS_HEADER.unpack_from(data, off)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported dataset version {version}")
    off += _DS_HEADER.size
    expected = N * (D + Lt) * 8
    if len(data) - off != expected:
        raise DimensionMismatch(f"payload has {len(data) - off} bytes, header implies {expected}")
    arr = np.frombuffer(data, dtype="<f8", offset=off).reshape(N, D + Lt).astype(float)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise ParseError("non-finite value", row=int(bad[0, 0]), column=int(bad[0, 1]))
    return SpectralDataset(arr[:, :D], arr[:, D:])


def save_image(img: SpectralImage, path):
    has_truth = img.truth is not None
    Lt = img.truth.shape[1] if has_truth else 0
    parts = [IMAGE_MAGIC, _IMG_HEADER.pack(FORMAT_VERSION, img.height, img.width, img.D, int(has_truth), Lt),
             np.ascontiguousarray(img.cube, dtype="<f8").tobytes()]
    if has_truth:
        parts.append(np.ascontiguousarray(img.truth, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_image(path) -> SpectralImage:
    data = Path(path).read_bytes()
    if not data.startswith(IMAGE_MAGIC):
        raise ParseError("not an image container (bad magic)")
    off = len(IMAGE_MAGIC)
    version, H, W, D, has_truth, Lt = _IMG_HEADER.unpack_from(data, off)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported image version {version}")
    off += _IMG_HEADER.size
    n = H * W
    expected = n * D * 8 + (n * Lt * 8 if has_truth else 0)
    if len(data) - off != expected:
        raise DimensionMismatch(f"payload has {len(data) - off} bytes, header implies {expected}")
    cube = np.frombuffer(data, dtype="<f8", count=n * D, offset=off).reshape(n, D).astype(float)
    truth = None
    if has_truth:
        truth = np.frombuffer(data, dtype="<f8", count=n * Lt, offset=off + n * D * 8).reshape(n, Lt).astype(float)
    return SpectralImage(H, W, cube, truth)


# --- metrics ----------------------------------------------------------------

def nrmse(t_hat, t) -> float:
    """sqrt(sum (t_hat - t)^2 / sum (t - mean(t))^2)."""
    t_hat = np.asarray(t_hat, dtype=float).ravel()
    t = np.asarray(t, dtype=float).ravel()
    if t.size != t_hat.size:
        raise DimensionMismatch("prediction and truth lengths differ")
    if t.size < 2:
        raise ValueError("NRMSE needs at least two values")
    den = np.sum((t - t.mean()) ** 2)
    if den == 0:
        raise ConstantTruth("ground truth is constant")
    return float(np.sqrt(np.sum((t_hat - t) ** 2) / den))


def nrmse_columns(T_hat, T):
    return np.array([nrmse(T_hat[:, j], T[:, j]) for j in range(T.shape[1])])


def paired_ttest(a, b):
    """Paired t statistic of ``a - b`` and its two-sided p-value."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVariance("paired differences are all equal")
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stdtr(n - 1, -abs(t))
    return float(t), float(min(p, 1.0))


# --- synthetic generators ---------------------------------------------------

def _random_spd(rng, dim, scale=1.0):
    if dim == 0:
        return np.zeros((0, 0))
    R = rng.standard_normal((dim, dim))
    M = R @ R.T / dim + 0.5 * np.eye(dim)
    d = np.sqrt(np.diag(M))
    return scale**2 * M / np.outer(d, d)


def generate_synthetic_model(rng, dims: Dims, separation=3.0, *, latent_scale=1.0,
                             noise=0.1, slope=1.0, equal_noise=True,
                             covariance_mode="isotropic") -> InverseModel:
    """Random GLLiM parameters used as a ground-truth data generator.

    Observed-block centres are drawn so that they sit ``separation`` unit
    standard deviations apart (best of a bounded rejection search).
    """
    K, D, Lt, Lw = dims.K, dims.D, dims.Lt, dims.Lw
    c_t = np.zeros((K, Lt))
    if Lt and K > 1:
        best, best_gap = None, -1.0
        spread = separation * max(1.0, K ** (1.0 / Lt))
        for _ in range(200):
            cand = rng.uniform(-0.5, 0.5, size=(K, Lt)) * spread
            gaps = np.linalg.norm(cand[:, None] - cand[None], axis=2) + np.eye(K) * 1e300
            gap = gaps.min()
            if gap > best_gap:
                best, best_gap = cand, gap
            if gap >= separation:
                break
        c_t = best
    G_t = np.stack([_random_spd(rng, Lt) for _ in range(K)])
    c_w = np.zeros((K, Lw))
    G_w = np.tile(np.eye(Lw), (K, 1, 1))
    A_t = rng.standard_normal((K, D, Lt)) * slope / math.sqrt(max(Lt, 1))
    A_w = rng.standard_normal((K, D, Lw)) * latent_scale / math.sqrt(max(Lw, 1))
    b = rng.standard_normal((K, D))
    if equal_noise:
        sigma2 = np.full((K, D), noise**2)
    else:
        sigma2 = np.repeat((noise * rng.uniform(0.5, 1.5, size=K))[:, None] ** 2, D, axis=1)
    logits = 0.2 * rng.standard_normal(K)
    log_w = logits - np.log(np.sum(np.exp(logits)))
    return InverseModel(c_t, c_w, G_t, G_w, A_t, A_w, b, sigma2, log_w, covariance_mode)


def sample_model(model: InverseModel, N: int, rng):
    """Draw (Y, T, W, Z) from the joint generative model."""
    K, D = model.b.shape
    Z = rng.choice(K, size=N, p=np.exp(model.log_weights))
    Lt, Lw = model.c_t.shape[1], model.c_w.shape[1]
    T = np.zeros((N, Lt))
    W = np.zeros((N, Lw))
    Y = np.zeros((N, D))
    for k in range(K):
        idx = np.flatnonzero(Z == k)
        n = idx.size
        if n == 0:
            continue
        if Lt:
            T[idx] = rng.multivariate_normal(model.c_t[k], model.Gamma_t[k], size=n, method="cholesky")
        if Lw:
            W[idx] = rng.multivariate_normal(model.c_w[k], model.Gamma_w[k], size=n, method="cholesky")
        Y[idx] = (T[idx] @ model.A_t[k].T + W[idx] @ model.A_w[k].T + model.b[k]
                  + rng.standard_normal((n, D)) * np.sqrt(model.sigma2[k]))
    return Y, T, W, Z


def synthetic_dataset(model: InverseModel, N: int, rng) -> SpectralDataset:
    Y, T, _, _ = sample_model(model, N, rng)
    return SpectralDataset(Y, T)


def region_slices(height, width, grid):
    """Split the image into ``grid = (rows, cols)`` blocks as evenly as possible."""
    rows, cols = grid
    if rows < 1 or cols < 1 or height < rows or width < cols:
        raise RegionTooSmall(f"cannot split {height}x{width} into {rows}x{cols} regions")
    r_edges = np.cumsum([0] + [len(a) for a in np.array_split(np.arange(height), rows)])
    c_edges = np.cumsum([0] + [len(a) for a in np.array_split(np.arange(width), cols)])
    return [(slice(r_edges[i], r_edges[i + 1]), slice(c_edges[j], c_edges[j + 1]))
            for i in range(rows) for j in range(cols)]


def add_noise_snr(clean, snr_db, rng):
    """White Gaussian noise at ``snr_db`` relative to the cube's mean squared value."""
    if snr_db is None or math.isinf(snr_db):
        return clean.copy()
    power = float(np.mean(clean**2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return clean + sigma * rng.standard_normal(clean.shape)


def empirical_snr(clean, noisy):
    return 10.0 * math.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2))


def generate_image(source, rng, *, height=300, width=400, grid=(3, 4), snr_db=6.0,
                   n_neighbors=15, pool_size=15000) -> SpectralImage:
    """Piecewise-homogeneous synthetic image built from a spectra/parameter pool.

    Each region picks one parameter vector uniformly from ``source``; its pixels
    draw uniformly among that row and its ``n_neighbors`` nearest neighbours
    (Euclidean in standardised parameter space) and take their spectra. White
    Gaussian noise at ``snr_db`` is then added to the whole cube.
    """
    if isinstance(source, InverseModel):
        source = synthetic_dataset(source, pool_size, rng)
    ds = source
    if ds.N < n_neighbors + 1:
        raise InsufficientNeighbors(f"pool has {ds.N} rows, need at least {n_neighbors + 1}")
    regions = region_slices(height, width, grid)
    sd = ds.T.std(axis=0)
    P = (ds.T - ds.T.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    tree = cKDTree(P)
    idx_map = np.empty((height, width), dtype=np.int64)
    for rs, cs in regions:
        seed_row = int(rng.integers(ds.N))
        _, nb = tree.query(P[seed_row], k=n_neighbors + 1)
        nb = np.atleast_1d(nb)
        if seed_row not in nb:
            nb[-1] = seed_row
        shape = (rs.stop - rs.start, cs.stop - cs.start)
        idx_map[rs, cs] = nb[rng.integers(len(nb), size=shape)]
    flat = idx_map.ravel()
    clean = ds.Y[flat]
    cube = add_noise_snr(clean, snr_db, rng)
    return SpectralImage(height, width, cube, ds.T[flat].copy(), clean)


def crossval_protocol(N, rng, n_train=10000, n_test=None, n_splits=20):
    """Random disjoint (train, test) index splits; test defaults to the remainder."""
    n_test = N - n_train if n_test is None else n_test
    if n_train < 1 or n_test < 0 or n_train + n_test > N:
        raise ValueError(f"split sizes {n_train}+{n_test} exceed N={N}")
    splits = []
    for _ in range(n_splits):
        perm = rng.permutation(N)
        splits.append((np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_test])))
    return splits
