"""Synthetic image benchmark: per-pixel versus MRF-regularised prediction.

One generator model supplies a training set and an image pool; every image
is predicted twice with the same trained model and scored per parameter.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Normalizer, generate_image, generate_synthetic_model, nrmse_columns, paired_ttest, synthetic_dataset
from .forward import SpatialOptions, predict, predict_spatial, to_forward
from .io_utils import atomic_write_text
from .model import Dims
from .potts import NeighborGraph
from .vem import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    n_images: int = 50
    height: int = 100
    width: int = 100
    grid: tuple = (3, 4)
    snr_db: float = 6.0
    D: int = 20
    gen_K: int = 5
    Lt: int = 3
    Lw: int = 0
    separation: float = 3.0
    gen_noise: float = 1.0
    n_train: int = 5000
    pool_size: int = 5000
    n_neighbors: int = 15
    connectivity: int = 8
    train: TrainConfig = field(default_factory=lambda: TrainConfig(K=5, n_restarts=3))
    seed: int = 0


@dataclass
class BenchResult:
    names: list
    nrmse_iid: np.ndarray  # (n_images, Lt)
    nrmse_mrf: np.ndarray
    betas: np.ndarray
    sweeps: np.ndarray
    t_stat: float
    p_value: float
    seconds: float

    def results_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "method", *self.names, "beta"])
        for i in range(len(self.betas)):
            w.writerow([i, "hGLLiM", *map(repr, self.nrmse_iid[i].tolist()), ""])
            w.writerow([i, "MRF-hGLLiM", *map(repr, self.nrmse_mrf[i].tolist()), repr(float(self.betas[i]))])
        return buf.getvalue()

    def ttest_dict(self):
        return {
            "t": self.t_stat,
            "p": self.p_value,
            "n_images": int(len(self.betas)),
            "mean_nrmse": {
                "hGLLiM": dict(zip(self.names, self.nrmse_iid.mean(axis=0).tolist())),
                "MRF-hGLLiM": dict(zip(self.names, self.nrmse_mrf.mean(axis=0).tolist())),
            },
            "beta": {"min": float(self.betas.min()), "max": float(self.betas.max()),
                     "mean": float(self.betas.mean())},
        }

    def write(self, out_dir):
        atomic_write_text(f"{out_dir}/results.csv", self.results_csv())
        atomic_write_text(f"{out_dir}/ttest.json", json.dumps(self.ttest_dict(), indent=2) + "\n")


def run_benchmark(cfg: BenchConfig) -> BenchResult:
    start = time.perf_counter()
    ss = np.random.SeedSequence(cfg.seed)
    gen_ss, data_ss, img_ss = ss.spawn(3)
    gen_rng = np.random.default_rng(gen_ss)
    dims = Dims(D=cfg.D, Lt=cfg.Lt, Lw=cfg.Lw, K=cfg.gen_K)
    generator = generate_synthetic_model(gen_rng, dims, cfg.separation, noise=cfg.gen_noise)
    data_rng = np.random.default_rng(data_ss)
    train_ds = synthetic_dataset(generator, cfg.n_train, data_rng)
    pool = synthetic_dataset(generator, cfg.pool_size, data_rng)

    norm = Normalizer.fit(train_ds)
    report = train(norm.apply_y(train_ds.Y), norm.apply_t(train_ds.T), None, cfg.train)
    fm = to_forward(report.model)
    graph = NeighborGraph.lattice(cfg.height, cfg.width, cfg.connectivity)
    names = train_ds.names

    iid, mrf, betas, sweeps = [], [], [], []
    for i, s in enumerate(img_ss.spawn(cfg.n_images)):
        rng = np.random.default_rng(s)
        img = generate_image(pool, rng, height=cfg.height, width=cfg.width, grid=cfg.grid,
                             snr_db=cfg.snr_db, n_neighbors=cfg.n_neighbors)
        Yn = norm.apply_y(img.cube)
        x0 = norm.invert_t(predict(fm, Yn))
        res = predict_spatial(fm, Yn, graph, SpatialOptions())
        x1 = norm.invert_t(res.x)
        iid.append(nrmse_columns(x0[:, :cfg.Lt], img.truth))
        mrf.append(nrmse_columns(x1[:, :cfg.Lt], img.truth))
        betas.append(res.field.beta)
        sweeps.append(res.n_sweeps)
        log.info("image %d: nrmse %s -> %s, beta %.3f", i, np.round(iid[-1], 4), np.round(mrf[-1], 4), betas[-1])
    iid, mrf = np.array(iid), np.array(mrf)
    t, p = paired_ttest(iid.mean(axis=1), mrf.mean(axis=1))
    return BenchResult(names, iid, mrf, np.array(betas), np.array(sweeps), t, p,
                       time.perf_counter() - start)


def config_dict(cfg: BenchConfig):
    d = asdict(cfg)
    d["grid"] = list(cfg.grid)
    return d
