"""Held-out NRMSE of hGLLiM with and without latent responses when a hidden factor is present.

    python scripts/latent_confounder.py --seeds 10
"""
import argparse
import warnings

import numpy as np

from hgllim import Dims, Normalizer, SpectralDataset, TrainConfig, predict, to_forward, train
from hgllim.data import generate_synthetic_model, nrmse_columns, sample_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--lw", type=int, nargs="+", default=[0, 2])
    ap.add_argument("--seed", type=int, default=7000)
    args = ap.parse_args()

    rows = []
    for s in range(args.seeds):
        rng = np.random.default_rng(args.seed + s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            gen = generate_synthetic_model(rng, Dims(D=20, Lt=2, Lw=2, K=5), 3.0, noise=0.1)
        Y, T, _, _ = sample_model(gen, args.n_train + args.n_test, rng)
        tr = SpectralDataset(Y[:args.n_train], T[:args.n_train])
        norm = Normalizer.fit(tr)
        row = []
        for lw in args.lw:
            m = train(norm.apply_y(tr.Y), norm.apply_t(tr.T), cfg=TrainConfig(K=5, Lw=lw, n_restarts=2, seed=s)).model
            x = norm.invert_t(predict(to_forward(m), norm.apply_y(Y[args.n_train:])))
            row.append(nrmse_columns(x[:, :2], T[args.n_train:]).mean())
        rows.append(row)
        print(f"seed {s}: " + "  ".join(f"Lw={lw} {e:.4f}" for lw, e in zip(args.lw, row)))
    rows = np.array(rows)
    print("mean:   " + "  ".join(f"Lw={lw} {e:.4f}" for lw, e in zip(args.lw, rows.mean(axis=0))))


if __name__ == "__main__":
    main()
