"""Command-line front end: train, predict, select, synth, bench.

Every command writes its outputs into a staging directory and moves them into
``--out-dir`` only after success, together with a ``manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .bench import BenchConfig, config_dict, run_benchmark
from .data import (Normalizer, SpectralDataset, generate_image, generate_synthetic_model, load_dataset,
                   load_image, nrmse_columns, save_dataset, save_image, synthetic_dataset)
from .errors import (ConfigError, ConstantColumn, ConstantTruth, DegenerateCovariance, DimensionMismatch,
                     EmptyComponent, HGLLiMError, InsufficientNeighbors, NonFinite, ParseError, RegionTooSmall,
                     ZeroVariance)
from .forward import SpatialOptions, clamp_proportions, predict, predict_spatial, to_forward
from .io_utils import atomic_write_text, sha256_file
from .model import Dims, ModelArchive, load_model, save_model
from .potts import NeighborGraph
from .selection import select_lw
from .vem import TrainConfig, train

log = logging.getLogger("hgllim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


class Stage:
    """Collects outputs in a temporary directory; ``commit`` moves them into place."""

    def __init__(self, out_dir):
        self.out_dir = os.path.abspath(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.dir = tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir)
        self.files = []

    def path(self, rel):
        full = os.path.join(self.dir, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        self.files.append(rel)
        return full

    def write_text(self, rel, text):
        with open(self.path(rel), "w") as fh:
            fh.write(text)

    def commit(self, manifest: RunManifest):
        manifest.outputs = sorted(self.files)
        for rel in self.files:
            dst = os.path.join(self.out_dir, rel)
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            os.replace(os.path.join(self.dir, rel), dst)
        atomic_write_text(os.path.join(self.out_dir, "manifest.json"), manifest.to_json())
        self.discard()

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)


# --- helpers --------------------------------------------------------------

def _parse_pair(text, sep, conv=float, what="value"):
    parts = text.split(sep)
    if len(parts) != 2:
        raise ConfigError(f"{what} must look like a{sep}b, got {text!r}")
    try:
        return conv(parts[0]), conv(parts[1])
    except ValueError:
        raise ConfigError(f"bad {what} {text!r}") from None


def _parse_range(text):
    """'0:5' (inclusive) or '0,2,4'."""
    text = str(text)
    if ":" in text:
        lo, hi = _parse_pair(text, ":", int, "range")
        return list(range(lo, hi + 1))
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad range {text!r}") from None


def _parse_beta(text):
    """'estimate' -> None; 'fixed:v[,v...]' -> list of floats."""
    if text == "estimate":
        return None
    if not text.startswith("fixed:"):
        raise ConfigError(f"--beta must be 'estimate' or 'fixed:v[,v...]', got {text!r}")
    try:
        values = [float(v) for v in text[len("fixed:"):].split(",")]
    except ValueError:
        raise ConfigError(f"bad beta list {text!r}") from None
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise ConfigError("beta values must be finite and non-negative")
    return values


def _parse_snr(text):
    return math.inf if str(text).lower() in ("inf", "infinity", "none") else float(text)


def _load_graph(args, n_sites):
    if getattr(args, "graph", None):
        g = NeighborGraph.load_edge_list(args.graph, n_sites)
        if g.n_sites != n_sites:
            raise DimensionMismatch(f"graph has {g.n_sites} sites, data has {n_sites} rows")
        return g
    if getattr(args, "lattice", None):
        h, w = _parse_pair(args.lattice, "x", int, "lattice")
        if h * w != n_sites:
            raise DimensionMismatch(f"lattice {h}x{w} does not match {n_sites} rows")
        return NeighborGraph.lattice(h, w, args.connectivity)
    return None


def _fmt_row(values):
    return ",".join(repr(float(v)) for v in values)


def _map_csv(values, shape):
    grid = np.asarray(values).reshape(shape)
    return "".join(_fmt_row(row) + "\n" for row in grid)


def _int_map_csv(values, shape):
    grid = np.asarray(values).reshape(shape)
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in grid)


def _normalizer_from_archive(archive):
    return Normalizer.from_dict(archive.normalizer) if archive.normalizer else None


# --- commands -------------------------------------------------------------

def cmd_train(args, stage, manifest):
    ds = load_dataset(args.data, args.format)
    manifest.inputs[args.data] = sha256_file(args.data)
    graph = _load_graph(args, ds.N)
    if args.graph:
        manifest.inputs[args.graph] = sha256_file(args.graph)
    estimated = str(args.beta) == "estimated"
    cfg = TrainConfig(K=args.K, Lw=args.Lw, max_iter=args.max_iter, rel_tol=args.tol,
                      n_restarts=args.restarts, seed=args.seed,
                      beta_mode="estimated" if estimated else "fixed",
                      beta=args.beta_init if estimated else float(args.beta),
                      beta_max=args.beta_max, covariance_mode=args.covariance,
                      init_strategy=args.init)
    if cfg.spatial and graph is None:
        raise ConfigError("a spatial prior (beta estimated or > 0) requires --graph or --lattice")
    norm = Normalizer.fit(ds) if args.normalize else None
    Y, T = (norm.apply_y(ds.Y), norm.apply_t(ds.T)) if norm else (ds.Y, ds.T)
    report = train(Y, T, graph if cfg.spatial else None, cfg)
    archive = ModelArchive(report.model, report.field.alpha, report.field.beta,
                           norm.to_dict() if norm else None, list(ds.names))
    save_model(stage.path("model.hgllim"), archive)
    stage.write_text("report.json", report.to_json(cfg) + "\n")
    manifest.seeds["train"] = cfg.seed
    print(f"objective {report.final_objective!r} after {report.n_iter} iterations "
          f"(restart {report.restart}, converged={report.converged})")


def _load_targets(args, D):
    """Spectra to predict: an image container or a plain dataset table."""
    if args.image:
        img = load_image(args.image)
        return img.cube, img.truth, (img.height, img.width), args.image
    ds = load_dataset(args.data, args.format)
    truth = ds.T if ds.Lt else None
    return ds.Y, truth, (ds.N, 1), args.data


def cmd_predict(args, stage, manifest):
    if bool(args.image) == bool(args.data):
        raise ConfigError("give exactly one of --image or --data")
    archive = load_model(args.model)
    manifest.inputs[args.model] = sha256_file(args.model)
    model = archive.model
    Y, truth, shape, src = _load_targets(args, model.dims.D)
    manifest.inputs[src] = sha256_file(src)
    if Y.shape[1] != model.dims.D:
        raise DimensionMismatch(f"spectra have {Y.shape[1]} bands, model expects {model.dims.D}")
    norm = _normalizer_from_archive(archive)
    Yn = norm.apply_y(Y) if norm else Y
    fm = to_forward(model)
    Lt = model.dims.Lt
    names = archive.names or [f"t_{j + 1}" for j in range(Lt)]
    bounds = _parse_pair(args.clamp, ":", float, "clamp") if args.clamp else None

    if not args.spatial:
        runs = [(None, None)]
    else:
        if args.image:
            graph = NeighborGraph.lattice(shape[0], shape[1], args.connectivity)
        else:
            graph = _load_graph(args, Y.shape[0])
            if graph is None:
                raise ConfigError("--spatial with --data requires --graph or --lattice")
        betas = _parse_beta(args.beta)
        runs = [(graph, b) for b in (betas or [None])]

    sweep = len(runs) > 1
    summary = {}
    for graph, beta in runs:
        prefix = f"beta_{beta!r}/" if sweep else ""
        if graph is None:
            x, w = predict(fm, Yn, return_weights=True)
            labels = np.argmax(w, axis=1) + 1
            psi = {"alpha": (model.log_weights - model.log_weights[0]).tolist(), "beta": 0.0,
                   "n_sweeps": 0, "converged": True}
        else:
            alpha_mode = args.alpha or ("fixed" if beta is not None else "estimate")
            opts = SpatialOptions(beta=beta, alpha=alpha_mode, beta_max=args.beta_max,
                                  tol=args.tol, max_sweeps=args.max_sweeps, weights=args.weights)
            res = predict_spatial(fm, Yn, graph, opts)
            x, labels = res.x, res.labels + 1
            psi = {"alpha": res.field.alpha.tolist(), "beta": res.field.beta,
                   "n_sweeps": res.n_sweeps, "converged": res.converged}
        if norm:
            x = norm.invert_t(x)
        x = clamp_proportions(x, bounds, Lt)
        for j in range(Lt):
            stage.write_text(f"{prefix}{names[j]}.csv", _map_csv(x[:, j], shape))
        for j in range(Lt, x.shape[1]):
            stage.write_text(f"{prefix}w_{j - Lt + 1}.csv", _map_csv(x[:, j], shape))
        stage.write_text(f"{prefix}labels.csv", _int_map_csv(labels, shape))
        if truth is not None:
            psi["nrmse"] = dict(zip(names, nrmse_columns(x[:, :Lt], truth).tolist()))
        stage.write_text(f"{prefix}psi.json", json.dumps(psi, indent=2) + "\n")
        summary[repr(beta) if graph is not None else "iid"] = psi
    if sweep:
        print(f"wrote {len(runs)} map sets")
    for key, psi in summary.items():
        extra = f" nrmse={psi['nrmse']}" if "nrmse" in psi else ""
        print(f"beta={psi['beta']:.4g} sweeps={psi['n_sweeps']}{extra}")


def cmd_select(args, stage, manifest):
    ds = load_dataset(args.data, args.format)
    manifest.inputs[args.data] = sha256_file(args.data)
    norm = Normalizer.fit(ds) if args.normalize else None
    Y, T = (norm.apply_y(ds.Y), norm.apply_t(ds.T)) if norm else (ds.Y, ds.T)
    cfg = TrainConfig(K=args.K, max_iter=args.max_iter, rel_tol=args.tol, n_restarts=args.restarts,
                      seed=args.seed, covariance_mode=args.covariance, init_strategy=args.init)
    best, records = select_lw(Y, T, cfg, _parse_range(args.Lw_range), workers=args.threads)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["L_w", "dof", "loglik", "bic"], lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec.as_row())
    stage.write_text("bic.csv", buf.getvalue())
    stage.write_text("select.json", json.dumps({"L_w": best}) + "\n")
    manifest.seeds["train"] = cfg.seed
    print(best)


def cmd_synth(args, stage, manifest):
    ss = np.random.SeedSequence(args.seed)
    gen_ss, data_ss, img_ss = ss.spawn(3)
    dims = Dims(D=args.D, Lt=args.Lt, Lw=args.Lw, K=args.K)
    gen = generate_synthetic_model(np.random.default_rng(gen_ss), dims, args.separation,
                                   noise=args.noise)
    ds = synthetic_dataset(gen, args.N, np.random.default_rng(data_ss))
    save_model(stage.path("generator.hgllim"), ModelArchive(gen, names=list(ds.names)))
    save_dataset(ds, stage.path(f"dataset.{args.format}"), args.format)
    if args.height and args.width:
        rows, cols = _parse_pair(args.grid, "x", int, "grid")
        img = generate_image(ds, np.random.default_rng(img_ss), height=args.height, width=args.width,
                             grid=(rows, cols), snr_db=_parse_snr(args.snr),
                             n_neighbors=args.neighbors)
        save_image(img, stage.path("image.bin"))
    manifest.seeds.update({"root": args.seed, "spawned": ["generator", "dataset", "image"]})


def cmd_bench(args, stage, manifest):
    rows, cols = _parse_pair(args.grid, "x", int, "grid")
    tcfg = TrainConfig(K=args.K, n_restarts=args.restarts, seed=args.seed, max_iter=args.max_iter,
                       rel_tol=args.tol)
    cfg = BenchConfig(n_images=args.images, height=args.height, width=args.width, grid=(rows, cols),
                      snr_db=_parse_snr(args.snr), D=args.D, gen_K=args.gen_K, Lt=args.Lt,
                      separation=args.separation, gen_noise=args.noise, n_train=args.n_train,
                      pool_size=args.pool, n_neighbors=args.neighbors,
                      connectivity=args.connectivity, train=tcfg, seed=args.seed)
    result = run_benchmark(cfg)
    result.write(stage.dir)
    stage.files += ["results.csv", "ttest.json"]
    manifest.config["bench"] = config_dict(cfg)
    manifest.seeds.update({"root": args.seed, "train": tcfg.seed})
    doc = result.ttest_dict()
    print(f"t={doc['t']:.4f} p={doc['p']:.3g}")
    for method, means in doc["mean_nrmse"].items():
        print(method, " ".join(f"{k}={v:.4f}" for k, v in means.items()))


# --- parser ---------------------------------------------------------------

def _global_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker and BLAS thread cap (1 = bit-reproducible)")
    g.add_argument("--config", help="JSON file whose keys mirror flag names")
    g.add_argument("--out-dir", default=".")
    g.add_argument("--log-level", default="WARNING")
    return p


def _train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["csv", "bin"], default=None)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--covariance", choices=["isotropic", "equal", "diagonal"], default="isotropic")
    p.add_argument("--init", choices=["kmeans", "random"], default="kmeans")
    p.add_argument("--no-normalize", dest="normalize", action="store_false")


def build_parser():
    parent = _global_parent()
    parser = argparse.ArgumentParser(prog="hgllim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[parent], help="fit a model")
    _train_flags(p)
    p.add_argument("--Lw", type=int, default=0)
    p.add_argument("--beta", default="0", help="'estimated' or a fixed value")
    p.add_argument("--beta-init", type=float, default=0.0)
    p.add_argument("--beta-max", type=float, default=100.0)
    p.add_argument("--graph", help="edge list, one 'u v' pair per line")
    p.add_argument("--lattice", help="HxW raster lattice over the data rows")
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[parent], help="predict parameter maps")
    p.add_argument("--model", required=True)
    p.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--format", choices=["csv", "bin"], default=None)
    p.add_argument("--spatial", action="store_true")
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.add_argument("--graph")
    p.add_argument("--lattice")
    p.add_argument("--beta", default="estimate", help="'estimate' or 'fixed:v[,v...]'")
    p.add_argument("--alpha", choices=["estimate", "fixed"], default=None,
                   help="default: fixed when beta is fixed, estimated otherwise")
    p.add_argument("--beta-max", type=float, default=100.0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-sweeps", type=int, default=200)
    p.add_argument("--weights", choices=["prior", "posterior"], default="prior")
    p.add_argument("--clamp", help="lo:hi bounds on observed parameters")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select", parents=[parent], help="choose Lw by BIC")
    _train_flags(p)
    p.add_argument("--Lw-range", default="0:5")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("synth", parents=[parent], help="generate a dataset and an image")
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--D", type=int, default=20)
    p.add_argument("--Lt", type=int, default=3)
    p.add_argument("--Lw", type=int, default=0)
    p.add_argument("--N", type=int, default=10000)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--format", choices=["csv", "bin"], default="csv")
    p.add_argument("--height", type=int, default=300)
    p.add_argument("--width", type=int, default=400)
    p.add_argument("--grid", default="3x4", help="region rows x columns")
    p.add_argument("--snr", default="6", help="dB, or 'inf' for no noise")
    p.add_argument("--neighbors", type=int, default=15)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", parents=[parent], help="per-pixel vs MRF benchmark")
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--height", type=int, default=100)
    p.add_argument("--width", type=int, default=100)
    p.add_argument("--grid", default="3x4")
    p.add_argument("--snr", default="6")
    p.add_argument("--D", type=int, default=20)
    p.add_argument("--gen-K", type=int, default=5)
    p.add_argument("--Lt", type=int, default=3)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--pool", type=int, default=5000)
    p.add_argument("--neighbors", type=int, default=15)
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)
    p.set_defaults(func=cmd_bench)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv=None):
    """Parse flags; values from ``--config`` act as defaults that flags override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                conf = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config}: {exc}") from None
        if not isinstance(conf, dict):
            raise ConfigError("config file must hold a JSON object")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in conf) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in conf.items()})
        args = parser.parse_args(argv)
    return args


def _exit_code(exc):
    if isinstance(exc, (ParseError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, DimensionMismatch, RegionTooSmall, InsufficientNeighbors)):
        return EXIT_CONFIG
    if isinstance(exc, (NonFinite, DegenerateCovariance, EmptyComponent, ConstantColumn, ConstantTruth,
                        ZeroVariance, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, HGLLiMError):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    raise exc


def main(argv=None):
    try:
        args = parse_args(argv)
    except (ConfigError, OSError) as exc:
        print(f"hgllim: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("hgllim: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    from threadpoolctl import threadpool_limits

    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = RunManifest(args.command, config, {"seed": args.seed})
    try:
        stage = Stage(args.out_dir)
    except OSError as exc:
        print(f"hgllim: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    start = time.perf_counter()
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args, stage, manifest)
        manifest.timings["total_seconds"] = time.perf_counter() - start
        stage.commit(manifest)
    except Exception as exc:
        stage.discard()
        code = _exit_code(exc)
        print(f"hgllim: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
