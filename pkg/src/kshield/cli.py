"""``kshield`` command line: train, build-db, attack, eval, sweep (plus synth for test data).

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import numpy as np

from . import __version__

log = logging.getLogger("kshield")

ARCHS = {"base": (16, 32, 64, 128), "wide": (24, 48, 96, 192)}
FORMATS = ("kshield-container", "cifar10-binary")
DB_FILES = ("index.bin", "pca.bin", "store.bin")


class UsageError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _arch(text):
    if text in ARCHS:
        return ARCHS[text]
    try:
        channels = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--arch must be one of {sorted(ARCHS)} or comma-separated widths") from None
    if len(channels) < 2 or min(channels) < 1:
        raise argparse.ArgumentTypeError("--arch needs at least 2 positive widths")
    return channels


def _pool(text):
    if text == "auto":
        return None
    h, _, w = text.lower().partition("x")
    try:
        return int(h), int(w or h)
    except ValueError:
        raise argparse.ArgumentTypeError("--pool must be 'auto' or HxW, e.g. 8x8") from None


def _load_data(path, fmt, split="train"):
    from .harness.data import load_dataset

    return load_dataset(path, fmt, split)


# train ---------------------------------------------------------------------

def cmd_train(args):
    from .diffnet import ModelConfig, train

    data = _load_data(args.data, args.format)
    if len(data) == 0:
        raise ValueError(f"{args.data}: dataset is empty")
    h, w, c = data.image_shape
    classes = args.classes or data.num_classes
    config = ModelConfig(num_classes=classes, height=h, width=w, in_channels=c, channels=args.arch)
    ck = train(data.images, data.labels, config, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
               batch_size=args.batch_size, seed=args.seed)
    ck.save(args.out)
    print(f"wrote {args.out} (train accuracy {ck.train_accuracy:.4f})")


# build-db ------------------------------------------------------------------

def _pipeline(ck, layer, pool):
    from .features import FeaturePipeline, PoolSpec, default_pool_spec

    ck.config.check_block(layer)
    spec = default_pool_spec(ck.config, layer) if pool is None else PoolSpec(layer, pool)
    _, h, w = ck.config.tap_shape(layer)
    spec.kernel((h, w))
    return FeaturePipeline(ck, spec)


def pipeline_from_files(ck, pca, layer):
    """Rebuild a pipeline from a checkpoint, a PCA file and the tap layer (pool inferred from the PCA input size)."""
    from .features import FeaturePipeline, PoolSpec

    ch, h, w = ck.config.tap_shape(layer)
    if pca.d_in % ch:
        raise ValueError(f"PCA input dim {pca.d_in} does not fit layer {layer} ({ch} channels)")
    cells = pca.d_in // ch
    shapes = [(a, cells // a) for a in range(1, cells + 1)
              if cells % a == 0 and h % a == 0 and w % (cells // a) == 0]
    if not shapes:
        raise ValueError(f"PCA input dim {pca.d_in} matches no pooling of layer {layer}")
    target = min(shapes, key=lambda s: abs(s[0] - s[1]))
    return FeaturePipeline(ck, PoolSpec(layer, target), pca)


def cmd_build_db(args):
    from .diffnet import Checkpoint
    from .harness.data import generate_distractors
    from .index import FlatIndex, PredictionStore, index_save, ivfpq_train

    ck = Checkpoint.load(args.model)
    pipe = _pipeline(ck, args.layer, args.pool)
    if args.pca_dim > pipe.pooled_dim:
        raise UsageError(f"--pca-dim {args.pca_dim} exceeds the pooled dimension {pipe.pooled_dim} of layer {args.layer}")
    data = _load_data(args.data, args.format)
    if len(data) == 0:
        raise ValueError(f"{args.data}: dataset is empty")
    if data.image_shape != (ck.config.height, ck.config.width, ck.config.in_channels):
        raise ValueError(f"data images {data.image_shape} do not match the model input")
    n_db = max(1, int(round(args.db_fraction * len(data))))
    n_dis = int(round(args.distractor_fraction * n_db)) if args.curation == "all" else 0
    order = np.random.default_rng([args.seed, 11]).permutation(len(data))
    rows = np.sort(order[:n_db - n_dis])
    images = data.images[rows]
    ids = rows.astype(np.uint64)
    if n_dis:
        h, w, c = data.image_shape
        dis = generate_distractors(n_dis, ck.config.num_classes, h, w, seed=args.seed + 3, channels=c)
        images = np.concatenate([images, dis.images])
        ids = np.concatenate([ids, 1_000_000_000 + np.arange(n_dis, dtype=np.uint64)])
    pipe = pipe.fit(images, args.pca_dim, args.pca_samples)
    desc = pipe.descriptors(images)
    if args.index == "flat":
        index = FlatIndex(desc, ids)
    else:
        index = ivfpq_train(desc, args.nlist, args.pq_m, args.pq_bits, seed=args.seed).add(desc, ids)
    store = PredictionStore(ck.config.num_classes).put_many(ids, ck.network().predict_proba(images))
    store.check_covers(ids)
    os.makedirs(args.out, exist_ok=True)
    index_save(index, os.path.join(args.out, "index.bin"))
    pipe.pca.save(os.path.join(args.out, "pca.bin"))
    store.save(os.path.join(args.out, "store.bin"))
    print(f"wrote {len(ids)} entries to {args.out}")


def load_db(directory):
    from .features import PCAModel
    from .index import PredictionStore, index_load

    missing = [f for f in DB_FILES if not os.path.exists(os.path.join(directory, f))]
    if missing:
        raise ValueError(f"{directory}: missing database files {missing}")
    return (index_load(os.path.join(directory, "index.bin")), PCAModel.load(os.path.join(directory, "pca.bin")),
            PredictionStore.load(os.path.join(directory, "store.bin")))


# attack --------------------------------------------------------------------

def cmd_attack(args):
    from .attacks import AttackDatabase
    from .diffnet import Checkpoint
    from .harness.data import Dataset, save_container
    from .harness.experiment import AttackSpec, ThreatModel, run_attack

    defense_aware = args.method in ("pgd-pr", "pgd-fs")
    if defense_aware and not args.attack_db:
        raise UsageError(f"--method {args.method} requires --attack-db")
    if defense_aware and not args.attack_data:
        raise UsageError(f"--method {args.method} requires --attack-data (the images indexed by --attack-db)")
    spec = AttackSpec(method=args.method, eps_rel=args.budget, iters=args.iters, restarts=args.restarts,
                      gamma=args.gamma, k_attack=args.k_attack, cw_kappa=args.cw_kappa, cw_lambda=args.cw_lambda,
                      cw_steps=args.cw_steps, cw_lr=args.cw_lr)
    ck = Checkpoint.load(args.model)
    data = _load_data(args.data, args.format, "eval")
    database = None
    if defense_aware:
        index, pca, _ = load_db(args.attack_db)
        pool = _load_data(args.attack_data, args.format)
        ids = np.concatenate([np.asarray(index.list_ids[l]) for l in range(index.nlist)]) if hasattr(
            index, "list_ids") else index.ids
        rows = ids.astype(np.int64)
        if rows.size and rows.max() >= len(pool):
            raise ValueError("attack database ids do not index into --attack-data "
                             "(build it in targeted mode from those images)")
        database = AttackDatabase(pipeline_from_files(ck, pca, args.layer), index, pool.images[rows], rows)
    threat = ThreatModel("white" if defense_aware else "gray", ck, ck, database)
    adv = run_attack(data, threat, spec, args.seed)
    save_container(Dataset(adv, data.labels, data.num_classes, "eval"), args.out)
    _write_sidecar(ck, data, adv, args.out + ".csv")
    print(f"wrote {args.out} and {args.out}.csv")


def _write_sidecar(ck, data, adv, path):
    from .attacks import normalized_l2

    pred = ck.network().predict(adv) if len(adv) else np.zeros(0, np.int64)
    delta = normalized_l2(data.images, adv) if len(adv) else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "prediction", "delta", "success"])
        for i in range(len(adv)):
            w.writerow([i, int(data.labels[i]), int(pred[i]), repr(float(delta[i])), int(pred[i] != data.labels[i])])


# eval / sweep --------------------------------------------------------------

def _experiment(args):
    from .config import load_config, override

    cfg, sw = load_config(args.config)
    if args.seed is not None:
        cfg = override(cfg, "experiment", seed=args.seed)
    return cfg, sw


def cmd_eval(args):
    from .harness.experiment import run_eval
    from .harness.report import write_csv

    cfg, _ = _experiment(args)
    row = run_eval(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_csv([row], os.path.join(args.out, "results.csv"))
    print(f"defended {row.attacked_acc:.4f}, undefended {row.undefended_attacked_acc:.4f}, clean {row.clean_acc:.4f}")


SWEPT_COLUMN = {"K": "K", "budget": "eps_rel", "layer": "layer", "db_size": "N_db", "attack_db_size": "N_db",
                "overlap": "overlap", "weighting": "eps_rel", "combination": "eps_rel", "attack_method": "eps_rel"}


def cmd_sweep(args):
    from .harness.experiment import AXES, apply_axis, sweep
    from .harness.report import plot_png, plot_svg, write_csv

    cfg, sw = _experiment(args)
    axis = args.axis or sw.axis
    if axis not in AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    grid = args.grid.split(",") if args.grid else sw.grid
    if grid is not None:
        grid = [v.strip() for v in grid]
        for v in grid:
            try:
                apply_axis(cfg, axis, v)
            except ValueError as exc:
                raise UsageError(f"invalid {axis} grid value {v!r}: {exc}") from None
    rows = sweep(axis, grid, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_csv(rows, os.path.join(args.out, "results.csv"))
    if sw.plots and not args.no_plots:
        x = sw.x or SWEPT_COLUMN[axis]
        plot_svg(rows, x, sw.y, sw.series, os.path.join(args.out, f"{axis}.svg"))
        plot_png(rows, x, sw.y, sw.series, os.path.join(args.out, f"{axis}.png"))
    print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'results.csv')}")


# synth ---------------------------------------------------------------------

def cmd_synth(args):
    from .harness.data import generate_synthetic, save_container

    data = generate_synthetic(args.classes, args.per_class, args.height, args.width, seed=args.seed)
    save_container(data, args.out)
    print(f"wrote {len(data)} images to {args.out}")


# parser --------------------------------------------------------------------

def _common(p):
    p.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 keeps every output bit-reproducible")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    from .config import describe_defaults

    parser = argparse.ArgumentParser(prog="kshield", formatter_class=_Formatter,
                                     description="Nearest-neighbour defense against adversarial images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train the CNN classifier", formatter_class=_Formatter)
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--format", choices=FORMATS, default="kshield-container", help="dataset file format")
    p.add_argument("--arch", type=_arch, default="base", help="'base', 'wide' or comma-separated block widths")
    p.add_argument("--classes", type=int, default=0, help="class count; 0 takes it from the data")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--lr", type=float, default=0.02, help="SGD learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--seed", type=int, default=0, help="seeds init and shuffling")
    p.add_argument("--out", required=True, help="checkpoint path")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-db", help="index a dataset and store its predictions", formatter_class=_Formatter,
                       description=f"Writes {', '.join(DB_FILES)} into --out.")
    p.add_argument("--data", required=True, help="database images")
    p.add_argument("--format", choices=FORMATS, default="kshield-container", help="dataset file format")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--layer", type=int, default=4, help="feature tap block (the deepest by default)")
    p.add_argument("--pool", type=_pool, default="auto", help="pooled grid HxW or auto (at most 8x8 cells)")
    p.add_argument("--pca-dim", type=int, default=32, help="PCA output dimension")
    p.add_argument("--pca-samples", type=int, default=0, help="PCA fit subsample; 0 uses every image")
    p.add_argument("--index", choices=("flat", "ivfpq"), default="flat", help="index type")
    p.add_argument("--nlist", type=int, default=64, help="IVF lists")
    p.add_argument("--pq-m", type=int, default=8, help="PQ subquantizers")
    p.add_argument("--pq-bits", type=int, default=8, help="bits per PQ code")
    p.add_argument("--curation", choices=("targeted", "all"), default="targeted",
                   help="'all' mixes in distractor images")
    p.add_argument("--distractor-fraction", type=float, default=0.5, help="distractor share in 'all' mode")
    p.add_argument("--db-fraction", type=float, default=1.0, help="share of --data to index")
    p.add_argument("--seed", type=int, default=0, help="seeds IVF-PQ training and distractors")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("attack", help="generate adversarial images", formatter_class=_Formatter,
                       description="Writes an adversarial dataset container plus a per-image sidecar CSV (OUT.csv).")
    p.add_argument("--model", required=True, help="attacked checkpoint")
    p.add_argument("--data", required=True, help="clean images to attack")
    p.add_argument("--format", choices=FORMATS, default="kshield-container", help="dataset file format")
    p.add_argument("--method", choices=("fgsm", "ifgsm", "pgd", "cw", "pgd-pr", "pgd-fs"), default="pgd",
                   help="attack procedure")
    p.add_argument("--budget", type=float, default=0.06, help="normalized L2 budget")
    p.add_argument("--iters", type=int, default=10, help="attack iterations")
    p.add_argument("--restarts", type=int, default=1, help="random restarts (PGD family)")
    p.add_argument("--gamma", type=float, default=0.05, help="PGD-PR neighbour-loss weight")
    p.add_argument("--k-attack", type=int, default=50, help="neighbours used by PGD-PR/PGD-FS")
    p.add_argument("--cw-kappa", type=float, default=0.0, help="CW margin kappa")
    p.add_argument("--cw-lambda", type=float, default=1.0, help="CW loss weight lambda")
    p.add_argument("--cw-steps", type=int, default=100, help="CW gradient steps")
    p.add_argument("--cw-lr", type=float, default=0.01, help="CW learning rate")
    p.add_argument("--attack-db", default="", help="build-db directory (required by pgd-pr/pgd-fs)")
    p.add_argument("--attack-data", default="", help="images indexed by --attack-db")
    p.add_argument("--layer", type=int, default=4, help="tap layer of --attack-db")
    p.add_argument("--seed", type=int, default=0, help="seeds random starts")
    p.add_argument("--out", required=True, help="adversarial container path")
    _common(p)
    p.set_defaults(func=cmd_attack)

    keys = "config keys and defaults:\n" + describe_defaults()
    p = sub.add_parser("eval", help="one evaluation row from a config", formatter_class=_Formatter, epilog=keys)
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="overrides [experiment] seed")
    p.add_argument("--out", required=True, help="output directory (results.csv)")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one axis; CSV plus SVG/PNG charts", formatter_class=_Formatter,
                       epilog=keys)
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--axis", default=None, help="overrides [sweep] axis")
    p.add_argument("--grid", default=None, help="comma-separated values; overrides [sweep] grid")
    p.add_argument("--seed", type=int, default=None, help="overrides [experiment] seed")
    p.add_argument("--no-plots", action="store_true", help="skip the SVG/PNG charts")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic dataset container", formatter_class=_Formatter)
    p.add_argument("--classes", type=int, default=10, help="number of classes")
    p.add_argument("--per-class", type=int, default=100, help="images per class")
    p.add_argument("--height", type=int, default=16, help="image height")
    p.add_argument("--width", type=int, default=16, help="image width")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output container path")
    _common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .config import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)   # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"kshield {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"kshield {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
