"""Threat models, database curation, single evaluations and parameter sweeps.

An :class:`ExperimentConfig` fully determines a row. A :class:`Workbench`
holds the artifacts shared between rows (datasets, checkpoints, feature
pipelines, databases, adversarial sets and neighbour lists) so that a sweep
over defense-side parameters attacks each image only once.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from ..attacks import (ATTACKS, AttackBudget, AttackDatabase, CWConfig, DefenseAwareConfig, attack_cw_l2,
                       attack_fgsm, attack_ifgsm, attack_pgd, attack_pgd_fs, attack_pgd_pr)
from ..defense import DefenseConfig, defend_batch, predict_from_neighbors
from ..diffnet import Checkpoint, ModelConfig, Network, train
from ..features import FeaturePipeline, PoolSpec, default_pool_spec
from ..index import FlatIndex, PredictionStore, ivfpq_train
from .data import Dataset, generate_distractors, generate_synthetic, load_dataset

log = logging.getLogger(__name__)

THREATS = ("gray", "black", "white")
CURATIONS = ("targeted", "all")
AXES = ("K", "budget", "layer", "db_size", "attack_db_size", "overlap", "weighting", "combination",
        "attack_method")
DEFAULT_GRIDS = {"K": (1, 2, 5, 10, 20, 50), "budget": (0.0, 0.02, 0.04, 0.06, 0.08)}

# id ranges keep task, distractor and attacker-pool images apart in one key space
DISTRACTOR_BASE = 1_000_000_000
POOL_BASE = 2_000_000_000
ATTACK_CHUNK = 100


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"       # synthetic | cifar10-binary | kshield-container
    train_path: str = ""
    eval_path: str = ""
    pool_path: str = ""             # attacker-only images for partial-overlap white-box runs
    classes: int = 10
    per_class: int = 500
    eval_size: int = 500
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10-binary", "kshield-container"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source != "synthetic" and not (self.train_path and self.eval_path):
            raise ValueError("file data sources need train_path and eval_path")
        if self.eval_size < 1:
            raise ValueError("evaluation set must not be empty")


@dataclass(frozen=True)
class ModelSpec:
    epochs: int = 20
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    channels: tuple = (16, 32, 64, 128)
    surrogate_channels: tuple = (24, 48, 96, 192)   # black-box attacker architecture
    checkpoint: str = ""            # load instead of training
    surrogate_checkpoint: str = ""


@dataclass(frozen=True)
class FeatureSpec:
    layer: int = 4
    pool: tuple | None = None       # pooled (h, w); None picks the per-layer default
    pca_dim: int = 32
    pca_samples: int = 0            # 0 fits PCA on every database image
    index: str = "flat"             # flat | ivfpq
    nlist: int = 64
    pq_m: int = 8
    pq_bits: int = 8
    nprobe: int = 16

    def __post_init__(self):
        if self.index not in ("flat", "ivfpq"):
            raise ValueError(f"index must be flat or ivfpq, got {self.index!r}")
        if self.pca_dim < 1:
            raise ValueError("pca_dim must be >= 1")


@dataclass(frozen=True)
class AttackSpec:
    method: str = "pgd"
    eps_rel: float = 0.06
    iters: int = 10
    restarts: int = 1
    step: float | None = None
    gamma: float = 0.05
    k_attack: int = 50
    cw_kappa: float = 0.0
    cw_lambda: float = 1.0
    cw_steps: int = 100
    cw_lr: float = 0.01

    def __post_init__(self):
        if self.method not in ATTACKS:
            raise ValueError(f"attack method must be one of {ATTACKS}, got {self.method!r}")
        AttackBudget(self.eps_rel, self.iters, self.step, self.restarts)
        CWConfig(self.cw_kappa, self.cw_lambda, self.cw_steps, self.cw_lr)

    @property
    def defense_aware(self):
        return self.method in ("pgd-pr", "pgd-fs")


@dataclass(frozen=True)
class CurationSpec:
    mode: str = "targeted"
    distractor_fraction: float = 0.5    # share of the database taken by distractors in "all" mode
    db_fraction: float = 1.0            # N_db as a fraction of the training split
    attack_db_fraction: float = 1.0     # attacker database size relative to N_db
    overlap: float = 1.0                # share of the attacker database drawn from the defense database

    def __post_init__(self):
        if self.mode not in CURATIONS:
            raise ValueError(f"curation must be one of {CURATIONS}, got {self.mode!r}")
        for name in ("distractor_fraction", "db_fraction", "attack_db_fraction", "overlap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.db_fraction == 0:
            raise ValueError("db_fraction must be > 0")

    @property
    def distractors(self):
        return self.distractor_fraction if self.mode == "all" else 0.0


@dataclass(frozen=True)
class ThreatModel:
    kind: str
    attack_model: Checkpoint
    defense_model: Checkpoint
    attack_database: AttackDatabase | None = None

    def __post_init__(self):
        if self.kind not in THREATS:
            raise ValueError(f"threat must be one of {THREATS}, got {self.kind!r}")
        if self.kind == "gray" and self.attack_model is not self.defense_model:
            raise ValueError("gray box attacks the defended model itself")
        if self.kind == "black" and self.attack_model is self.defense_model:
            raise ValueError("black box needs a separate attack model")
        if self.kind == "white" and self.attack_database is None:
            raise ValueError("white box needs an attack database")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = DataSpec()
    model: ModelSpec = ModelSpec()
    features: FeatureSpec = FeatureSpec()
    defense: DefenseConfig = DefenseConfig()
    attack: AttackSpec = AttackSpec()
    curation: CurationSpec = CurationSpec()
    threat: str = "gray"
    seed: int = 0

    def __post_init__(self):
        if self.threat not in THREATS:
            raise ValueError(f"threat must be one of {THREATS}, got {self.threat!r}")
        if self.attack.defense_aware and self.threat != "white":
            raise ValueError(f"{self.attack.method} needs the white-box threat model (an attack database)")


@dataclass
class ExperimentRow:
    experiment_id: str
    threat: str
    attack: str
    eps_rel: float
    K: int
    weighting: str
    combination: str
    layer: int
    N_db: int
    curation: str
    overlap: float
    clean_acc: float                # undefended model on clean images
    defended_clean_acc: float
    attacked_acc: float             # defended, on adversarial images
    undefended_attacked_acc: float
    samples: int
    seed: int

    def __post_init__(self):
        for name in ("clean_acc", "defended_clean_acc", "attacked_acc", "undefended_attacked_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} is not an accuracy")


ROW_FIELDS = tuple(f.name for f in fields(ExperimentRow))


def _key(*parts):
    return repr(parts)


def _per_image_step(x, eps_rel, iters):
    """Sign-step size whose L2 norm over ``iters`` steps is ``eps_rel * ||x||``."""
    norms = np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=(1, 2, 3)))
    return (eps_rel * norms / (iters * math.sqrt(x[0].size))).reshape(-1, 1, 1, 1)


class Workbench:
    """Lazily built, cached artifacts for one data/model setup."""

    def __init__(self, data: DataSpec, model: ModelSpec, seed: int = 0):
        self.data_spec, self.model_spec, self.seed = data, model, seed
        self._cache = {}

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # datasets
    def _synthetic(self, per_class, seed, split):
        d = self.data_spec
        return generate_synthetic(d.classes, per_class, d.height, d.width, seed=seed, split=split)

    @property
    def train_set(self) -> Dataset:
        def build():
            d = self.data_spec
            if d.source == "synthetic":
                return self._synthetic(d.per_class, self.seed, "train")
            return load_dataset(d.train_path, d.source, "train")
        return self._cached("train", build)

    @property
    def eval_set(self) -> Dataset:
        def build():
            d = self.data_spec
            if d.source == "synthetic":
                full = self._synthetic(math.ceil(d.eval_size / d.classes), self.seed + 1, "eval")
            else:
                full = load_dataset(d.eval_path, d.source, "eval")
            if len(full) < d.eval_size:
                raise ValueError(f"evaluation source has {len(full)} images, {d.eval_size} requested")
            return full.subset(np.arange(d.eval_size))
        return self._cached("eval", build)

    @property
    def pool_set(self) -> Dataset:
        def build():
            d = self.data_spec
            if d.source == "synthetic":
                return self._synthetic(d.per_class, self.seed + 2, "train")
            if not d.pool_path:
                raise ValueError("partial-overlap attack databases need pool_path for file data")
            return load_dataset(d.pool_path, d.source, "train")
        return self._cached("pool", build)

    def distractors(self, count) -> Dataset:
        d = self.data_spec
        shape = self.train_set.image_shape
        return self._cached(("distractors", count), lambda: generate_distractors(
            count, self.train_set.num_classes, shape[0], shape[1], seed=self.seed + 3, channels=shape[2]))

    @property
    def db_order(self):
        """Seeded permutation of the training split; database subsets are its prefixes."""
        return self._cached("order", lambda: np.random.default_rng([self.seed, 11]).permutation(len(self.train_set)))

    # models
    def _train(self, channels, seed, path):
        if path:
            return Checkpoint.load(path)
        ts, m = self.train_set, self.model_spec
        h, w, c = ts.image_shape
        config = ModelConfig(num_classes=ts.num_classes, height=h, width=w, in_channels=c, channels=tuple(channels))
        return train(ts.images, ts.labels, config, epochs=m.epochs, lr=m.lr, momentum=m.momentum,
                     batch_size=m.batch_size, seed=seed)

    @property
    def checkpoint(self) -> Checkpoint:
        m = self.model_spec
        return self._cached("model", lambda: self._train(m.channels, self.seed, m.checkpoint))

    @property
    def surrogate(self) -> Checkpoint:
        m = self.model_spec
        return self._cached("surrogate", lambda: self._train(m.surrogate_channels, self.seed + 1,
                                                             m.surrogate_checkpoint))

    @property
    def network(self) -> Network:
        return self._cached("network", lambda: Network(self.checkpoint))

    def probs(self, kind, dataset):
        return self._cached(("probs", kind), lambda: self.network.predict_proba(dataset.images))

    # features and databases
    def pipeline(self, fs: FeatureSpec) -> FeaturePipeline:
        def build():
            ck = self.checkpoint
            pool = default_pool_spec(ck.config, fs.layer) if fs.pool is None else PoolSpec(fs.layer, tuple(fs.pool))
            pipe = FeaturePipeline(ck, pool)
            if fs.pca_dim > pipe.pooled_dim:
                raise ValueError(f"pca_dim {fs.pca_dim} exceeds pooled dimension {pipe.pooled_dim}")
            return pipe.fit(self.train_set.images, fs.pca_dim, fs.pca_samples)
        return self._cached(("pipe", fs.layer, fs.pool, fs.pca_dim, fs.pca_samples), build)

    def descriptors(self, fs, kind, dataset):
        return self._cached(("desc", fs.layer, fs.pool, fs.pca_dim, fs.pca_samples, kind),
                            lambda: self.pipeline(fs).descriptors(dataset.images))

    def _index(self, fs, vectors, ids):
        if fs.index == "flat":
            return FlatIndex(vectors, ids)
        return ivfpq_train(vectors, fs.nlist, fs.pq_m, fs.pq_bits, seed=self.seed).add(vectors, ids)

    def defense_db(self, fs: FeatureSpec, cur: CurationSpec):
        """(index, store, n_db) for the curated defense database."""
        def build():
            n_db, n_task, n_dis = self.db_sizes(cur)
            task_rows = np.sort(self.db_order[:n_task])
            vecs = [self.descriptors(fs, "train", self.train_set)[task_rows]]
            ids = [task_rows.astype(np.uint64)]
            store = PredictionStore(self.train_set.num_classes)
            store.put_many(ids[0], self.probs("train", self.train_set)[task_rows])
            if n_dis:
                dis = self.distractors(n_dis)
                dis_ids = DISTRACTOR_BASE + np.arange(n_dis, dtype=np.uint64)
                vecs.append(self.pipeline(fs).descriptors(dis.images))
                ids.append(dis_ids)
                store.put_many(dis_ids, self.network.predict_proba(dis.images))
            vecs, ids = np.concatenate(vecs), np.concatenate(ids)
            index = self._index(fs, vecs, ids)
            store.check_covers(ids)
            return index, store, n_db
        return self._cached(("db", fs.layer, fs.pool, fs.pca_dim, fs.pca_samples, fs.index, cur.mode,
                             cur.distractors, cur.db_fraction), build)

    def db_sizes(self, cur: CurationSpec):
        n_db = max(1, int(round(cur.db_fraction * len(self.train_set))))
        n_dis = int(round(cur.distractors * n_db))
        return n_db, n_db - n_dis, n_dis

    def attack_db(self, fs: FeatureSpec, cur: CurationSpec) -> AttackDatabase:
        """Attacker database: ``overlap`` of it shared with the defense database, the rest from a disjoint pool."""
        def build():
            n_db, n_task, _ = self.db_sizes(cur)
            n_att = max(1, int(round(cur.attack_db_fraction * n_db)))
            n_shared = min(int(round(cur.overlap * n_att)), n_task)
            n_fresh = n_att - n_shared
            shared = np.sort(self.db_order[:n_task][:n_shared])
            images = [self.train_set.images[shared]]
            vecs = [self.descriptors(fs, "train", self.train_set)[shared]]
            ids = [shared.astype(np.uint64)]
            if n_fresh:
                pool = self.pool_set
                if len(pool) < n_fresh:
                    raise ValueError(f"attacker pool has {len(pool)} images, {n_fresh} needed")
                images.append(pool.images[:n_fresh])
                vecs.append(self.descriptors(fs, "pool", pool)[:n_fresh])
                ids.append(POOL_BASE + np.arange(n_fresh, dtype=np.uint64))
            ids = np.concatenate(ids)
            return AttackDatabase(self.pipeline(fs), FlatIndex(np.concatenate(vecs), ids),
                                  np.concatenate(images), ids)
        return self._cached(("adb", fs.layer, fs.pool, fs.pca_dim, fs.pca_samples, cur.mode, cur.distractors,
                             cur.db_fraction, cur.attack_db_fraction, cur.overlap), build)

    def threat_model(self, cfg: ExperimentConfig) -> ThreatModel:
        ck = self.checkpoint
        if cfg.threat == "black":
            return ThreatModel("black", self.surrogate, ck)
        if cfg.threat == "white":
            return ThreatModel("white", ck, ck, self.attack_db(cfg.features, cfg.curation))
        return ThreatModel("gray", ck, ck)

    # attacks
    def adversarial(self, cfg: ExperimentConfig) -> np.ndarray:
        a = cfg.attack
        parts = [cfg.threat, a]
        if cfg.threat == "white" and a.defense_aware:
            f, c = cfg.features, cfg.curation
            parts += [f.layer, f.pool, f.pca_dim, f.pca_samples, c.mode, c.distractors, c.db_fraction,
                      c.attack_db_fraction, c.overlap]
        return self._cached(("adv", _key(*parts)), lambda: run_attack(self.eval_set, self.threat_model(cfg), a,
                                                                      cfg.seed, cfg.features))

    def neighbors(self, cfg: ExperimentConfig, which: str):
        """Neighbour lists (depth ≥ 50) of the clean or adversarial eval images in the defense database."""
        fs, cur = cfg.features, cfg.curation
        depth = max(50, cfg.defense.k)
        dbkey = (fs.layer, fs.pool, fs.pca_dim, fs.pca_samples, fs.index, fs.nprobe, cur.mode, cur.distractors,
                 cur.db_fraction)

        def build():
            images = self.eval_set.images if which == "clean" else self.adversarial(cfg)
            index, store, _ = self.defense_db(fs, cur)
            dcfg = replace(cfg.defense, nprobe=fs.nprobe if fs.index == "ivfpq" else None)
            _, sets = defend_batch(images, self.pipeline(fs), index, store, dcfg, max_k=depth)
            return sets
        key = ("nbrs", which, depth, dbkey) if which == "clean" else (
            "nbrs", which, depth, dbkey, _key(cfg.threat, cfg.attack, cfg.curation))
        return self._cached(key, build)


def run_attack(eval_set: Dataset, threat: ThreatModel, a: AttackSpec, seed: int,
               features: FeatureSpec | None = None) -> np.ndarray:
    """Adversarial versions of every eval image under ``threat``, attacked in chunks."""
    if a.defense_aware and threat.attack_database is None:
        raise ValueError(f"{a.method} needs an attack database")
    model = Network(threat.attack_model)
    budget = AttackBudget(a.eps_rel, a.iters, a.step, a.restarts, seed)
    out = np.empty_like(eval_set.images)
    for start in range(0, len(eval_set), ATTACK_CHUNK):
        x = eval_set.images[start:start + ATTACK_CHUNK]
        y = eval_set.labels[start:start + ATTACK_CHUNK]
        if a.eps_rel == 0:
            adv = x
        elif a.method == "fgsm":
            adv = attack_fgsm(model, x, y, _per_image_step(x, a.eps_rel, 1)).images
        elif a.method == "ifgsm":
            adv = attack_ifgsm(model, x, y, _per_image_step(x, a.eps_rel, a.iters), a.iters).images
        elif a.method == "pgd":
            adv = attack_pgd(model, x, y, budget, index_offset=start).images
        elif a.method == "cw":
            cw = CWConfig(a.cw_kappa, a.cw_lambda, a.cw_steps, a.cw_lr)
            adv = attack_cw_l2(model, x, y, cw, max_delta=a.eps_rel).images
        else:
            dac = DefenseAwareConfig(threat.attack_database, a.gamma, a.k_attack)
            if a.method == "pgd-pr":
                adv = attack_pgd_pr(model, x, y, dac, budget, index_offset=start).images
            else:
                feature_fn = threat.attack_database.pipeline.graph
                adv = attack_pgd_fs(feature_fn, x, dac, budget, index_offset=start).images
        out[start:start + len(x)] = adv
    return out


def _acc(pred, labels):
    return float(np.mean(pred == labels))


def run_eval(cfg: ExperimentConfig, bench: Workbench | None = None, experiment_id: str = "eval") -> ExperimentRow:
    """Attack every eval image under the configured threat model; score with and without the defense."""
    bench = bench or Workbench(cfg.data, cfg.model, cfg.seed)
    ev = bench.eval_set
    if len(ev) == 0:
        raise ValueError("evaluation set is empty")
    _, store, n_db = bench.defense_db(cfg.features, cfg.curation)
    net = bench.network
    clean = _acc(net.predict(ev.images), ev.labels)
    defended_clean = _acc(predict_from_neighbors(bench.neighbors(cfg, "clean"), store, cfg.defense), ev.labels)
    if cfg.attack.eps_rel == 0:
        attacked, undefended = defended_clean, clean
    else:
        adv = bench.adversarial(cfg)
        undefended = _acc(net.predict(adv), ev.labels)
        attacked = _acc(predict_from_neighbors(bench.neighbors(cfg, "adv"), store, cfg.defense), ev.labels)
    c = cfg.curation
    return ExperimentRow(
        experiment_id=experiment_id, threat=cfg.threat, attack=cfg.attack.method, eps_rel=cfg.attack.eps_rel,
        K=cfg.defense.k, weighting=cfg.defense.weighting, combination=cfg.defense.combination,
        layer=cfg.features.layer, N_db=n_db, curation=c.mode,
        overlap=c.overlap if cfg.threat == "white" else 0.0,
        clean_acc=clean, defended_clean_acc=defended_clean, attacked_acc=attacked,
        undefended_attacked_acc=undefended, samples=len(ev), seed=cfg.seed)


def apply_axis(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """``base`` with one sweep axis set to ``value``; validation errors surface here."""
    if axis == "K":
        return replace(base, defense=replace(base.defense, k=int(value)))
    if axis == "weighting":
        return replace(base, defense=replace(base.defense, weighting=str(value)))
    if axis == "combination":
        return replace(base, defense=replace(base.defense, combination=str(value)))
    if axis == "budget":
        return replace(base, attack=replace(base.attack, eps_rel=float(value)))
    if axis == "attack_method":
        return replace(base, attack=replace(base.attack, method=str(value)))
    if axis == "layer":
        # an explicit pool grid rarely divides every tap, so each layer gets its default
        return replace(base, features=replace(base.features, layer=int(value), pool=None))
    if axis == "db_size":
        return replace(base, curation=replace(base.curation, db_fraction=float(value)))
    if axis == "attack_db_size":
        return replace(base, curation=replace(base.curation, attack_db_fraction=float(value)))
    if axis == "overlap":
        return replace(base, curation=replace(base.curation, overlap=float(value)))
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")


def sweep(axis: str, grid, base: ExperimentConfig, bench: Workbench | None = None) -> list:
    """One row per grid value, all sharing ``base.seed``. Every grid point is validated before any run."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    grid = list(DEFAULT_GRIDS.get(axis, ())) if grid is None else list(grid)
    if not grid:
        raise ValueError(f"empty grid for axis {axis}")
    configs = [apply_axis(base, axis, v) for v in grid]
    if axis == "layer":
        ck_blocks = len(base.model.channels)
        bad = [c.features.layer for c in configs if not 1 <= c.features.layer <= ck_blocks]
        if bad:
            raise ValueError(f"layer {bad[0]} outside 1..{ck_blocks}")
    bench = bench or Workbench(base.data, base.model, base.seed)
    rows = []
    for i, cfg in enumerate(configs):
        log.info("sweep %s: %s = %s", axis, axis, grid[i])
        rows.append(run_eval(cfg, bench, experiment_id=f"{axis}-{i}"))
    return rows

