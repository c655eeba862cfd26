from dataclasses import replace

import numpy as np
import pytest

from kshield.defense import DefenseConfig, defend_batch
from kshield.harness.data import (Dataset, generate_distractors, generate_synthetic, load_cifar10, load_container,
                                  load_dataset, save_container)
from kshield.harness.experiment import (DISTRACTOR_BASE, POOL_BASE, ROW_FIELDS, AttackSpec, CurationSpec, DataSpec,
                                        ExperimentConfig, FeatureSpec, ModelSpec, ThreatModel, Workbench, apply_axis,
                                        run_eval, sweep)
from kshield.harness.report import plot_png, plot_svg, read_csv, rows_to_csv, svg_chart, write_csv


def cifar_bytes(labels, seed=0):
    rng = np.random.default_rng(seed)
    recs = [bytes([lab]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes() for lab in labels]
    return b"".join(recs)


def test_cifar_layout(tmp_path):
    path = tmp_path / "batch.bin"
    blob = cifar_bytes(list(range(10)))
    assert len(blob) == 30730
    path.write_bytes(blob)
    ds = load_dataset(path, "cifar10-binary")
    assert len(ds) == 10 and ds.images.shape == (10, 32, 32, 3)
    assert ds.labels.tolist() == list(range(10))
    # channel-major record: byte 1 is red (0, 0), byte 1025 is green (0, 0)
    assert ds.images[3, 0, 0, 0] == blob[3 * 3073 + 1] / 255.0
    assert ds.images[3, 0, 0, 1] == blob[3 * 3073 + 1025] / 255.0


def test_cifar_scaling_empty_and_truncated(tmp_path):
    rec = bytearray(cifar_bytes([1]))
    rec[1], rec[2] = 255, 0
    (tmp_path / "one.bin").write_bytes(bytes(rec))
    ds = load_cifar10(tmp_path / "one.bin")
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 1, 0] == 0.0
    (tmp_path / "empty.bin").write_bytes(b"")
    assert len(load_cifar10(tmp_path / "empty.bin")) == 0
    (tmp_path / "bad.bin").write_bytes(cifar_bytes([0, 1])[:-7])
    with pytest.raises(ValueError, match="byte offset 3073"):
        load_cifar10(tmp_path / "bad.bin")


def test_container_round_trip(tmp_path):
    ds = generate_synthetic(3, 4, 8, 8, seed=1)
    path = tmp_path / "d.ksd"
    save_container(ds, path)
    blob = path.read_bytes()
    assert blob[:8] == b"KSDATA01"
    assert len(blob) == 8 + 8 + 4 + 4 + 4 + 1 + 12 * (4 + 4 * 8 * 8 * 3)
    back = load_container(path)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 3
    path.write_bytes(blob[:-10])
    with pytest.raises(ValueError, match="byte offset"):
        load_container(path)
    empty = tmp_path / "e.ksd"
    save_container(ds.subset([]), empty)
    assert len(load_container(empty)) == 0


def test_synthetic_determinism_and_edges():
    a = generate_synthetic(4, 5, 8, 8, seed=3)
    b = generate_synthetic(4, 5, 8, 8, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, generate_synthetic(4, 5, 8, 8, seed=4).images)
    assert np.bincount(a.labels).tolist() == [5] * 4
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert len(generate_synthetic(4, 0)) == 0
    with pytest.raises(ValueError):
        generate_synthetic(1, 5)
    dis = generate_distractors(12, 4, 8, 8)
    assert dis.split == "distractor" and dis.labels.min() >= 4


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 2, 2, 1), 2.0), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2, 2, 1)), [5], 2)


def row(i, attack="pgd", acc=0.5):
    from kshield.harness.experiment import ExperimentRow

    return ExperimentRow(f"K-{i}", "gray", attack, 0.06, [1, 5, 50][i % 3], "cbw-d", "soft", 2, 100, "targeted",
                         0.0, 0.9, 0.85, acc + 0.1 * i / 3, 0.1, 50, 0)


def test_csv_round_trip_and_header_only(tmp_path):
    rows = [row(i) for i in range(3)] + [row(i, "pgd-fs", 1 / 3) for i in range(3)]
    path = tmp_path / "r.csv"
    write_csv(rows, path)
    assert read_csv(path) == rows
    assert path.read_text().splitlines()[0] == ",".join(ROW_FIELDS)
    write_csv([], path)
    assert path.read_text() == ",".join(ROW_FIELDS) + "\n" and read_csv(path) == []


def test_svg_one_polyline_per_series(tmp_path):
    rows = [row(i) for i in range(3)] + [row(i, "pgd-fs") for i in range(3)] + [row(0, "cw")]
    svg = svg_chart(rows, "K", "attacked_acc", "attack")
    assert svg.count("<polyline") == 3 and "<script" not in svg
    plot_svg(rows, "K", "attacked_acc", "attack", tmp_path / "k.svg")
    plot_png(rows, "K", "attacked_acc", "attack", tmp_path / "k.png")
    assert (tmp_path / "k.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError):
        svg_chart(rows, "K", "nope", "attack")


def test_threat_model_invariants():
    from kshield.diffnet import Checkpoint, ModelConfig, init_params

    cfg = ModelConfig(num_classes=2, height=8, width=8, channels=(4, 8))
    a, b = Checkpoint(cfg, init_params(cfg, 0)), Checkpoint(cfg, init_params(cfg, 1))
    ThreatModel("gray", a, a)
    with pytest.raises(ValueError):
        ThreatModel("gray", a, b)
    with pytest.raises(ValueError):
        ThreatModel("black", a, a)
    with pytest.raises(ValueError):
        ThreatModel("white", a, a)


def tiny_config(**kw):
    cfg = ExperimentConfig(
        data=DataSpec(classes=3, per_class=24, eval_size=15, height=8, width=8),
        model=ModelSpec(epochs=3, channels=(4, 8), surrogate_channels=(6, 12)),
        features=FeatureSpec(layer=2, pca_dim=8),
        defense=DefenseConfig(k=5),
        attack=AttackSpec(eps_rel=0.06, iters=3),
        curation=CurationSpec(),
        seed=0,
    )
    return replace(cfg, **kw)


@pytest.fixture(scope="module")
def bench():
    cfg = tiny_config()
    return Workbench(cfg.data, cfg.model, cfg.seed)


def test_eval_zero_budget_equals_clean(bench):
    cfg = tiny_config()
    r = run_eval(apply_axis(cfg, "budget", 0.0), bench)
    assert r.attacked_acc == r.defended_clean_acc and r.undefended_attacked_acc == r.clean_acc
    assert r.samples == 15 and r.N_db == 72
    attacked = run_eval(cfg, bench)
    assert attacked.clean_acc == r.clean_acc
    for v in (attacked.clean_acc, attacked.attacked_acc, attacked.undefended_attacked_acc):
        assert 0 <= v <= 1


def test_k_sweep_shares_clean_fields(bench):
    rows = sweep("K", [1, 5, 50], tiny_config(), bench)
    assert [r.K for r in rows] == [1, 5, 50]
    assert len({r.clean_acc for r in rows}) == 1 and len({r.undefended_attacked_acc for r in rows}) == 1
    assert [r.experiment_id for r in rows] == ["K-0", "K-1", "K-2"]


def test_db_size_sweep_rows(bench):
    rows = sweep("db_size", [0.125, 0.25, 0.5, 1.0], apply_axis(tiny_config(), "budget", 0.0), bench)
    assert [r.N_db for r in rows] == [9, 18, 36, 72]


def test_invalid_axis_values_rejected_before_running():
    calls = []

    class Spy(Workbench):
        def defense_db(self, *a):
            calls.append(a)
            return super().defense_db(*a)

    cfg = tiny_config()
    spy = Spy(cfg.data, cfg.model)
    with pytest.raises(ValueError):
        sweep("K", [5, 0], cfg, spy)
    with pytest.raises(ValueError):
        sweep("layer", [1, 3], cfg, spy)
    with pytest.raises(ValueError):
        sweep("nope", [1], cfg, spy)
    with pytest.raises(ValueError):
        sweep("K", [], cfg, spy)
    assert calls == []


def test_self_retrieval_invariant(bench):
    cfg = tiny_config()
    index, store, _ = bench.defense_db(cfg.features, cfg.curation)
    train = bench.train_set
    labels, _ = defend_batch(train.images, bench.pipeline(cfg.features), index, store, DefenseConfig(k=1))
    model_pred = bench.network.predict(train.images)
    assert np.array_equal(labels, model_pred)


def test_curation_modes(bench):
    cfg = tiny_config()
    idx_t, store_t, n_t = bench.defense_db(cfg.features, CurationSpec(mode="targeted", distractor_fraction=0.5))
    idx_a, store_a, n_a = bench.defense_db(cfg.features, CurationSpec(mode="all", distractor_fraction=0.5))
    assert n_t == n_a == len(idx_t) == len(idx_a) == 72
    ids_t, ids_a = idx_t.ids.astype(np.int64), idx_a.ids.astype(np.int64)
    assert ids_t.max() < 72
    assert (ids_a >= DISTRACTOR_BASE).sum() == 36
    store_a.check_covers(idx_a.ids)
    row_all = run_eval(replace(cfg, curation=CurationSpec(mode="all", distractor_fraction=0.5)), bench)
    assert row_all.curation == "all"


def test_attack_db_overlap(bench):
    cfg = tiny_config()
    full = bench.attack_db(cfg.features, CurationSpec(overlap=1.0))
    index, _, _ = bench.defense_db(cfg.features, CurationSpec())
    assert set(full.ids.tolist()) == set(index.ids.tolist())
    half = bench.attack_db(cfg.features, CurationSpec(overlap=0.5))
    assert (half.ids < 72).sum() == 36 and (half.ids >= POOL_BASE).sum() == 36
    none = bench.attack_db(cfg.features, CurationSpec(overlap=0.0))
    assert not set(none.ids.tolist()) & set(index.ids.tolist())


def test_white_box_overlap_sweep(bench):
    cfg = tiny_config(threat="white", attack=AttackSpec(method="pgd-fs", eps_rel=0.06, iters=2, k_attack=5))
    rows = sweep("overlap", [0.0, 0.5, 1.0], cfg, bench)
    assert [r.overlap for r in rows] == [0.0, 0.5, 1.0]
    assert all(r.threat == "white" and r.attack == "pgd-fs" for r in rows)


def test_defense_aware_attack_needs_white_box():
    with pytest.raises(ValueError):
        tiny_config(attack=AttackSpec(method="pgd-pr"))


def test_sweep_rows_are_deterministic(bench):
    cfg = tiny_config()
    a = rows_to_csv(sweep("budget", [0.0, 0.04], cfg, bench))
    b = rows_to_csv(sweep("budget", [0.0, 0.04], cfg, Workbench(cfg.data, cfg.model, cfg.seed)))
    assert a == b
