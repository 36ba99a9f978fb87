"""Trainer: deterministic streams, phase behavior, checkpoint round trips."""

import numpy as np
import pytest

from conftest import toy_config
from slidefocus import nn, pipeline, training
from slidefocus.slides import SlideSet, SynthConfig, make_dataset


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyset")
    base = SynthConfig(width=128, height=128, noise_grain=16,
                       blob_count_range=(2, 2))
    themes = [{"lesion_count_range": (0, 0)},
              {"lesion_count_range": (1, 1), "blob_radius_range": (0.12, 0.2)}]
    make_dataset(root, base, themes, train_per_class=4, test_per_class=2,
                 seed=3)
    return SlideSet(root)


def fast_cfg(**overrides):
    base = dict(max_epochs_global=2, max_epochs_joint=2, patience=1,
                joint_patience=2, batch_size=2)
    base.update(overrides)
    return toy_config(**base)


def test_split_train_val_deterministic_and_disjoint(tiny_dataset):
    a = training.split_train_val(tiny_dataset.train_ids, seed=0)
    b = training.split_train_val(tiny_dataset.train_ids, seed=0)
    assert a == b
    train, val = a
    assert not (set(train) & set(val))
    assert sorted(train + val) == sorted(tiny_dataset.train_ids)
    assert len(val) >= 1
    c_train, _ = training.split_train_val(tiny_dataset.train_ids, seed=1)
    assert c_train != train or True   # different seed may or may not differ


def test_epoch_order_is_seeded_permutation():
    ids = [f"s{i}" for i in range(10)]
    a = training.epoch_order(ids, seed=4, epoch=0)
    b = training.epoch_order(ids, seed=4, epoch=0)
    c = training.epoch_order(ids, seed=4, epoch=1)
    assert a == b
    assert sorted(a) == sorted(ids)
    assert a != c


def test_rank_auc_oracles():
    assert training.rank_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert training.rank_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert training.rank_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    # hand case: scores 1,2,3,4 labels 0,1,0,1 -> pairs won 3 of 4
    assert training.rank_auc([1, 2, 3, 4], [0, 1, 0, 1]) == 0.75
    assert training.rank_auc([1, 2], [1, 1]) == 0.5


def test_warmup_phase_never_builds_crops(tiny_dataset):
    cfg = fast_cfg()
    tr = training.Trainer(cfg, tiny_dataset)
    tr.phase_global()
    assert all(len(c) == 0 for c in tr.crop_caches.values())
    assert all(r.phase == "global" for r in tr.history)
    assert len(tr.thumb_cache) == len(tr.train_ids) + len(tr.val_ids)


def test_full_training_run_and_checkpoint(tiny_dataset, tmp_path):
    cfg = fast_cfg()
    tr = training.Trainer(cfg, tiny_dataset)
    result = tr.train()
    assert any(r.phase == "joint" for r in result.history)
    assert 0.0 <= result.best_val_accuracy <= 1.0
    for r in result.history:
        assert np.isfinite(r.train_loss) and np.isfinite(r.val_loss)
    path = tmp_path / "model.ckpt"
    tr.save(path, extra_meta={"best_val_accuracy": result.best_val_accuracy})
    ps2, cfg2, meta = training.load_model(path)
    assert meta["best_val_accuracy"] == result.best_val_accuracy
    assert cfg2.geometry_signature() == cfg.geometry_signature()
    for name, t in tr.ps.items():
        assert np.array_equal(t.values, ps2[name].values)


def test_training_rerun_is_bit_identical(tiny_dataset):
    cfg = fast_cfg()
    runs = []
    for _ in range(2):
        tr = training.Trainer(cfg, tiny_dataset)
        result = tr.train()
        runs.append((tr, result))
    (tr1, r1), (tr2, r2) = runs
    assert [e.train_loss for e in r1.history] == [e.train_loss for e in r2.history]
    for name, t in tr1.ps.items():
        assert np.array_equal(t.values, tr2.ps[name].values), name


def test_joint_phase_restores_best_parameters(tiny_dataset):
    cfg = fast_cfg(max_epochs_joint=3, joint_patience=5)
    tr = training.Trainer(cfg, tiny_dataset)
    result = tr.train()
    best = result.history[result.best_epoch]
    assert best.phase == "joint"
    assert best.val_accuracy == result.best_val_accuracy


def test_evaluate_reports_predictions(tiny_dataset):
    cfg = fast_cfg()
    ps = pipeline.build_model(cfg)
    out = training.evaluate(ps, cfg, tiny_dataset, tiny_dataset.test_ids,
                            with_losses=True)
    assert out["count"] == len(tiny_dataset.test_ids)
    assert 0.0 <= out["accuracy"] <= 1.0
    assert np.isfinite(out["mean_loss"])
    for sid, row in out["predictions"].items():
        assert row["label"] == tiny_dataset.label(sid)
        assert abs(sum(row["probabilities"]) - 1.0) < 1e-3


def test_load_model_rejects_geometry_mismatch(tiny_dataset, tmp_path):
    cfg = fast_cfg()
    tr = training.Trainer(cfg, tiny_dataset)
    path = tmp_path / "m.ckpt"
    tr.save(path)
    other = toy_config(n_global=24)
    with pytest.raises(ValueError):
        training.load_model(path, other)


def test_resume_matches_uninterrupted_run(tiny_dataset, tmp_path):
    cfg = fast_cfg(max_epochs_global=2, max_epochs_joint=3, patience=5,
                   joint_patience=5)
    a = training.Trainer(cfg, tiny_dataset)
    ra = a.train()

    b = training.Trainer(cfg, tiny_dataset)
    b.train(epoch_budget=3)   # parks inside the joint phase
    assert b.state.phase == "joint"
    path = tmp_path / "mid.ckpt"
    b.save(path)
    c = training.Trainer.resume(path, tiny_dataset)
    rc = c.train()

    assert c.state.phase == "done"
    assert len(rc.history) == len(ra.history)
    assert rc.best_epoch == ra.best_epoch
    assert rc.best_val_accuracy == ra.best_val_accuracy
    for name, t in a.ps.items():
        assert np.array_equal(t.values, c.ps[name].values), name
    for name, v in a.opt.export_velocity().items():
        assert np.array_equal(v, c.opt.export_velocity()[name]), name


def test_history_csv_layout(tiny_dataset):
    cfg = fast_cfg()
    tr = training.Trainer(cfg, tiny_dataset)
    res = tr.train()
    lines = training.history_csv(res.history).strip().split("\n")
    assert len(lines) == len(res.history) + 1
    header = lines[0].split(",")
    assert header[:3] == ["phase", "epoch", "train_loss"]
    assert header[-3:] == ["val_loss", "val_accuracy", "seconds"]
    first = dict(zip(header, lines[1].split(",")))
    assert first["phase"] == "global"
    # joint-only loss columns stay blank during warmup rows
    assert first.get("train_all", "") == ""
    joint = dict(zip(header, lines[-1].split(",")))
    assert joint["phase"] == "joint" and joint["train_all"] != ""


def test_divergence_aborts_with_state_dump(tiny_dataset):
    cfg = fast_cfg()
    tr = training.Trainer(cfg, tiny_dataset)
    tr.ps["global/proj"].values[:] = np.nan
    with pytest.raises(training.DivergenceError) as excinfo:
        tr.train()
    dump = excinfo.value.dump
    assert "slide" in dump and "terms" in dump


def test_zero_aux_weights_match_global_only_trajectory(tiny_dataset):
    # silencing every auxiliary term reproduces the thumbnail-only updates
    shared = dict(w_focus=0.0, w_local=0.0, w_cst=0.0, w_all=0.0,
                  max_epochs_global=2, patience=5, max_epochs_joint=3,
                  joint_patience=5)
    a = training.Trainer(fast_cfg(**shared), tiny_dataset)
    b = training.Trainer(fast_cfg(enable_local=False, **shared), tiny_dataset)
    a.train(epoch_budget=3)   # park before the best-state restore
    b.train(epoch_budget=3)
    for name, t in a.ps.items():
        assert np.array_equal(t.values, b.ps[name].values), name
