import json

import numpy as np
import pytest

from vcil import checkpoint, harness
from vcil.harness import AccuracyMatrix, TaskData, TrainConfig

from oracle import tiny_experiment


# -- metrics ------------------------------------------------------------------------------

def test_metric_examples():
    acc = [0.9, 0.8, 0.7]
    assert harness.bwf(acc) == pytest.approx(0.15)
    assert harness.avg_acc(acc) == pytest.approx(0.8)
    assert harness.avg_acc(acc, paper_formula=True) == pytest.approx(0.85)
    assert harness.bwf([0.5, 0.5]) == 0.0
    with pytest.raises(ValueError):
        harness.bwf([0.9])
    with pytest.raises(ValueError):
        harness.avg_acc([0.9], paper_formula=True)


def test_bwf_matches_pairwise_definition():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.random(rng.integers(2, 9))
        ref = np.mean([a[i] - a[-1] for i in range(len(a) - 1)])
        assert harness.bwf(a) == pytest.approx(ref, abs=1e-12)


def test_accuracy_matrix_rows_and_csv():
    m = AccuracyMatrix()
    m.add_row([1.0], 1.0)
    m.add_row([0.5, 0.75], 0.625)
    with pytest.raises(ValueError):
        m.add_row([0.1], 0.1)
    with pytest.raises(ValueError):
        m.add_row([0.1, 0.2, 1.5], 0.5)
    back = AccuracyMatrix.from_csv(m.to_csv())
    assert back.acc == m.acc and back.pooled == m.pooled
    assert harness.bwf(m) == pytest.approx(0.375)


def test_train_config_validation():
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="at most one"):
        TrainConfig(mlp_adapter=True)
    with pytest.raises(ValueError, match="sep_ada"):
        TrainConfig(sep_ada=False)
    with pytest.raises(ValueError):
        TrainConfig(ce_scope="old")
    c = TrainConfig(sep_ada=False, relation_recovery=False, compensation=False)
    assert c.mode == "finetune" and not c.causal
    assert TrainConfig(sep_ada=False, relation_recovery=False, compensation=False, mlp_adapter=True).mode \
        == "mlp_adapter"


def test_label_map_and_exemplars():
    cfg = tiny_experiment()
    corpus = harness.corpus_for(cfg)
    stream = harness.stream_for(cfg, corpus)
    lmap = harness.label_map(stream)
    assert sorted(lmap.values()) == list(range(4))
    assert [lmap[c] for c in stream.tasks[0].classes] == [0, 1]
    ex = harness.exemplar_set(corpus.train, [0, 1, 2], 2, seed=1, task=1)
    assert np.bincount(ex.labels).tolist() == [2, 2, 2]
    again = harness.exemplar_set(corpus.train, [0, 1, 2], 2, seed=1, task=1)
    assert np.array_equal(ex.sample_ids, again.sample_ids)


# -- a tiny protocol driven by hand ---------------------------------------------------------

def _setup(**kw):
    cfg = tiny_experiment(**kw)
    corpus = harness.corpus_for(cfg)
    stream = harness.stream_for(cfg, corpus)
    lmap = harness.label_map(stream)
    model = harness.build_model(cfg)
    datas = [TaskData(t.index, list(t.classes), corpus.train.of_classes(t.classes), lmap) for t in stream.tasks]
    return cfg, corpus, stream, lmap, model, datas


def _advance_to_task1(cfg, model, datas):
    model.expand_for_task(0, len(datas[0].classes))
    harness.run_task(model, datas[0], cfg.train)
    model.expand_for_task(1, len(datas[1].classes))


@pytest.mark.parametrize("flags", [{}, dict(sep_ada=False, relation_recovery=False, compensation=False),
                                   dict(sep_ada=False, relation_recovery=False, compensation=False,
                                        mlp_adapter=True)])
def test_freezing_invariance_after_task_epoch(flags):
    cfg, _, _, _, model, datas = _setup(**flags)
    _advance_to_task1(cfg, model, datas)
    trainable = set(model.trainable_names())
    frozen = {k: p.data.copy() for k, p in model.params.items() if k not in trainable}
    before = {k: model.params[k].data.copy() for k in trainable}
    cache = harness.build_cache(model, datas[1], cfg.train) if cfg.train.causal else None
    res = harness.run_task(model, datas[1], cfg.train, cache)
    assert len(res.logs) == cfg.train.epochs
    for k, v in frozen.items():
        assert np.array_equal(model.params[k].data, v), k
    assert any(not np.array_equal(model.params[k].data, v) for k, v in before.items())


def test_finetune_touches_heads_only():
    cfg, corpus, stream, lmap, model, datas = _setup()
    _advance_to_task1(cfg, model, datas)
    prior = model.trainable_names()
    heads = set(model.backbone.head_names())
    others = {k: p.data.copy() for k, p in model.params.items() if k not in heads}
    ex = harness.exemplar_set(corpus.train, stream.classes_seen(1), 2, 0, 1)
    harness.finetune_classifier(model, ex, lmap, cfg.train, stream.classes_seen(1))
    for k, v in others.items():
        assert np.array_equal(model.params[k].data, v), k
    assert model.trainable_names() == prior
    with pytest.raises(ValueError, match="missing class"):
        harness.finetune_classifier(model, ex.of_classes([stream.classes_seen(1)[0]]), lmap, cfg.train,
                                    stream.classes_seen(1))


def test_run_task_requires_cache_for_causal_tasks():
    cfg, _, _, _, model, datas = _setup()
    _advance_to_task1(cfg, model, datas)
    with pytest.raises(ValueError, match="cache"):
        harness.run_task(model, datas[1], cfg.train)
    with pytest.raises(ValueError):
        harness.run_task(model, datas[0], cfg.train)


def test_evaluate_deterministic_and_ignores_causal_config():
    cfg, corpus, stream, lmap, model, datas = _setup()
    _advance_to_task1(cfg, model, datas)
    a = harness.evaluate(model, corpus.test, stream, lmap, cfg.train)
    off = TrainConfig(relation_recovery=False, compensation=False, lambda1=3.0, k=1)
    b = harness.evaluate(model, corpus.test, stream, lmap, off)
    assert a == b == harness.evaluate(model, corpus.test, stream, lmap)


def test_evaluate_constant_predictor():
    cfg, corpus, stream, lmap, model, datas = _setup()
    model.expand_for_task(0, 2)
    first = stream.tasks[0].classes[0]
    model.params["heads.0.bias"].data[...] = [1e9, 0.0]
    per_task, pooled = harness.evaluate(model, corpus.test.of_classes([first]), stream, lmap)
    assert per_task == [1.0] and pooled == 1.0


def test_account_bytes_and_ratio():
    cfg, _, _, _, model, datas = _setup(tasks=2)
    model.expand_for_task(0, 2)
    model.expand_for_task(1, 2)
    b = harness.account(model, exemplar_count=3)
    for t in range(2):
        names = harness.storage_names(model, t)
        count = sum(model.params[n].size for n in names)
        assert b.storage_bytes[t] == count * 8 + b.storage_overhead[t]
    assert b.storage_bytes[0] == b.storage_overhead[0]
    assert b.exemplar_bytes == 3 * 2 * 8 * 8 * 8
    assert b.trainable[1] < b.trainable[0]
    assert b.ratio[1] == b.trainable[1] / b.trainable[0]
    with pytest.raises(ValueError):
        harness.account(harness.build_model(cfg))


# -- end to end ------------------------------------------------------------------------

def test_single_task_run(tmp_path):
    res = harness.run_experiment(tiny_experiment(tasks=1), tmp_path)
    assert res.matrix.n == 1 and res.bwf is None
    assert harness.missing_run_files(tmp_path) == []
    assert "bwf,n/a" in (tmp_path / "metrics.csv").read_text()


def test_two_task_run_artifacts(tmp_path):
    cfg = tiny_experiment(tasks=2)
    res = harness.run_experiment(cfg, tmp_path)
    assert res.matrix.n == 2 and 0.0 <= res.acc_n <= 1.0
    assert harness.missing_run_files(tmp_path) == []
    assert (tmp_path / "relation_curves" / "task1_causal.csv").exists()
    arrays, meta = checkpoint.load(tmp_path / "checkpoints" / "task1.ckpt")
    assert meta["task"] == 1
    assert all(np.array_equal(arrays[k], res.model.params[k].data) for k in arrays)
    assert json.loads((tmp_path / "config.json").read_text())["schema"] == 1
    rows = (tmp_path / "losses.csv").read_text().splitlines()
    assert rows[0].split(",") == list(harness.EpochLog.FIELDS)
    assert len(rows) == 1 + cfg.train.base_epochs + cfg.train.epochs


def test_run_is_reproducible_and_start_state_equivalent():
    cfg = tiny_experiment(tasks=2)
    corpus = harness.corpus_for(cfg)
    a = harness.run_experiment(cfg, corpus=corpus)
    b = harness.run_experiment(cfg, corpus=corpus, start=harness.train_base(cfg, corpus))
    assert a.matrix.acc == b.matrix.acc and a.matrix.pooled == b.matrix.pooled
    for k, p in a.model.params.items():
        assert np.array_equal(p.data, b.model.params[k].data), k


def test_stage_error_names_stage_and_task():
    cfg = tiny_experiment(tasks=2)
    corpus = harness.corpus_for(cfg)
    corpus.train.clips = corpus.train.clips[:, :, :5]  # wrong frame size
    with pytest.raises(harness.StageError) as e:
        harness.run_experiment(cfg, corpus=corpus)
    assert e.value.stage == "train" and e.value.task == 0
