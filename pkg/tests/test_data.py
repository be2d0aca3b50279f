import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jps.data import (BenchmarkSpec, DomainDataset, bayes_invariant_accuracy, generate, leave_one_out_splits,
                      make_world, pretrain_theta0)
from jps.errors import ValidationError
from jps.model import ModelConfig, init_params
from jps.tensor_core import SeededRng
from jps.trainer import evaluate

SMALL = BenchmarkSpec(samples_per_class_per_domain=40, val_jps_size=60)
CFG = ModelConfig(num_blocks=2, d_model=8, num_tokens=4, mlp_hidden=16, num_classes=5)


def test_same_seed_bitwise_identical():
    a, b = generate(SMALL), generate(SMALL)
    assert a.content_hash() == b.content_hash()
    for da, db in zip(a.domains, b.domains):
        assert da.X.tobytes() == db.X.tobytes()
    assert generate(BenchmarkSpec(seed=1)).content_hash() != generate(BenchmarkSpec(seed=0)).content_hash()


def test_zero_gamma_spurious_block_uninformative():
    spec = BenchmarkSpec(source_gammas=(0.0, 0.0, 0.0), target_gamma=0.0, samples_per_class_per_domain=20)
    ds = generate(spec)
    world = make_world(spec)
    lo, hi = spec.d_inv, spec.d_inv + spec.d_spu
    for d in ds.domains:
        # generative mean of the spurious block: gamma * v_c = 0 for every class
        assert np.array_equal(ds.gammas[d.domain_id] * world.v[d.y], np.zeros((len(d.y), spec.d_spu)))
        for c in range(spec.num_classes):
            assert np.abs(d.X[d.y == c, lo:hi].mean(axis=0)).max() < 4.0 / np.sqrt(20)


def test_gamma_placement():
    ds = generate(SMALL, flip_domain=1)
    assert list(ds.gammas) == [0.6, -1.0, 0.8, 1.0]
    assert list(generate(SMALL).gammas) == [0.6, 0.8, 1.0, -1.0]


def test_bayes_invariant_accuracy_equal_across_domains():
    accs = np.array([bayes_invariant_accuracy(BenchmarkSpec(seed=s), generate(BenchmarkSpec(seed=s)))
                     for s in range(10)])
    mean = accs.mean(axis=0)
    assert np.all(np.abs(mean - mean.mean()) <= 0.015), mean


@pytest.mark.parametrize("bad", [
    dict(num_domains=1, source_gammas=()),
    dict(source_gammas=(0.5, 0.5)),
    dict(source_gammas=(0.5, -0.2, 0.5)),
    dict(d_noise=9),
])
def test_invalid_spec(bad):
    with pytest.raises(ValidationError):
        BenchmarkSpec(**bad)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 60))
def test_partition_property(seed, per_class):
    spec = BenchmarkSpec(seed=seed, samples_per_class_per_domain=per_class, val_jps_size=50)
    for d in generate(spec).domains:
        n = len(d.y)
        assert np.intersect1d(d.train_idx, d.val_idx).size == 0
        assert np.array_equal(np.union1d(d.train_idx, d.val_idx), np.arange(n))
        if per_class % 5 == 0:
            assert 0.79 <= d.train_idx.size / n <= 0.81
        assert np.isin(d.val_jps_idx, d.train_idx).all()
        assert np.intersect1d(d.val_jps_idx, d.val_idx).size == 0
        for c in range(spec.num_classes):
            assert abs((d.y[d.train_idx] == c).sum() - round(0.8 * per_class)) == 0


def test_default_partition_ratio():
    for d in generate(BenchmarkSpec()).domains:
        assert 0.79 <= d.train_idx.size / len(d.y) <= 0.81


def test_lodo_splits():
    ds = generate(SMALL)
    targets = set()
    for t in range(4):
        s = leave_one_out_splits(ds, t)
        assert t not in s.sources and len(s.sources) == 3
        assert not np.isin(t, s.train.domain_ids) and not np.isin(t, s.val_model_select.domain_ids)
        assert np.all(s.target_test.domain_ids == t)
        n_src = sum(len(ds.domains[e].y) for e in s.sources)
        assert len(s.train) + len(s.val_model_select) == n_src
        for e, vj in zip(s.sources, s.val_jps):
            assert np.all(vj.domain_ids == e)
        targets.add(t)
    assert targets == {0, 1, 2, 3}
    with pytest.raises(ValidationError):
        leave_one_out_splits(ds, 4)


def test_lodo_union_is_source_data():
    ds = generate(SMALL)
    s = leave_one_out_splits(ds, 2)
    pooled = np.concatenate([s.train.inputs, s.val_model_select.inputs]).reshape(-1, SMALL.input_dim)
    original = np.concatenate([ds.domains[e].X for e in s.sources])
    key = lambda a: sorted(map(bytes, a.astype("<f8")))  # noqa: E731
    assert key(pooled) == key(original)


def test_val_jps_redraw_stays_in_train():
    ds = generate(SMALL)
    s = leave_one_out_splits(ds, 0, val_size=30, rng=SeededRng(3))
    for e, vj in zip(s.sources, s.val_jps):
        d = ds.domains[e]
        train_rows = {bytes(r) for r in d.X[d.train_idx].astype("<f8")}
        assert len(vj) == 30
        assert all(bytes(r) in train_rows for r in vj.inputs.reshape(30, -1).astype("<f8"))


def test_csv_roundtrip(tmp_path):
    ds = generate(SMALL)
    paths = ds.export_csv(tmp_path)
    back = DomainDataset.import_csv(SMALL, paths)
    assert back.content_hash() == ds.content_hash()


def test_pretrain_zero_steps_is_init():
    cfg = CFG
    theta0 = pretrain_theta0(cfg, SMALL, steps=0, lr=1e-3, seed=4)
    from jps.data import STREAM_INIT
    ref = init_params(cfg, SeededRng(4, STREAM_INIT))
    assert theta0.flat().tobytes() == ref.flat().tobytes()


def test_pretrain_loss_decreases():
    hist = []
    pretrain_theta0(CFG, SMALL, steps=200, lr=3e-3, seed=0, history=hist)
    assert np.mean(hist[-20:]) < np.mean(hist[:20])


@pytest.mark.slow
def test_zero_shot_beats_chance():
    spec = BenchmarkSpec()
    cfg = ModelConfig()
    theta0 = pretrain_theta0(cfg, spec, steps=1500, lr=3e-3, seed=0)
    ds = generate(spec)
    acc = evaluate(theta0, cfg, leave_one_out_splits(ds, 3).target_test)
    assert acc >= 1 / spec.num_classes + 0.20, acc
