from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import jps.trainer as trainer
from conftest import frozen_violations
from jps.data import BenchmarkSpec, PretrainConfig
from jps.errors import ProvenanceError, ValidationError
from jps.model import Batch, ModelConfig, forward, init_params
from jps.optim import SGD, Adam
from jps.selection import Mask, build_mask
from jps.tensor_core import SeededRng
from jps.trainer import (RunReport, Theta0Cache, TrainConfig, evaluate, lodo_run, masked_step, prepare_cell,
                         run_cell, tunable_map)

SPEC = BenchmarkSpec(samples_per_class_per_domain=40)
CFG = ModelConfig(num_blocks=2, d_model=8, num_tokens=4, mlp_hidden=16, num_classes=5)
PCFG = PretrainConfig(steps=150)
TCFG = TrainConfig(L=2, rho=0.05, steps=40, eval_every=10, batch_size=16, val_multiplier=10)


@pytest.fixture(scope="module")
def cell():
    return prepare_cell(SPEC, CFG, TCFG, PCFG, 0, 3, Theta0Cache())


def _mask(cell, kind="jps", tcfg=TCFG):
    return build_mask(kind, cell.grads[tcfg.L], tcfg.rho, SeededRng(0), L=tcfg.L, seed=0, dataset_hash=cell.prov)


def _rand_problem(seed):
    rng = SeededRng(seed, 7)
    p = init_params(CFG, rng)
    g = {pid: rng.randn(p[pid].shape) for pid in p}
    return p, g, rng


# masked_step -----------------------------------------------------------

def test_empty_mask_frozen_head_is_identity():
    p, g, _ = _rand_problem(0)
    mask = Mask(np.zeros(0, dtype=np.int64), 2 * CFG.fc1_size, 0.1, 2, "head_only")
    before = p.flat().tobytes()
    for opt in (SGD(0.1, tunable_map(mask, CFG, train_head=False)), Adam(0.1, tunable_map(mask, CFG, False))):
        masked_step(p.tensors(), g, opt)
    assert p.flat().tobytes() == before


def test_full_mask_sgd_equals_unmasked():
    p, g, _ = _rand_problem(1)
    q = p.clone()
    full = Mask(np.arange(2 * CFG.fc1_size), 2 * CFG.fc1_size, 1.0, 2, "full")
    tun = tunable_map(full, CFG)
    masked_step(p.tensors(), g, SGD(0.05, tun))
    for pid in tun:
        q[pid][...] = q[pid] - 0.05 * g[pid]
    assert p.flat().tobytes() == q.flat().tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.001, 0.9))
def test_partial_mask_sgd_is_projection(seed, frac):
    p, g, rng = _rand_problem(seed)
    m = 2 * CFG.fc1_size
    sel = np.sort(rng.choice(m, max(1, int(frac * m))))
    mask = Mask(sel, m, frac, 2, "random")
    tun = tunable_map(mask, CFG, train_head=False)
    prev = {pid: p[pid].copy() for pid in p}
    masked_step(p.tensors(), g, SGD(0.01, tun))
    for pid in p:
        stepped = (prev[pid] - 0.01 * g[pid]).reshape(-1)
        keep = np.zeros(p[pid].size, dtype=bool)
        if pid in tun:
            keep[tun[pid]] = True
        expected = np.where(keep, stepped, prev[pid].reshape(-1))
        assert p[pid].reshape(-1).tobytes() == expected.tobytes()


def test_adam_state_isolation():
    p, g, rng = _rand_problem(3)
    m = 2 * CFG.fc1_size
    sel = np.sort(rng.choice(m, 37))
    tun = tunable_map(Mask(sel, m, 0.1, 2, "random"), CFG)
    opt = Adam(1e-2, tun)
    poisoned = {pid: v.copy() for pid, v in g.items()}
    for pid in poisoned:
        flat = poisoned[pid].reshape(-1)
        keep = np.ones(flat.size, dtype=bool)
        if pid in tun:
            keep[tun[pid] if tun[pid] is not None else slice(None)] = False
        flat[keep] = np.nan  # frozen coordinates: must never be read
    prev = p.flat().copy()
    for _ in range(3):
        masked_step(p.tensors(), poisoned, opt)
    assert np.all(np.isfinite(p.flat()))
    assert set(opt.m) == set(tun)
    assert sum(v.size for k, v in opt.m.items() if k.startswith("blocks.")) == 37
    assert np.count_nonzero(p.flat() != prev) <= 37 + p["head.weight"].size + p["head.bias"].size


def test_optimizer_rejects_bad_offsets():
    p, g, _ = _rand_problem(4)
    with pytest.raises(ValidationError):
        SGD(0.1, {"blocks.0.fc1.bias": np.array([999])}).step(p.tensors(), g)
    with pytest.raises(ValidationError):
        SGD(0.1, {"nope": None}).step(p.tensors(), g)


# train -----------------------------------------------------------------

def test_steps_zero_equals_zero_shot(cell):
    entry, params = trainer.train(cell.theta0, CFG, replace(TCFG, steps=0), cell.split, _mask(cell),
                                  expected_hash=cell.prov)
    assert entry.target_acc == evaluate(cell.theta0, CFG, cell.split.target_test)
    assert entry.best_val_acc == evaluate(cell.theta0, CFG, cell.split.val_model_select)
    assert params.flat().tobytes() == cell.theta0.flat().tobytes()


def test_two_runs_identical(cell):
    a, pa = trainer.train(cell.theta0, CFG, TCFG, cell.split, _mask(cell), expected_hash=cell.prov)
    b, pb = trainer.train(cell.theta0, CFG, TCFG, cell.split, _mask(cell), expected_hash=cell.prov)
    assert a == b
    assert pa.flat().tobytes() == pb.flat().tobytes()


def test_provenance_mismatch(cell):
    with pytest.raises(ProvenanceError):
        trainer.train(cell.theta0, CFG, TCFG, cell.split, _mask(cell), expected_hash="0" * 64)


@pytest.mark.parametrize("kind", ["jps", "direct", "without_variance", "random", "full", "head_only"])
def test_frozen_coordinates_untouched(cell, kind):
    mask = _mask(cell, kind)
    entry, params = trainer.train(cell.theta0, CFG, TCFG, cell.split, mask, expected_hash=cell.prov)
    assert frozen_violations(params, mask, CFG) == []
    assert entry.tunable_params == len(mask)
    assert 0.0 <= entry.target_acc <= 1.0


def test_dropout_run_keeps_frozen(cell):
    tcfg = replace(TCFG, dropout_rate=0.2)
    mask = _mask(cell, "direct")
    _, params = trainer.train(cell.theta0, CFG, tcfg, cell.split, mask, expected_hash=cell.prov)
    assert frozen_violations(params, mask, CFG) == []


@pytest.mark.parametrize("seed", range(5))
def test_full_lowers_source_loss(seed):
    c = prepare_cell(SPEC, CFG, TCFG, PCFG, seed, seed % 4, Theta0Cache())
    mask = build_mask("full", c.grads[2], 1.0, L=2, dataset_hash=c.prov)
    entry, _ = trainer.train(c.theta0, CFG, replace(TCFG, steps=60), c.split, mask, expected_hash=c.prov)
    assert entry.final_train_loss < entry.initial_train_loss


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(weight_decay=0.1)
    with pytest.raises(ValidationError):
        TrainConfig(val_multiplier=30)
    with pytest.raises(ValidationError):
        TrainConfig(lr=0)
    with pytest.raises(ValidationError):
        TrainConfig(selector_kind="lora")


# evaluate --------------------------------------------------------------

def test_evaluate_oracle_labels():
    p, _, rng = _rand_problem(5)
    x = rng.randn((50, CFG.num_tokens, CFG.d_model))
    pred = forward(p, CFG, Batch(x, np.zeros(50), np.zeros(50))).argmax(axis=1)
    b = Batch(x, pred, np.zeros(50))
    assert evaluate(p, CFG, b) == 1.0
    assert evaluate(p, CFG, b) == evaluate(p, CFG, b)


def test_evaluate_random_classifier():
    p, _, rng = _rand_problem(6)
    b = Batch(rng.randn((2000, CFG.num_tokens, CFG.d_model)), rng.integers(0, 5, 2000), np.zeros(2000))
    assert abs(evaluate(p, CFG, b) - 0.2) <= 0.03


def test_evaluate_empty():
    with pytest.raises(ValidationError):
        evaluate(init_params(CFG, SeededRng(0)), CFG, None)


# lodo ------------------------------------------------------------------

def test_lodo_counting_and_repeat():
    tcfg = replace(TCFG, steps=10)
    rep = lodo_run(SPEC, CFG, tcfg, [0, 1, 2], PCFG)
    assert len(rep.entries) == 12
    agg = rep.aggregate()["groups"]
    assert len(agg) == 1 and agg[0]["runs"] == 12
    assert sorted({(e.seed, e.target_domain) for e in rep.entries}) == [(s, t) for s in range(3) for t in range(4)]
    again = lodo_run(SPEC, CFG, tcfg, [0, 1, 2], PCFG)
    assert again.to_dict() == rep.to_dict()


def test_parallel_matches_serial(tmp_path):
    tcfg = replace(TCFG, steps=10)
    serial = lodo_run(SPEC, CFG, tcfg, [0, 1], PCFG)
    parallel = lodo_run(SPEC, CFG, tcfg, [0, 1], PCFG, workers=2, cache_dir=str(tmp_path))
    assert serial.to_dict() == parallel.to_dict()


def test_theta0_disk_cache(tmp_path):
    a = Theta0Cache(str(tmp_path)).get(CFG, SPEC, PCFG, 3)
    b = Theta0Cache(str(tmp_path)).get(CFG, SPEC, PCFG, 3)  # fresh instance, hits disk
    assert a.flat().tobytes() == b.flat().tobytes()
    assert len(list(tmp_path.iterdir())) == 1


def test_run_report_aggregate():
    e = [trainer.RunEntry(0, t, "jps", 0.1, 2, 0.5, acc, 3, 4, 3, 0.0) for t, acc in enumerate([0.2, 0.4])]
    g = RunReport(e).aggregate()["groups"][0]
    assert g["target_acc_mean"] == pytest.approx(0.3) and g["target_acc_std"] == pytest.approx(0.1)


@pytest.mark.slow
def test_full_beats_head_only_on_source_val():
    """The benchmark's overfitting regime: full tuning fits the sources better."""
    spec, cfg = BenchmarkSpec(), ModelConfig()
    tcfg = TrainConfig()
    cache = Theta0Cache()
    full, head = [], []
    for seed in range(5):
        c = prepare_cell(spec, cfg, tcfg, PretrainConfig(), seed, 3, cache)
        full.append(run_cell(c, cfg, replace(tcfg, selector_kind="full")).best_val_acc)
        head.append(run_cell(c, cfg, replace(tcfg, selector_kind="head_only")).best_val_acc)
    assert np.mean(full) > np.mean(head), (full, head)
