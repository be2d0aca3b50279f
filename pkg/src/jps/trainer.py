"""Fine-tuning under a fixed mask and the leave-one-domain-out driver."""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import BenchmarkSpec, LodoSplit, PretrainConfig, generate, leave_one_out_splits, pretrain_theta0
from .errors import ProvenanceError, TrainingError, ValidationError
from .model import Batch, ModelConfig, ParamStore, backward_from, embed, forward_from, hidden_at, log_softmax
from .optim import make_optimizer
from .selection import Mask, SelectorKind, build_mask, domain_gradients, eligible_coords
from .tensor_core import SeededRng

log = logging.getLogger(__name__)

HEAD_IDS = ("head.weight", "head.bias")
STREAM_TRAIN = 31
STREAM_MASK = 32

CSV_COLUMNS = ("seed", "target_domain", "selector", "rho", "L", "best_val_acc", "target_acc", "tunable_params",
               "step1_count", "step2_count", "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    selector_kind: str = "jps"
    rho: float = 0.01
    L: int = 3
    lr: float = 5e-3
    dropout_rate: float = 0.0
    steps: int = 300
    batch_size: int = 32
    val_multiplier: int = 20
    optimizer: str = "adam"
    weight_decay: float = 0.0
    eval_every: int = 30
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        SelectorKind.parse(self.selector_kind)
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.steps < 0:
            raise ValidationError("steps must be non-negative")
        if self.weight_decay != 0:
            raise ValidationError("weight decay is fixed at 0")
        if self.val_multiplier not in (10, 20, 50):
            raise ValidationError("val_multiplier must be one of 10, 20, 50")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every <= 0 or self.batch_size <= 0:
            raise ValidationError("eval_every and batch_size must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise ValidationError("rho must lie in (0, 1]")

    @property
    def kind(self) -> SelectorKind:
        return SelectorKind.parse(self.selector_kind)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def provenance_hash(theta0: ParamStore, split: LodoSplit) -> str:
    """Content hash binding a mask to the pre-trained weights and the data it saw."""
    h = hashlib.sha256()
    for pid, t in theta0.theta0.items():
        h.update(pid.encode())
        h.update(t.astype("<f8").tobytes())
    h.update(np.int64(split.target).tobytes())
    for b in split.val_jps + [split.train]:
        h.update(b.inputs.astype("<f8").tobytes())
        h.update(b.labels.astype("<i8").tobytes())
    return h.hexdigest()


def tunable_map(mask: Mask, cfg: ModelConfig, train_head: bool = True) -> dict:
    """``{param_id: offsets or None}`` for the optimizer."""
    out = {}
    if mask.L:
        out.update(eligible_coords(cfg, mask.L).locate(mask.selected))
    elif len(mask):
        raise ValidationError("mask with selected coordinates but no layer count")
    if train_head:
        out.update({pid: None for pid in HEAD_IDS})
    return out


def masked_step(params: dict, grads: dict, optimizer) -> None:
    """One optimizer update; ``optimizer`` carries the mask and any moment state."""
    optimizer.step(params, grads)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate(params, cfg: ModelConfig, batch: Batch) -> float:
    """Argmax accuracy with dropout off."""
    if batch is None or len(batch) == 0:
        raise ValidationError("cannot evaluate on an empty split")
    P = params.tensors() if isinstance(params, ParamStore) else params
    logits, _ = forward_from(P, cfg, embed(P, batch.inputs), 0)
    return _accuracy(logits, batch.labels)


def _mean_loss(logits, labels):
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


@dataclass
class RunEntry:
    seed: int
    target_domain: int
    selector: str
    rho: float
    L: int
    best_val_acc: float
    target_acc: float
    tunable_params: int
    step1_count: int
    step2_count: int
    wall_time_s: float
    best_step: int = 0
    initial_train_loss: float = 0.0
    final_train_loss: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]

    def to_dict(self):
        return asdict(self)


def verify_frozen(params: ParamStore, tunable: dict) -> None:
    """Every coordinate outside ``tunable`` must equal theta0 bit for bit."""
    for pid in params:
        live = params[pid].reshape(-1)
        ref = params.theta0[pid].reshape(-1)
        idx = tunable.get(pid, "frozen")
        if idx is None:
            continue
        if isinstance(idx, str):
            same = live.tobytes() == ref.tobytes()
        else:
            keep = np.ones(live.size, dtype=bool)
            keep[idx] = False
            same = live[keep].tobytes() == ref[keep].tobytes()
        if not same:
            raise TrainingError(f"frozen coordinates of {pid} moved during training")


def train(theta0: ParamStore, cfg: ModelConfig, tcfg: TrainConfig, split: LodoSplit, mask: Mask,
          expected_hash: str | None = None, seed: int | None = None, train_head: bool = True):
    """Fine-tune a copy of ``theta0`` on the pooled sources, updating only ``mask`` (+ head).

    Returns ``(RunEntry, params)``. The reported target accuracy is the one
    measured at the checkpoint with the best source-validation accuracy.
    """
    if expected_hash is not None and mask.dataset_hash != expected_hash:
        raise ProvenanceError("mask was built for different weights or data")
    t_start = time.perf_counter()
    seed = tcfg.seed if seed is None else seed
    params = theta0.clone()
    P = params.tensors()
    tunable = tunable_map(mask, cfg, train_head)
    opt = make_optimizer(tcfg.optimizer, tcfg.lr, tunable)

    # blocks before the first tunable one never change: cache their output
    drop = tcfg.dropout_rate
    run_cfg = replace(cfg, dropout_rate=drop)
    blocks = [int(pid.split(".")[1]) for pid in tunable if pid.startswith("blocks.")]
    start = min(blocks) if blocks else cfg.num_blocks
    if drop > 0:
        start = 0
    h_train = hidden_at(P, cfg, split.train.inputs, start)
    h_val = hidden_at(P, cfg, split.val_model_select.inputs, start)
    h_tgt = hidden_at(P, cfg, split.target_test.inputs, start)
    y_train = split.train.labels

    def logits_of(h):
        return forward_from(P, run_cfg, h, start)[0]

    def check(step):
        return _accuracy(logits_of(h_val), split.val_model_select.labels), _accuracy(logits_of(h_tgt), split.target_test.labels)

    initial_loss = _mean_loss(logits_of(h_train), y_train)
    best_val, best_tgt = check(0)
    best_step = 0
    rng = SeededRng(seed, STREAM_TRAIN * 1000 + split.target)
    n = len(y_train)
    for step in range(1, tcfg.steps + 1):
        idx = rng.integers(0, n, size=tcfg.batch_size)
        logits, cache = forward_from(P, run_cfg, h_train[idx], start, train_mode=True, rng=rng)
        if not np.all(np.isfinite(logits)):
            raise TrainingError(f"non-finite logits at step {step}")
        grads = backward_from(P, run_cfg, logits, y_train[idx], cache, start, stop_block=start)
        masked_step(P, grads, opt)
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            val, tgt = check(step)
            if val > best_val:
                best_val, best_tgt, best_step = val, tgt, step
    final_loss = _mean_loss(logits_of(h_train), y_train)
    if not np.isfinite(final_loss):
        raise TrainingError("training loss is not finite")
    verify_frozen(params, tunable)
    sc = mask.stage_counts or {"step1_count": len(mask), "step2_count": len(mask)}
    wall = round(time.perf_counter() - t_start, 3) if tcfg.record_wall_time else 0.0
    entry = RunEntry(seed, split.target, mask.kind.value, mask.rho, mask.L, best_val, best_tgt, len(mask),
                     sc["step1_count"], sc["step2_count"], wall, best_step, initial_loss, final_loss)
    return entry, params


# ---------------------------------------------------------------------------
# leave-one-domain-out


@dataclass
class RunReport:
    entries: list
    config: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def aggregate(self) -> dict:
        """Mean/std of target and validation accuracy per (selector, rho)."""
        groups: dict = {}
        for e in self.entries:
            groups.setdefault((e.selector, e.rho), []).append(e)
        out = []
        for (sel, rho), es in sorted(groups.items()):
            tgt = np.array([e.target_acc for e in es])
            val = np.array([e.best_val_acc for e in es])
            out.append({
                "selector": sel, "rho": rho, "runs": len(es),
                "target_acc_mean": float(tgt.mean()), "target_acc_std": float(tgt.std()),
                "val_acc_mean": float(val.mean()), "val_acc_std": float(val.std()),
                "tunable_params_mean": float(np.mean([e.tunable_params for e in es])),
            })
        return {"groups": out}

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries], "aggregate": self.aggregate(),
                "config": self.config, "wall_time_s": self.wall_time_s}


class Theta0Cache:
    """In-memory (and optionally on-disk) cache of pre-trained weights per content key."""

    def __init__(self, directory=None):
        self.directory = directory
        self._mem: dict = {}

    @staticmethod
    def key(cfg: ModelConfig, spec: BenchmarkSpec, pcfg: PretrainConfig, seed: int) -> str:
        import json

        doc = json.dumps({"model": cfg.to_dict(), "data": spec.to_dict(), "pretrain": pcfg.to_dict(), "seed": seed},
                         sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()

    def get(self, cfg, spec, pcfg, seed) -> ParamStore:
        import os

        k = self.key(cfg, replace(spec, seed=seed), pcfg, seed)
        if k in self._mem:
            return self._mem[k]
        path = os.path.join(self.directory, f"theta0_{k[:24]}.json") if self.directory else None
        if path and os.path.exists(path):
            params, _ = ParamStore.load(path)
        else:
            params = pretrain_theta0(cfg, replace(spec, seed=seed), pcfg.steps, pcfg.lr, seed, pcfg.batch_size)
            if path:
                os.makedirs(self.directory, exist_ok=True)
                tmp = path + ".tmp"
                params.save(tmp, cfg)
                os.replace(tmp, path)
        self._mem[k] = params
        return params


@dataclass
class Cell:
    """Everything a (seed, target) pair shares across selectors and rho values."""

    seed: int
    target: int
    theta0: ParamStore
    split: LodoSplit
    grads: dict  # L -> GradSnapshot
    prov: str


def prepare_cell(spec, cfg, tcfg, pcfg, seed, target, cache: Theta0Cache, Ls=None) -> Cell:
    theta0 = cache.get(cfg, spec, pcfg, seed)
    ds = generate(replace(spec, seed=seed, val_jps_size=tcfg.val_multiplier * tcfg.batch_size), flip_domain=target)
    split = leave_one_out_splits(ds, target)
    grads = {L: domain_gradients(theta0, cfg, split.val_jps, L) for L in (Ls or [tcfg.L])}
    return Cell(seed, target, theta0, split, grads, provenance_hash(theta0, split))


def run_cell(cell: Cell, cfg: ModelConfig, tcfg: TrainConfig) -> RunEntry:
    g = cell.grads[tcfg.L]
    rng = SeededRng(cell.seed, STREAM_MASK * 1000 + cell.target)
    mask = build_mask(tcfg.kind, g, tcfg.rho, rng, L=tcfg.L, seed=cell.seed, dataset_hash=cell.prov)
    entry, _ = train(cell.theta0, cfg, tcfg, cell.split, mask, expected_hash=cell.prov, seed=cell.seed)
    return entry


def _cell_job(args):
    spec, cfg, tcfgs, pcfg, seed, target, cache_dir = args
    cache = Theta0Cache(cache_dir)
    Ls = sorted({t.L for t in tcfgs})
    cell = prepare_cell(spec, cfg, tcfgs[0], pcfg, seed, target, cache, Ls)
    return [run_cell(cell, cfg, t) for t in tcfgs]


def sweep(spec: BenchmarkSpec, cfg: ModelConfig, tcfgs: list, seeds: list, pcfg: PretrainConfig | None = None,
          workers: int = 1, cache_dir=None) -> list:
    """Run every train config on every (seed, target); entries in a fixed order.

    Train configs must agree on ``val_multiplier`` and ``batch_size`` since they
    share one JPS validation draw per cell.
    """
    if not seeds:
        raise ValidationError("need at least one seed")
    if len({(t.val_multiplier, t.batch_size) for t in tcfgs}) > 1:
        raise ValidationError("train configs in one sweep must share val_multiplier and batch_size")
    pcfg = pcfg or PretrainConfig()
    spec.check_model(cfg)
    jobs = [(spec, cfg, list(tcfgs), pcfg, s, t, cache_dir) for s in seeds for t in range(spec.num_domains)]
    if workers > 1:
        # one pre-training per seed before fanning out, so workers hit the disk cache
        if cache_dir:
            warm = Theta0Cache(cache_dir)
            for s in seeds:
                warm.get(cfg, spec, pcfg, s)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        cache = Theta0Cache(cache_dir)
        results = []
        for spec_, cfg_, tc, pc, s, t, _ in jobs:
            cell = prepare_cell(spec_, cfg_, tc[0], pc, s, t, cache, sorted({x.L for x in tc}))
            results.append([run_cell(cell, cfg_, x) for x in tc])
    return [e for r in results for e in r]


def lodo_run(spec: BenchmarkSpec, cfg: ModelConfig, tcfg: TrainConfig, seeds: list,
             pcfg: PretrainConfig | None = None, workers: int = 1, cache_dir=None) -> RunReport:
    t0 = time.perf_counter()
    entries = sweep(spec, cfg, [tcfg], seeds, pcfg, workers, cache_dir)
    wall = round(time.perf_counter() - t0, 3) if tcfg.record_wall_time else 0.0
    config = {"data": spec.to_dict(), "model": cfg.to_dict(), "train": tcfg.to_dict(),
              "pretrain": (pcfg or PretrainConfig()).to_dict(), "seeds": list(seeds)}
    return RunReport(entries, config, wall)
