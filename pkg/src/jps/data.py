"""Synthetic multi-domain benchmark with a spurious feature that flips sign.

Each sample is a flat vector ``[invariant | spurious | noise]`` reshaped into
``num_tokens`` tokens. For class ``c`` in domain ``e``::

    invariant ~ N(mu_c, s^2)          identical in every domain
    spurious  ~ N(gamma_e * v_c, s^2)  class signal scaled per domain
    noise     ~ N(0, (noise_scale * sigma_e)^2)

Source domains get ``gamma > 0``; the held-out domain gets ``target_gamma``
(negative by default), so anything learned from the spurious block hurts on
the target.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import TrainingError, ValidationError
from .model import Batch, ModelConfig, ParamStore, init_params, loss_and_grads
from .tensor_core import SeededRng

log = logging.getLogger(__name__)

# rng stream ids
STREAM_WORLD = 11
STREAM_SAMPLES = 12
STREAM_SPLIT = 13
STREAM_INIT = 21
STREAM_PRETRAIN = 22


@dataclass(frozen=True)
class BenchmarkSpec:
    num_domains: int = 4
    num_classes: int = 5
    d_inv: int = 16
    d_spu: int = 8
    d_noise: int = 8
    samples_per_class_per_domain: int = 200
    source_gammas: tuple = (0.6, 0.8, 1.0)
    target_gamma: float = -1.0
    noise_scale: float = 1.0
    seed: int = 0
    num_tokens: int = 4
    within_std: float = 1.0
    inv_scale: float = 0.55
    spu_scale: float = 0.9
    val_jps_size: int = 320

    def __post_init__(self):
        object.__setattr__(self, "source_gammas", tuple(float(g) for g in self.source_gammas))
        self.validate()

    def validate(self):
        if self.num_domains < 2:
            raise ValidationError("need at least two domains")
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")
        if min(self.d_inv, self.d_spu, self.d_noise) < 0 or self.d_inv + self.d_spu + self.d_noise == 0:
            raise ValidationError("feature block sizes must be non-negative with a positive total")
        if len(self.source_gammas) != self.num_domains - 1:
            raise ValidationError(f"expected {self.num_domains - 1} source gammas, got {len(self.source_gammas)}")
        if any(not -1.0 <= g <= 1.0 for g in self.source_gammas):
            raise ValidationError("source gammas must lie in [-1, 1]")
        if self.target_gamma < 0 and any(g <= 0 for g in self.source_gammas):
            raise ValidationError("a negative target gamma requires all source gammas positive")
        if self.samples_per_class_per_domain < 5:
            raise ValidationError("need at least 5 samples per class per domain for an 80/20 split")
        if self.input_dim % self.num_tokens:
            raise ValidationError(f"input dim {self.input_dim} not divisible into {self.num_tokens} tokens")
        if self.noise_scale < 0 or self.within_std <= 0:
            raise ValidationError("scales must be positive")

    @property
    def input_dim(self) -> int:
        return self.d_inv + self.d_spu + self.d_noise

    @property
    def d_model(self) -> int:
        return self.input_dim // self.num_tokens

    def gammas(self, flip_domain: int) -> np.ndarray:
        """Per-domain spurious strength with ``target_gamma`` at ``flip_domain``."""
        src = list(self.source_gammas)
        return np.array(src[:flip_domain] + [self.target_gamma] + src[flip_domain:])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_gammas"] = list(self.source_gammas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        return cls(**d)

    def check_model(self, cfg: ModelConfig):
        if cfg.num_tokens != self.num_tokens or cfg.d_model * cfg.num_tokens != self.input_dim:
            raise ValidationError(
                f"model expects {cfg.num_tokens}x{cfg.d_model} inputs, benchmark produces "
                f"{self.num_tokens}x{self.d_model}")
        if cfg.num_classes != self.num_classes:
            raise ValidationError("model and benchmark disagree on the number of classes")


@dataclass(frozen=True)
class World:
    """Class prototypes and per-domain noise levels shared by every seed-level draw."""

    mu: np.ndarray  # [C, d_inv]
    v: np.ndarray  # [C, d_spu]
    sigma: np.ndarray  # [N]


def make_world(spec: BenchmarkSpec) -> World:
    rng = SeededRng(spec.seed, STREAM_WORLD)
    mu = spec.inv_scale * rng.randn((spec.num_classes, spec.d_inv))
    v = spec.spu_scale * rng.randn((spec.num_classes, spec.d_spu))
    sigma = rng.uniform(0.5, 2.0, size=spec.num_domains)
    return World(mu, v, sigma)


def sample_features(spec: BenchmarkSpec, world: World, labels, gamma, sigma, rng: SeededRng) -> np.ndarray:
    n = len(labels)
    s = spec.within_std
    inv = world.mu[labels] + s * rng.randn((n, spec.d_inv))
    spu = np.asarray(gamma).reshape(-1, 1) * world.v[labels] + s * rng.randn((n, spec.d_spu))
    noise = spec.noise_scale * np.asarray(sigma).reshape(-1, 1) * rng.randn((n, spec.d_noise))
    return np.concatenate([inv, spu, noise], axis=1)


@dataclass
class DomainData:
    X: np.ndarray  # [n, d]
    y: np.ndarray  # [n]
    domain_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray  # model-selection validation
    val_jps_idx: np.ndarray  # subset of train_idx

    def split_tags(self) -> list[str]:
        tags = ["train"] * len(self.y)
        for i in self.val_idx:
            tags[i] = "val_model_select"
        for i in self.val_jps_idx:
            tags[i] = "val_jps"
        return tags


@dataclass
class DomainDataset:
    spec: BenchmarkSpec
    domains: list = field(default_factory=list)
    gammas: np.ndarray | None = None

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for d in self.domains:
            for arr in (d.X.astype("<f8"), d.y.astype("<i8"), d.train_idx.astype("<i8"),
                        d.val_idx.astype("<i8"), d.val_jps_idx.astype("<i8")):
                h.update(arr.tobytes())
        return h.hexdigest()

    # CSV export/import ------------------------------------------------

    def export_csv(self, directory) -> list:
        import os

        os.makedirs(directory, exist_ok=True)
        paths = []
        d_total = self.spec.input_dim
        for dom in self.domains:
            path = os.path.join(directory, f"domain_{dom.domain_id}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"feature_{i}" for i in range(d_total)] + ["label", "domain_id", "split_tag"])
                for row, label, tag in zip(dom.X, dom.y, dom.split_tags()):
                    w.writerow([repr(float(v)) for v in row] + [int(label), dom.domain_id, tag])
            paths.append(path)
        return paths

    @classmethod
    def import_csv(cls, spec: BenchmarkSpec, paths, gammas=None) -> "DomainDataset":
        domains = []
        for path in paths:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            header, body = rows[0], rows[1:]
            nfeat = len(header) - 3
            X = np.array([[float(v) for v in r[:nfeat]] for r in body])
            y = np.array([int(r[nfeat]) for r in body], dtype=np.int64)
            dom_id = int(body[0][nfeat + 1]) if body else 0
            tags = [r[nfeat + 2] for r in body]
            idx = np.arange(len(body))
            train = np.array([i for i in idx if tags[i] in ("train", "val_jps")], dtype=np.int64)
            val = np.array([i for i in idx if tags[i] == "val_model_select"], dtype=np.int64)
            vj = np.array([i for i in idx if tags[i] == "val_jps"], dtype=np.int64)
            domains.append(DomainData(X, y, dom_id, train, val, vj))
        return cls(spec, domains, gammas)


def _stratified_split(y: np.ndarray, num_classes: int, rng: SeededRng, frac: float = 0.8):
    train, val = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.rand_perm(idx.size)]
        cut = round(frac * idx.size)
        train.append(idx[:cut])
        val.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _draw_val_jps(train_idx: np.ndarray, size: int, rng: SeededRng) -> np.ndarray:
    if size > train_idx.size:
        log.warning("val_jps size %d exceeds the %d training samples; using all of them", size, train_idx.size)
        size = train_idx.size
    return np.sort(train_idx[rng.choice(train_idx.size, size)])


def generate(spec: BenchmarkSpec, flip_domain: int | None = None) -> DomainDataset:
    """Draw every domain; ``flip_domain`` (default last) receives ``target_gamma``."""
    spec.validate()
    N, C = spec.num_domains, spec.num_classes
    flip = N - 1 if flip_domain is None else flip_domain
    if not 0 <= flip < N:
        raise ValidationError(f"flip domain {flip} out of range")
    world = make_world(spec)
    gammas = spec.gammas(flip)
    domains = []
    for e in range(N):
        rng = SeededRng(spec.seed, STREAM_SAMPLES * 1000 + e)
        y = np.repeat(np.arange(C), spec.samples_per_class_per_domain)
        X = sample_features(spec, world, y, gammas[e], world.sigma[e], rng)
        srng = SeededRng(spec.seed, STREAM_SPLIT * 1000 + e)
        train, val = _stratified_split(y, C, srng)
        vj = _draw_val_jps(train, spec.val_jps_size, srng)
        domains.append(DomainData(X, y, e, train, val, vj))
    return DomainDataset(spec, domains, gammas)


# ---------------------------------------------------------------------------
# leave-one-domain-out


@dataclass
class LodoSplit:
    target: int
    sources: list
    train: Batch  # pooled source 80% side
    val_model_select: Batch  # pooled source 20% side
    val_jps: list  # one Batch per source domain, drawn from its 80% side
    source_train: list  # one Batch per source domain
    target_test: Batch


def _to_batch(spec: BenchmarkSpec, X, y, dom) -> Batch:
    return Batch(X.reshape(len(y), spec.num_tokens, spec.d_model), y, np.full(len(y), dom, dtype=np.int64))


def _concat(batches) -> Batch:
    return Batch(np.concatenate([b.inputs for b in batches]), np.concatenate([b.labels for b in batches]),
                 np.concatenate([b.domain_ids for b in batches]))


def leave_one_out_splits(ds: DomainDataset, target: int, val_size: int | None = None,
                         rng: SeededRng | None = None) -> LodoSplit:
    """Hold out ``target``; pool the other domains' 80/20 partitions.

    With ``val_size`` and ``rng`` given, the per-domain JPS validation sets are
    redrawn from each source's training partition instead of using the stored
    ones.
    """
    if not 0 <= target < ds.num_domains:
        raise ValidationError(f"target domain {target} out of range [0, {ds.num_domains})")
    spec = ds.spec
    sources = [e for e in range(ds.num_domains) if e != target]
    tr, va, vj = [], [], []
    for e in sources:
        d = ds.domains[e]
        tr.append(_to_batch(spec, d.X[d.train_idx], d.y[d.train_idx], e))
        va.append(_to_batch(spec, d.X[d.val_idx], d.y[d.val_idx], e))
        idx = d.val_jps_idx if val_size is None else _draw_val_jps(d.train_idx, val_size, rng)
        vj.append(_to_batch(spec, d.X[idx], d.y[idx], e))
    t = ds.domains[target]
    return LodoSplit(target, sources, _concat(tr), _concat(va), vj, tr, _to_batch(spec, t.X, t.y, target))


# ---------------------------------------------------------------------------
# pre-training


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 64

    def to_dict(self):
        return asdict(self)


def pretrain_theta0(cfg: ModelConfig, spec: BenchmarkSpec, steps: int, lr: float, seed: int,
                    batch_size: int = 64, history: list | None = None) -> ParamStore:
    """Train the whole model on a meta-distribution and freeze the result as theta0.

    Every minibatch draws its own ``gamma ~ U(-1, 1)`` and noise level, so the
    spurious block carries no class information on average.
    """
    from .optim import Adam  # local: optim depends on model only

    spec.check_model(cfg)
    world_spec = replace(spec, seed=seed)
    world = make_world(world_spec)
    params = init_params(cfg, SeededRng(seed, STREAM_INIT))
    if steps <= 0:
        params.freeze_snapshot()
        return params
    rng = SeededRng(seed, STREAM_PRETRAIN)
    opt = Adam(lr)
    P = params.tensors()
    for step in range(steps):
        y = rng.integers(0, spec.num_classes, size=batch_size)
        gamma = rng.uniform(-1.0, 1.0)
        sigma = rng.uniform(0.5, 2.0)
        X = sample_features(spec, world, y, gamma, sigma, rng)
        batch = _to_batch(spec, X, y, -1)
        value, grads = loss_and_grads(P, cfg, batch, train_mode=cfg.dropout_rate > 0, rng=rng)
        if not np.isfinite(value):
            raise TrainingError(f"pretraining diverged at step {step}")
        if history is not None:
            history.append(value)
        opt.step(P, grads)
    params.freeze_snapshot()
    return params


def bayes_invariant_accuracy(spec: BenchmarkSpec, ds: DomainDataset) -> np.ndarray:
    """Per-domain accuracy of the Bayes rule that sees only the invariant block.

    Classes are balanced and share an isotropic covariance, so the rule is
    nearest class mean.
    """
    world = make_world(spec)
    accs = []
    for d in ds.domains:
        inv = d.X[:, :spec.d_inv]
        dist = ((inv[:, None, :] - world.mu[None, :, :]) ** 2).sum(axis=-1)
        accs.append(float((dist.argmin(axis=1) == d.y).mean()))
    return np.array(accs)
