"""Sparse update masks from per-domain gradients at the pre-trained point.

The pipeline is two operators applied to a gradient matrix ``G`` (domains x
eligible coordinates):

* importance: per domain keep the ``k = [m * rho]`` largest ``|G[i]|`` and
  intersect across domains;
* variance: of the survivors, drop coordinates whose cross-domain gradient
  variance exceeds the mean variance of the survivors.

``oracle_m_hat`` and ``oracle_m_bar`` evaluate the two idealised selectors by
brute force; they are diagnostics, not part of the pipeline.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SizeError, ValidationError
from .model import IndexMap, ModelConfig, ParamStore, backward_from, embed, fc1_ids, flatten_eligible, forward_from, \
    param_layout
from .tensor_core import SeededRng

log = logging.getLogger(__name__)

INDEX_MAP_VERSION = 1
ORACLE_CAP = 256


class SelectorKind(str, enum.Enum):
    JPS = "jps"
    DIRECT = "direct"
    WITHOUT_VARIANCE = "without_variance"
    RANDOM = "random"
    FULL = "full"
    HEAD_ONLY = "head_only"

    @classmethod
    def parse(cls, value) -> "SelectorKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ValidationError(f"unknown selector kind {value!r}") from None


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def budget(m: int, rho: float) -> int:
    """``[m * rho]``: round half up, at least 1, at most ``m``."""
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"rho must lie in (0, 1], got {rho}")
    return max(1, min(m, round_half_up(m * rho)))


# ---------------------------------------------------------------------------
# gradient snapshots


@dataclass(frozen=True)
class GradSnapshot:
    G: np.ndarray  # [N, m]
    index_map: IndexMap | None = None

    def __post_init__(self):
        G = np.array(self.G, dtype=np.float64)
        if G.ndim != 2:
            raise ValidationError("gradient snapshot must be a 2-D matrix")
        if not np.all(np.isfinite(G)):
            raise ValidationError("gradient snapshot has non-finite entries")
        G.setflags(write=False)
        object.__setattr__(self, "G", G)
        if self.index_map is not None and self.index_map.size != G.shape[1]:
            raise ValidationError("index map size does not match gradient width")

    @property
    def domains(self) -> int:
        return self.G.shape[0]

    @property
    def coords(self) -> int:
        return self.G.shape[1]


def eligible_coords(cfg: ModelConfig, L: int) -> IndexMap:
    """fc1 weight+bias of the last ``L`` blocks, in flattening order."""
    if not 1 <= L <= cfg.num_blocks:
        raise ValidationError(f"L must lie in [1, {cfg.num_blocks}], got {L}")
    shapes = {pid: shape for pid, _, _, shape in param_layout(cfg)}
    segments = []
    off = 0
    for pid in fc1_ids(cfg, range(cfg.num_blocks - L, cfg.num_blocks)):
        segments.append((pid, off, shapes[pid]))
        off += int(np.prod(shapes[pid]))
    return IndexMap(tuple(segments))


def domain_gradients(theta0: ParamStore, cfg: ModelConfig, datasets, L: int, chunk: int = 256,
                     loss_scale: float = 1.0) -> GradSnapshot:
    """Mean-loss gradient over each validation set, restricted to eligible coordinates.

    Dropout is off. Large sets are processed in chunks of ``chunk`` samples and
    the chunk gradients combined with their size weights.
    """
    index_map = eligible_coords(cfg, L)
    pids = index_map.param_ids()
    P = theta0.tensors()
    stop = cfg.num_blocks - L
    rows = []
    for i, V in enumerate(datasets):
        if V is None or len(V) == 0:
            raise ValidationError(f"validation set {i} is empty")
        n = len(V)
        acc = None
        for s in range(0, n, chunk):
            part = V.take(slice(s, s + chunk))
            logits, cache = forward_from(P, cfg, embed(P, part.inputs), 0)
            grads = backward_from(P, cfg, logits, part.labels, cache, 0, stop)
            vec, _ = flatten_eligible(grads, pids)
            w = len(part) / n
            vec = vec if w == 1.0 else vec * w
            acc = vec if acc is None else acc + vec
        rows.append(acc * loss_scale if loss_scale != 1.0 else acc)
    return GradSnapshot(np.stack(rows), index_map)


# ---------------------------------------------------------------------------
# operators


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, ties to the lower index, sorted."""
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k])


def per_domain_top(g: GradSnapshot, rho: float) -> list[np.ndarray]:
    k = budget(g.coords, rho)
    return [top_k(np.abs(row), k) for row in g.G]


def importance_select(g: GradSnapshot, rho: float) -> np.ndarray:
    """Intersection over domains of each domain's top-``[m rho]`` |gradient| set."""
    sets = per_domain_top(g, rho)
    out = sets[0]
    for s in sets[1:]:
        out = np.intersect1d(out, s, assume_unique=True)
    return out.astype(np.int64)


def gradient_variance(g: GradSnapshot, coords=None) -> np.ndarray:
    """``sum_i (G[i, j] - mean_i G[i, j])**2`` per coordinate."""
    G = g.G if coords is None else g.G[:, coords]
    dev = G - G.mean(axis=0)
    return (dev * dev).sum(axis=0)


def _below_mean(values: np.ndarray) -> np.ndarray:
    # n * v <= sum(v) rather than v <= sum/n: exact when all values are equal
    return values * values.size <= math.fsum(values.tolist())


def variance_select(g: GradSnapshot, step1) -> np.ndarray:
    """Keep the step-1 coordinates whose gradient variance is at most the mean."""
    step1 = np.asarray(step1, dtype=np.int64)
    if step1.size == 0:
        log.warning("variance_select: empty step-1 mask, nothing to filter")
        return step1
    sigma = gradient_variance(g, step1)
    return step1[_below_mean(sigma)]


def oracle_m_hat(g: GradSnapshot, rho: float, strict: bool = False, cap: int = ORACLE_CAP) -> np.ndarray:
    """Brute-force dominance-count selector.

    Coordinate ``j`` is kept when it dominates (``|G_i^j| >= |G_i^j'|`` in every
    domain) at least ``m - [m rho]`` coordinates, counting itself. ``strict``
    raises the bar by one, which caps the single-domain case at ``[m rho]``.
    """
    m = g.coords
    if m > cap:
        raise SizeError(f"oracle_m_hat limited to m <= {cap}, got {m}")
    A = np.abs(g.G)
    dominates = np.all(A[:, :, None] >= A[:, None, :], axis=0)
    counts = dominates.sum(axis=1)
    need = m - budget(m, rho) + (1 if strict else 0)
    return np.flatnonzero(counts >= need).astype(np.int64)


def pairwise_products(g: GradSnapshot) -> np.ndarray:
    """``sum_{i != i'} G_i^j G_i'^j`` per coordinate, by explicit double loop."""
    N, m = g.G.shape
    out = np.zeros(m)
    for i in range(N):
        for i2 in range(N):
            if i != i2:
                out += g.G[i] * g.G[i2]
    return out


def oracle_m_bar(g: GradSnapshot) -> np.ndarray:
    """Coordinates whose pairwise cross-domain product sum is at most the mean."""
    if g.domains < 2:
        raise DomainError("oracle_m_bar needs at least two domains")
    return np.flatnonzero(_below_mean(pairwise_products(g))).astype(np.int64)


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class Mask:
    selected: np.ndarray
    m: int
    rho: float
    L: int
    kind: SelectorKind
    stage_counts: dict = field(default_factory=dict)
    seed: int = 0
    dataset_hash: str = ""

    def __post_init__(self):
        sel = np.array(self.selected, dtype=np.int64)
        if sel.ndim != 1:
            raise ValidationError("mask selection must be 1-D")
        if sel.size and (np.any(np.diff(sel) <= 0) or sel[0] < 0 or sel[-1] >= self.m):
            raise ValidationError("mask selection must be strictly increasing within [0, m)")
        sel.setflags(write=False)
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "kind", SelectorKind.parse(self.kind))
        sc = dict(self.stage_counts)
        if sc:
            if not (sc["step2_count"] == sel.size and sc["step2_count"] <= sc["step1_count"] <= sc["per_domain_k"]):
                raise ValidationError(f"inconsistent stage counts {sc} for {sel.size} selected")
        object.__setattr__(self, "stage_counts", sc)

    def __len__(self):
        return int(self.selected.size)

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "L": self.L,
            "m": self.m,
            "selector_kind": self.kind.value,
            "coordinate_index_map_version": INDEX_MAP_VERSION,
            "selected": [int(v) for v in self.selected],
            "stage_counts": {k: int(v) for k, v in self.stage_counts.items()},
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mask":
        if d.get("coordinate_index_map_version") != INDEX_MAP_VERSION:
            raise ValidationError(f"unsupported index map version {d.get('coordinate_index_map_version')!r}")
        return cls(np.array(d["selected"], dtype=np.int64), int(d["m"]), float(d["rho"]), int(d["L"]),
                   SelectorKind.parse(d["selector_kind"]), dict(d["stage_counts"]), int(d["seed"]),
                   d["dataset_hash"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Mask":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_mask(kind, g: GradSnapshot, rho: float, rng: SeededRng | None = None, L: int = 0,
               seed: int = 0, dataset_hash: str = "") -> Mask:
    kind = SelectorKind.parse(kind)
    m = g.coords
    k = budget(m, rho)
    if kind is SelectorKind.JPS or kind is SelectorKind.WITHOUT_VARIANCE:
        step1 = importance_select(g, rho)
        if step1.size == 0:
            log.warning("%s: step-1 intersection is empty at rho=%g; training the head only", kind.value, rho)
        step2 = variance_select(g, step1) if kind is SelectorKind.JPS else step1
        counts = (k, step1.size, step2.size)
        selected = step2
    elif kind is SelectorKind.DIRECT:
        selected = top_k(np.abs(g.G).sum(axis=0), k)
        counts = (k, k, k)
    elif kind is SelectorKind.RANDOM:
        if rng is None:
            raise ValidationError("random selector needs an rng")
        selected = np.sort(rng.choice(m, k))
        counts = (k, k, k)
    elif kind is SelectorKind.FULL:
        selected = np.arange(m)
        counts = (m, m, m)
    else:
        selected = np.zeros(0, dtype=np.int64)
        counts = (k, 0, 0)
    stage = dict(zip(("per_domain_k", "step1_count", "step2_count"), (int(c) for c in counts)))
    return Mask(selected, m, float(rho), L, kind, stage, seed, dataset_hash)


@dataclass(frozen=True)
class MaskStats:
    per_domain_k: int
    step1_count: int
    step2_count: int
    reduction_pct_step1: float
    reduction_pct_step2: float

    def to_dict(self):
        return dict(self.__dict__)


def mask_stats(mask: Mask) -> MaskStats:
    sc = mask.stage_counts
    k, s1, s2 = sc["per_domain_k"], sc["step1_count"], sc["step2_count"]
    if k == 0:
        raise ValidationError("mask_stats: per-domain budget is zero")
    red2 = 1.0 - s2 / s1 if s1 else 0.0
    return MaskStats(k, s1, s2, 1.0 - s1 / k, red2)
