"""Measurable pieces of the sparsity generalisation bound, plus mask structure reports.

All quantities are relative diagnostics: ``beta`` is a user-supplied constant,
and the domain-divergence term is estimated with a discriminator-based
A-distance proxy rather than computed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from .errors import DomainError, ValidationError
from .model import ModelConfig
from .selection import GradSnapshot, Mask, SelectorKind, build_mask, eligible_coords
from .tensor_core import SeededRng, binary_matrix_rank

log = logging.getLogger(__name__)


def c_min(g: GradSnapshot, mask: Mask | np.ndarray, scope: str = "per_domain"):
    """Smallest absolute gradient over the selected coordinates.

    ``per_domain`` gives one value per domain; ``pooled`` uses the average
    gradient across domains (equal-size validation sets).
    """
    sel = mask.selected if isinstance(mask, Mask) else np.asarray(mask, dtype=np.int64)
    if sel.size == 0:
        raise ValidationError("c_min over an empty mask")
    if scope == "per_domain":
        return np.abs(g.G[:, sel]).min(axis=1)
    if scope == "pooled":
        return float(np.abs(g.G[:, sel].mean(axis=0)).min())
    raise ValidationError(f"unknown c_min scope {scope!r}")


def _stability_term(beta, cm, rho, n):
    denom = (cm + 2.0 * (1.0 - rho)) * n
    if denom <= 0:
        raise DomainError("bound term denominator is zero (rho = 1 with zero minimum gradient)")
    return beta * beta / denom


def k1(beta: float, c_min_pooled: float, rho: float, n: int) -> float:
    """beta^2 / ((C_min + 2 (1 - rho)) n)."""
    return _stability_term(beta, c_min_pooled, rho, n)


def k2_first_term(beta: float, c_min_per_domain, rho: float, n: int) -> float:
    """Domain average of the per-domain stability term."""
    c = np.atleast_1d(np.asarray(c_min_per_domain, dtype=np.float64))
    return float(np.mean([_stability_term(beta, ci, rho, n) for ci in c]))


def jps_vs_direct_cmin(g: GradSnapshot, rho: float) -> dict:
    """Per-domain C_min of the importance-step mask against the gradient-sum mask."""
    jps = build_mask(SelectorKind.WITHOUT_VARIANCE, g, rho)
    direct = build_mask(SelectorKind.DIRECT, g, rho)
    if len(jps) == 0 or len(direct) == 0:
        raise ValidationError("jps_vs_direct_cmin needs both masks nonempty")
    return {
        "jps_min_per_domain": c_min(g, jps).tolist(),
        "direct_min_per_domain": c_min(g, direct).tolist(),
        "jps_count": len(jps),
        "direct_count": len(direct),
    }


def a_distance_proxy(features_a: np.ndarray, features_b: np.ndarray, seed: int = 0) -> float:
    """2 (2 acc - 1) of a linear domain classifier, clipped to [0, 2].

    The larger set is subsampled to balance the classes; half of each side
    trains the discriminator and the other half measures ``acc``.
    """
    A = np.asarray(features_a, dtype=np.float64)
    B = np.asarray(features_b, dtype=np.float64)
    if len(A) < 20 or len(B) < 20:
        raise ValidationError("a_distance_proxy needs at least 20 samples per side")
    rng = SeededRng(seed, 41)
    # only the larger side is subsampled and both sides share one split
    # permutation, so swapping the two sets only swaps the class labels
    n = min(len(A), len(B))
    if len(A) > n:
        A = A[np.sort(rng.choice(len(A), n))]
    elif len(B) > n:
        B = B[np.sort(rng.choice(len(B), n))]
    X = np.concatenate([A, B])
    if np.all(X.std(axis=0) == 0):
        log.warning("a_distance_proxy: features have zero variance; returning 0")
        return 0.0
    y = np.concatenate([np.zeros(n), np.ones(n)])
    half = n // 2
    perm = rng.rand_perm(n)
    tr = np.concatenate([perm[:half], n + perm[:half]])
    te = np.concatenate([perm[half:], n + perm[half:]])
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    clf = LogisticRegression(C=1.0, max_iter=1000)
    clf.fit(Z[tr], y[tr])
    acc = float((clf.predict(Z[te]) == y[te]).mean())
    return float(np.clip(2.0 * (2.0 * acc - 1.0), 0.0, 2.0))


def mask_rank_report(mask: Mask, cfg: ModelConfig) -> list:
    """Per block: selected fc1 coordinates and exact rank of the weight-shaped 0/1 mask."""
    if not mask.L:
        return []
    imap = eligible_coords(cfg, mask.L)
    located = imap.locate(mask.selected)
    report = []
    for pid, _, shape in imap.segments:
        if not pid.endswith("fc1.weight"):
            continue
        block = int(pid.split(".")[1])
        M = np.zeros(shape)
        w = located.get(pid, np.zeros(0, dtype=np.int64))
        M.reshape(-1)[w] = 1.0
        b = located.get(pid.replace("weight", "bias"), np.zeros(0, dtype=np.int64))
        report.append({"block": block, "selected_count": int(w.size + b.size), "weight_selected": int(w.size),
                       "exact_rank": binary_matrix_rank(M)})
    return report


@dataclass
class BoundTerms:
    beta: float
    n: int
    rho: float
    c_min_per_domain: list
    c_min_pooled: float
    k1: float
    k2_first_term: float
    a_distance_proxy: list

    def to_dict(self):
        return asdict(self)


def bound_terms(g: GradSnapshot, mask: Mask, beta: float, n: int, proxies=()) -> BoundTerms:
    per = c_min(g, mask, "per_domain")
    pooled = c_min(g, mask, "pooled")
    return BoundTerms(beta, int(n), mask.rho, [float(v) for v in per], pooled, k1(beta, pooled, mask.rho, n),
                      k2_first_term(beta, per, mask.rho, n), [float(p) for p in proxies])
