"""Mini transformer classifier with hand-written reverse-mode gradients.

Per block: layernorm -> single-head self-attention (+residual) -> layernorm
-> fc1 -> GELU -> dropout -> fc2 (+residual). Tokens are mean-pooled and fed
to a linear classifier head. A learned positional embedding is added to the
inputs before the first block.

The key projection carries no bias: its gradient is identically zero because
softmax is invariant to a per-query constant shift.
"""

from __future__ import annotations

import base64
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .errors import DimensionError, DomainError, ValidationError
from .tensor_core import DTYPE, SeededRng

LN_EPS = 1e-5
ROLES = ("attention", "mlp_fc1", "mlp_fc2", "layernorm", "embedding", "classifier_head")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    d_model: int = 8
    num_tokens: int = 4
    mlp_hidden: int = 64
    num_classes: int = 5
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("d_model", "num_tokens", "mlp_hidden", "num_classes"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"ModelConfig.{name} must be positive")
        if self.num_blocks < 0:
            raise ValidationError("ModelConfig.num_blocks must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.num_tokens * self.d_model

    @property
    def fc1_size(self) -> int:
        return self.d_model * self.mlp_hidden + self.mlp_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    inputs: np.ndarray  # [n, T, d_model]
    labels: np.ndarray  # [n] int
    domain_ids: np.ndarray  # [n] int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        n = self.inputs.shape[0]
        if n == 0:
            raise ValidationError("empty batch")
        if self.labels.shape != (n,) or self.domain_ids.shape != (n,):
            raise DimensionError("labels/domain_ids must be 1-D with one entry per input")

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx], self.domain_ids[idx])


@dataclass
class ParamEntry:
    param_id: str
    layer_index: int  # block index, -1 outside the block stack
    role: str
    tensor: np.ndarray


def param_layout(cfg: ModelConfig) -> list[tuple[str, int, str, tuple[int, ...]]]:
    """(param_id, layer_index, role, shape) in canonical order."""
    D, H, T, C = cfg.d_model, cfg.mlp_hidden, cfg.num_tokens, cfg.num_classes
    out = [("embed.pos", -1, "embedding", (T, D))]
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        out += [
            (p + "ln1.gamma", b, "layernorm", (D,)),
            (p + "ln1.beta", b, "layernorm", (D,)),
            (p + "attn.wq", b, "attention", (D, D)),
            (p + "attn.bq", b, "attention", (D,)),
            (p + "attn.wk", b, "attention", (D, D)),
            (p + "attn.wv", b, "attention", (D, D)),
            (p + "attn.bv", b, "attention", (D,)),
            (p + "attn.wo", b, "attention", (D, D)),
            (p + "attn.bo", b, "attention", (D,)),
            (p + "ln2.gamma", b, "layernorm", (D,)),
            (p + "ln2.beta", b, "layernorm", (D,)),
            (p + "fc1.weight", b, "mlp_fc1", (D, H)),
            (p + "fc1.bias", b, "mlp_fc1", (H,)),
            (p + "fc2.weight", b, "mlp_fc2", (H, D)),
            (p + "fc2.bias", b, "mlp_fc2", (D,)),
        ]
    out += [("head.weight", -1, "classifier_head", (D, C)), ("head.bias", -1, "classifier_head", (C,))]
    return out


class ParamStore:
    """Named parameters plus the frozen snapshot ``theta0`` taken at load time."""

    def __init__(self, entries):
        self.entries: "OrderedDict[str, ParamEntry]" = OrderedDict()
        for e in entries:
            if e.param_id in self.entries:
                raise ValidationError(f"duplicate param_id {e.param_id!r}")
            if e.role not in ROLES:
                raise ValidationError(f"unknown role {e.role!r}")
            e.tensor = np.array(e.tensor, dtype=DTYPE, order="C")
            self.entries[e.param_id] = e
        self.theta0 = {pid: e.tensor.copy() for pid, e in self.entries.items()}

    def __getitem__(self, pid: str) -> np.ndarray:
        try:
            return self.entries[pid].tensor
        except KeyError:
            raise KeyError(f"unknown param_id {pid!r}") from None

    def __contains__(self, pid):
        return pid in self.entries

    def __iter__(self):
        return iter(self.entries)

    def tensors(self) -> dict:
        return {pid: e.tensor for pid, e in self.entries.items()}

    def ids_with_role(self, role: str) -> list[str]:
        return [pid for pid, e in self.entries.items() if e.role == role]

    def num_params(self) -> int:
        return sum(e.tensor.size for e in self.entries.values())

    def clone(self) -> "ParamStore":
        """Deep copy whose ``theta0`` is this store's ``theta0`` (not its live values)."""
        new = ParamStore(
            ParamEntry(e.param_id, e.layer_index, e.role, e.tensor.copy()) for e in self.entries.values()
        )
        new.theta0 = {pid: t.copy() for pid, t in self.theta0.items()}
        return new

    def freeze_snapshot(self) -> None:
        self.theta0 = {pid: e.tensor.copy() for pid, e in self.entries.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([e.tensor.ravel() for e in self.entries.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        off = 0
        for e in self.entries.values():
            n = e.tensor.size
            e.tensor[...] = vec[off:off + n].reshape(e.tensor.shape)
            off += n
        if off != vec.size:
            raise DimensionError(f"flat vector has {vec.size} values, store needs {off}")

    # checkpoint I/O -----------------------------------------------------

    def to_checkpoint(self, cfg: ModelConfig) -> dict:
        return {
            "config": cfg.to_dict(),
            "entries": [
                {
                    "param_id": e.param_id,
                    "layer_index": e.layer_index,
                    "role": e.role,
                    "shape": list(e.tensor.shape),
                    "data": base64.b64encode(e.tensor.astype("<f8").tobytes()).decode("ascii"),
                }
                for e in self.entries.values()
            ],
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> tuple["ParamStore", ModelConfig]:
        cfg = ModelConfig.from_dict(doc["config"])
        entries = []
        for d in doc["entries"]:
            raw = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
            shape = tuple(d["shape"])
            entries.append(ParamEntry(d["param_id"], int(d["layer_index"]), d["role"], raw.reshape(shape).astype(DTYPE)))
        return cls(entries), cfg

    def save(self, path, cfg: ModelConfig) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(cfg), fh)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", ModelConfig]:
        with open(path) as fh:
            return cls.from_checkpoint(json.load(fh))


def init_params(cfg: ModelConfig, rng: SeededRng, scale: float = 1.0) -> ParamStore:
    """Random initialisation: fan-in scaled weights, unit LN gains, zero biases."""
    entries = []
    for pid, layer, role, shape in param_layout(cfg):
        if pid.endswith("gamma"):
            t = np.ones(shape)
        elif pid == "embed.pos":
            t = 0.1 * rng.randn(shape)
        elif len(shape) == 2:
            t = scale * rng.randn(shape) / np.sqrt(shape[0])
        else:
            t = np.zeros(shape)
        entries.append(ParamEntry(pid, layer, role, t))
    return ParamStore(entries)


def zero_params(cfg: ModelConfig) -> ParamStore:
    return ParamStore(ParamEntry(pid, layer, role, np.zeros(shape)) for pid, layer, role, shape in param_layout(cfg))


# ---------------------------------------------------------------------------
# primitives


def gelu(u):
    return 0.5 * u * (1.0 + erf(u / _SQRT2))


def gelu_grad(u):
    return 0.5 * (1.0 + erf(u / _SQRT2)) + u * _INV_SQRT2PI * np.exp(-0.5 * u * u)


def _ln_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _ln_backward(dy, gamma, cache):
    xhat, rstd = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _wgrad(x, dy):
    """Weight gradient of ``y = x @ W`` summed over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss(logits, labels) -> float:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(logits)):
        raise DomainError("loss: non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def _check_batch(cfg: ModelConfig, x: np.ndarray):
    if x.ndim != 3 or x.shape[1:] != (cfg.num_tokens, cfg.d_model):
        raise DimensionError(f"inputs must be [n, {cfg.num_tokens}, {cfg.d_model}], got {x.shape}")


# ---------------------------------------------------------------------------
# forward / backward


def embed(P: dict, x: np.ndarray) -> np.ndarray:
    return x + P["embed.pos"]


def _block_forward(P, b, h, train_mode, drop_rate, rng):
    p = f"blocks.{b}."
    D = h.shape[-1]
    a, ln1 = _ln_forward(h, P[p + "ln1.gamma"], P[p + "ln1.beta"])
    q = a @ P[p + "attn.wq"] + P[p + "attn.bq"]
    k = a @ P[p + "attn.wk"]
    v = a @ P[p + "attn.wv"] + P[p + "attn.bv"]
    s = (q @ k.transpose(0, 2, 1)) / np.sqrt(D)
    s = s - s.max(axis=-1, keepdims=True)
    A = np.exp(s)
    A /= A.sum(axis=-1, keepdims=True)
    ctx = A @ v
    h1 = h + ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
    c, ln2 = _ln_forward(h1, P[p + "ln2.gamma"], P[p + "ln2.beta"])
    u = c @ P[p + "fc1.weight"] + P[p + "fc1.bias"]
    g = gelu(u)
    keep = None
    if train_mode and drop_rate > 0.0:
        keep = (rng.uniform(size=g.shape) >= drop_rate) / (1.0 - drop_rate)
        g = g * keep
    h2 = h1 + g @ P[p + "fc2.weight"] + P[p + "fc2.bias"]
    cache = (a, ln1, q, k, v, A, ctx, c, ln2, u, g, keep)
    return h2, cache


def _block_backward(P, b, dh2, cache, grads, need_input_grad=True):
    p = f"blocks.{b}."
    a, ln1, q, k, v, A, ctx, c, ln2, u, g, keep = cache
    D = a.shape[-1]
    # MLP sublayer
    grads[p + "fc2.weight"] = _wgrad(g, dh2)
    grads[p + "fc2.bias"] = dh2.reshape(-1, D).sum(axis=0)
    dg = dh2 @ P[p + "fc2.weight"].T
    if keep is not None:
        dg = dg * keep
    du = dg * gelu_grad(u)
    grads[p + "fc1.weight"] = _wgrad(c, du)
    grads[p + "fc1.bias"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
    dc = du @ P[p + "fc1.weight"].T
    dx, grads[p + "ln2.gamma"], grads[p + "ln2.beta"] = _ln_backward(dc, P[p + "ln2.gamma"], ln2)
    dh1 = dh2 + dx
    if not need_input_grad:
        return None
    # attention sublayer
    grads[p + "attn.wo"] = _wgrad(ctx, dh1)
    grads[p + "attn.bo"] = dh1.reshape(-1, D).sum(axis=0)
    dctx = dh1 @ P[p + "attn.wo"].T
    dA = dctx @ v.transpose(0, 2, 1)
    dv = A.transpose(0, 2, 1) @ dctx
    ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(D)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    grads[p + "attn.wq"] = _wgrad(a, dq)
    grads[p + "attn.bq"] = dq.reshape(-1, D).sum(axis=0)
    grads[p + "attn.wk"] = _wgrad(a, dk)
    grads[p + "attn.wv"] = _wgrad(a, dv)
    grads[p + "attn.bv"] = dv.reshape(-1, D).sum(axis=0)
    da = dq @ P[p + "attn.wq"].T + dk @ P[p + "attn.wk"].T + dv @ P[p + "attn.wv"].T
    dx, grads[p + "ln1.gamma"], grads[p + "ln1.beta"] = _ln_backward(da, P[p + "ln1.gamma"], ln1)
    return dh1 + dx


def hidden_at(P: dict, cfg: ModelConfig, inputs: np.ndarray, block: int) -> np.ndarray:
    """Residual stream entering ``block`` (dropout off)."""
    h = embed(P, inputs)
    for b in range(block):
        h, _ = _block_forward(P, b, h, False, 0.0, None)
    return h


def forward_from(P, cfg, h, start_block, train_mode=False, rng=None):
    """Run blocks ``start_block..B-1`` and the head; returns (logits, caches)."""
    caches = []
    drop = cfg.dropout_rate if train_mode else 0.0
    if drop > 0.0 and rng is None:
        raise ValidationError("dropout in train mode needs an rng")
    for b in range(start_block, cfg.num_blocks):
        h, cache = _block_forward(P, b, h, train_mode, drop, rng)
        caches.append(cache)
    pooled = h.mean(axis=1)
    logits = pooled @ P["head.weight"] + P["head.bias"]
    return logits, (caches, pooled, h.shape)


def backward_from(P, cfg, logits, labels, fwd_cache, start_block, stop_block=None):
    """Gradients of mean cross-entropy, propagated down to ``stop_block``.

    Only the MLP sublayer of ``stop_block`` itself is differentiated unless
    ``stop_block == start_block == 0``, in which case every parameter
    (embedding included) gets a gradient.
    """
    caches, pooled, hshape = fwd_cache
    n = logits.shape[0]
    stop_block = start_block if stop_block is None else stop_block
    prob = np.exp(log_softmax(logits))
    prob[np.arange(n), labels] -= 1.0
    dlogits = prob / n
    grads = {
        "head.weight": pooled.T @ dlogits,
        "head.bias": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ P["head.weight"].T
    dh = np.broadcast_to(dpooled[:, None, :] / hshape[1], hshape).copy()
    full = stop_block == 0 and start_block == 0
    for b in range(cfg.num_blocks - 1, stop_block - 1, -1):
        need = full or b > stop_block
        dh = _block_backward(P, b, dh, caches[b - start_block], grads, need_input_grad=need)
    if full:
        grads["embed.pos"] = dh.sum(axis=0)
    return grads


def forward(params: ParamStore, cfg: ModelConfig, batch: Batch, train_mode: bool = False, rng=None) -> np.ndarray:
    P = params.tensors() if isinstance(params, ParamStore) else params
    x = batch.inputs
    _check_batch(cfg, x)
    logits, _ = forward_from(P, cfg, embed(P, x), 0, train_mode, rng)
    return logits


def loss_and_grads(params, cfg: ModelConfig, batch: Batch, train_mode: bool = False, rng=None):
    P = params.tensors() if isinstance(params, ParamStore) else params
    _check_batch(cfg, batch.inputs)
    logits, cache = forward_from(P, cfg, embed(P, batch.inputs), 0, train_mode, rng)
    value = loss(logits, batch.labels)
    grads = backward_from(P, cfg, logits, batch.labels, cache, 0, 0)
    return value, grads


def backward(params, cfg: ModelConfig, batch: Batch, train_mode: bool = False, rng=None) -> dict:
    """Gradient of the mean loss for every parameter, frozen ones included."""
    return loss_and_grads(params, cfg, batch, train_mode, rng)[1]


def features(params, cfg: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    """Penultimate (mean-pooled) representation, dropout off."""
    P = params.tensors() if isinstance(params, ParamStore) else params
    _check_batch(cfg, inputs)
    h = hidden_at(P, cfg, inputs, cfg.num_blocks)
    return h.mean(axis=1)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param_id: str
    worst_index: int
    passed: bool
    tol: float
    num_coords: int

    def to_dict(self):
        return asdict(self)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(params: ParamStore, cfg: ModelConfig, batch: Batch, h: float = 1e-4,
                      tol: float = 1e-5, grad_fn=None) -> GradCheckReport:
    """Compare analytic gradients against central differences on every coordinate.

    ``grad_fn`` substitutes the analytic gradient (used for negative controls).
    """
    grad_fn = grad_fn or backward
    analytic = grad_fn(params, cfg, batch)
    P = {pid: t.copy() for pid, t in params.tensors().items()}
    worst = (-1.0, "", -1)
    count = 0
    for pid, t in P.items():
        ga = analytic[pid].ravel()
        flat = t.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(forward(P, cfg, batch), batch.labels)
            flat[i] = orig - h
            lm = loss(forward(P, cfg, batch), batch.labels)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            err = float(rel_err(ga[i], num))
            count += 1
            if err > worst[0]:
                worst = (err, pid, i)
    passed = worst[0] < tol if tol > 0 else worst[0] == 0.0
    return GradCheckReport(worst[0], worst[1], worst[2], bool(passed), tol, count)


# ---------------------------------------------------------------------------
# eligible-coordinate flattening


@dataclass(frozen=True)
class IndexMap:
    """Coordinate layout of a flat vector over selected parameters.

    ``segments`` are ``(param_id, start, shape)`` in flat order; coordinates
    of one parameter are contiguous and row-major.
    """

    segments: tuple

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, _, shape in self.segments)

    def locate(self, coords) -> dict:
        """Group flat coordinates by parameter: ``{param_id: sorted offsets}``."""
        coords = np.asarray(coords, dtype=np.int64)
        out = {}
        for pid, start, shape in self.segments:
            n = int(np.prod(shape))
            sel = coords[(coords >= start) & (coords < start + n)] - start
            if sel.size:
                out[pid] = np.sort(sel)
        return out

    def param_ids(self) -> list[str]:
        return [pid for pid, _, _ in self.segments]


def flatten_eligible(params, eligible) -> tuple[np.ndarray, IndexMap]:
    """Concatenate the listed parameters (in the given order) into one vector."""
    P = params.tensors() if isinstance(params, ParamStore) else params
    segments = []
    parts = []
    off = 0
    for pid in eligible:
        if pid not in P:
            raise KeyError(f"unknown param_id {pid!r}")
        t = P[pid]
        segments.append((pid, off, tuple(t.shape)))
        parts.append(t.ravel())
        off += t.size
    vec = np.concatenate(parts) if parts else np.zeros(0, dtype=DTYPE)
    return vec, IndexMap(tuple(segments))


def unflatten(vec: np.ndarray, index_map: IndexMap) -> dict:
    if vec.size != index_map.size:
        raise DimensionError(f"vector of {vec.size} values does not fit index map of {index_map.size}")
    return {pid: vec[start:start + int(np.prod(shape))].reshape(shape).copy()
            for pid, start, shape in index_map.segments}


def fc1_ids(cfg: ModelConfig, blocks) -> list[str]:
    out = []
    for b in sorted(blocks):
        out += [f"blocks.{b}.fc1.weight", f"blocks.{b}.fc1.bias"]
    return out
