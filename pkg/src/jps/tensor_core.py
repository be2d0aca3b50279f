"""Dense float64 substrate: tensors, seeded randomness and exact binary rank.

A "tensor" here is a C-contiguous ``numpy.ndarray`` of dtype float64. The
helpers below enforce that representation at module boundaries.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError

DTYPE = np.float64


def as_tensor(data, shape=None) -> np.ndarray:
    """Copy ``data`` into a contiguous float64 array, optionally reshaped."""
    arr = np.array(data, dtype=DTYPE, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    return arr


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise DomainError(f"{what} contains non-finite values")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed summation order.

    ``out[i, j] = (((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)``, the same
    order as a naive triple loop, so results are reproducible bit for bit
    independently of the BLAS build.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    p, q = a.shape
    q2, r = b.shape
    if q != q2:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((p, r), dtype=DTYPE)
    for k in range(q):
        # no fused multiply-add: the product is materialised before the add
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def binary_matrix_rank(mask_matrix) -> int:
    """Exact rank of a 0/1 matrix by fraction-free (Bareiss) elimination."""
    m = np.asarray(mask_matrix, dtype=DTYPE)
    if m.ndim != 2:
        raise DimensionError(f"rank needs a 2-D matrix, got shape {m.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise DomainError("binary_matrix_rank: entries must be exactly 0 or 1")
    rows = [[int(v) for v in row] for row in m]
    n_rows, n_cols = m.shape
    rank = 0
    prev_pivot = 1
    for col in range(n_cols):
        if rank == n_rows:
            break
        pivot = next((r for r in range(rank, n_rows) if rows[r][col] != 0), None)
        if pivot is None:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        p = rows[rank][col]
        for r in range(rank + 1, n_rows):
            f = rows[r][col]
            rows[r] = [(p * rows[r][c] - f * rows[rank][c]) // prev_pivot for c in range(n_cols)]
        prev_pivot = p
        rank += 1
    return rank


class SeededRng:
    """Counter-based (Philox) generator keyed on ``(seed, stream)``.

    Independent streams come from distinct stream ids, so parallel workers
    never share generator state.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise DomainError("seed and stream must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def spawn(self, stream: int) -> "SeededRng":
        """Fresh generator on another stream of the same seed."""
        return SeededRng(self.seed, stream)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def randn(self, shape) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape), dtype=DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def rand_perm(self, n: int) -> np.ndarray:
        if n < 0:
            raise DomainError("rand_perm needs n >= 0")
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``, unsorted."""
        return self._gen.choice(n, size=size, replace=False)


def randn(rng: SeededRng, shape) -> np.ndarray:
    return rng.randn(shape)


def rand_perm(rng: SeededRng, n: int) -> np.ndarray:
    return rng.rand_perm(n)
