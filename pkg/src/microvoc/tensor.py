"""Dense rank-4 tensor in (batch, channel, height, width) layout.

One container type holds everything the engine touches: image batches,
activations, conv filters (filters, in_channels, kh, kw), FC weights
(out, in, 1, 1) and biases (1, out, 1, 1). Data is stored C-contiguous,
so flat offset of element (i, j, y, x) is ``((i*c + j)*h + y)*w + x``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Dims = tuple[int, int, int, int]


class Tensor4:
    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"expected 4 dims, got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        if arr.dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def new(cls, dims: Dims, fill: float = 0.0, dtype=np.float64) -> "Tensor4":
        if len(dims) != 4:
            raise ShapeError(f"expected 4 dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dims must be >= 1, got {dims}")
        if np.dtype(dtype) not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise ShapeError(f"unsupported dtype {dtype}")
        return cls(np.full(dims, fill, dtype=dtype))

    @property
    def dims(self) -> Dims:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _check_index(self, i: int, j: int, y: int, x: int) -> None:
        n, c, h, w = self.data.shape
        for name, idx, bound in (("i", i, n), ("j", j, c), ("y", y, h), ("x", x, w)):
            if not 0 <= idx < bound:
                raise IndexError(f"index {name}={idx} out of range [0, {bound})")

    def get(self, i: int, j: int, y: int, x: int) -> float:
        self._check_index(i, j, y, x)
        return float(self.data[i, j, y, x])

    def set(self, i: int, j: int, y: int, x: int, v: float) -> None:
        self._check_index(i, j, y, x)
        self.data[i, j, y, x] = v

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy())

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor4)
            and self.dims == other.dims
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self) -> str:
        return f"Tensor4(dims={self.dims}, dtype={self.data.dtype})"


def zeros_like(t: Tensor4) -> Tensor4:
    return Tensor4(np.zeros_like(t.data))


def axpy_scale(a: float, x: Tensor4, y: Tensor4) -> Tensor4:
    """Elementwise ``a*x + y``; x and y must share dims."""
    if x.dims != y.dims:
        raise ShapeError(f"dims mismatch: {x.dims} vs {y.dims}")
    return Tensor4(a * x.data + y.data)


def sq_l2(t: Tensor4) -> float:
    """Squared L2 norm, sum of squared elements."""
    d = t.data.ravel()
    return float(np.dot(d, d))
