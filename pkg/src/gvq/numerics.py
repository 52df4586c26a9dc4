"""Dense-tensor plumbing: dtypes, deterministic RNG streams, and a
finite-difference gradient oracle.

Tensors throughout the package are plain row-major (C-contiguous) numpy
arrays, float32 by default and float64 on gradient-check paths. Randomness
comes exclusively from :class:`RngStream`, a counter-based Philox 4x64
generator keyed by ``(seed, stream_id)``: the same key and call sequence
reproduce the same bits, and the full counter state round-trips through
checkpoints. Normal deviates use numpy's ziggurat sampler on top of the
Philox bit stream; test vectors in the suite pin the exact stream.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32
GRAD_DTYPE = np.float64

# Stream ids derived from one master seed, so ablations vary exactly one
# factor: re-seeding the shuffle never disturbs init draws, and so on.
STREAM_CORE_INIT = 1
STREAM_PROJ_INIT = 2
STREAM_AE_INIT = 3
STREAM_SHUFFLE = 4
STREAM_RESAMPLE = 5
STREAM_DATAGEN = 6
STREAM_ANALYSIS = 7
# extension sweeps derive one stream per multiple: RESAMPLE_SWEEP_BASE + multiple
STREAM_RESAMPLE_SWEEP_BASE = 500

_MASK64 = (1 << 64) - 1


class RngStream:
    """Deterministic random stream; single consumer, never share across tasks.

    Distinct ``stream_id`` values under one seed give statistically
    independent sequences, which is how the trainer derives separate
    streams for core init, projector init, shuffling, and resampling.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)

    def standard_normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        """I.i.d. draws from N(0, 1); advances the stream deterministically."""
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Integers in [low, high). Scalar when shape is None."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state_dict(self) -> dict:
        """JSON-safe snapshot of the full generator state."""
        st = self._bitgen.state
        inner = st["state"]
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": [int(x) for x in inner["counter"]],
            "key": [int(x) for x in inner["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "RngStream":
        rng = cls(d["seed"], d["stream_id"])
        rng._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(d["counter"], dtype=np.uint64),
                "key": np.array(d["key"], dtype=np.uint64),
            },
            "buffer": np.array(d["buffer"], dtype=np.uint64),
            "buffer_pos": d["buffer_pos"],
            "has_uint32": d["has_uint32"],
            "uinteger": d["uinteger"],
        }
        return rng

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D tensors; raises on inner-dimension mismatch."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return a @ b


def sample_standard_normal(shape, rng: RngStream, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Tensor of i.i.d. N(0, 1) draws from the given stream."""
    return rng.standard_normal(shape, dtype=dtype)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float
) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry.

    Works on a float64 copy of ``x``; the input itself is never mutated.
    Intended as an independent oracle for the hand-derived backward passes.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=GRAD_DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x))
        flat[i] = orig - eps
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(
                f"non-finite function value near entry {i}: f+={f_plus}, f-={f_minus}"
            )
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
