"""Numeric primitives shared by every other module.

Arrays are plain ``numpy.ndarray`` values; the precision contract is carried by
the dtype (float32 for training paths, float64 for oracle/gradient-check
paths).  Randomness goes through :class:`RngState`, a counter-based generator
(Philox 4x64) so that a seed pins the sample stream bit-exactly across
platforms and across save/load.

The finite-difference routine here is the reference oracle that analytic
gradients elsewhere are validated against; it deliberately shares no code with
any of the analytic backward passes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64

# np.exp overflows float64 just above this; inputs beyond it are rejected
# rather than silently turned into inf.
_EXP_OVERFLOW_LIMIT = 709.0


class ArgumentError(ValueError):
    """An argument violates a documented precondition."""


class NumericsError(ArithmeticError):
    """A numeric-domain failure (non-finite value, overflow, empty domain)."""


class RngState:
    """Deterministic random stream backed by the Philox 4x64 counter generator.

    The full generator state is JSON-serializable via :meth:`get_state` /
    :meth:`set_state`, which is what makes interrupted training resumable
    bit-exactly.  Child streams derived with :meth:`child` fold a stream index
    into the upper 64 bits of the Philox key, so they never overlap the parent
    stream.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not isinstance(seed, (int, np.integer)):
            raise ArgumentError(f"RngState: seed must be an integer, got {type(seed).__name__}")
        if seed < 0:
            raise ArgumentError(f"RngState: seed must be nonnegative, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        key = (int(seed) & 0xFFFFFFFFFFFFFFFF) | (self.stream << 64)
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)

    def child(self, stream: int) -> "RngState":
        """Independent stream sharing this seed (distinct Philox key)."""
        return RngState(self.seed, stream=stream)

    def normal(self, shape: Sequence[int] | tuple = (), dtype=FLOAT64) -> np.ndarray:
        """Standard normal draws.  Always generated at 64 bits, then cast, so
        the stream does not depend on the requested storage dtype."""
        out = self._gen.standard_normal(size=tuple(shape), dtype=np.float64)
        return out.astype(dtype, copy=False)

    def uniform(self, shape: Sequence[int] | tuple = (), dtype=FLOAT64) -> np.ndarray:
        out = self._gen.random(size=tuple(shape), dtype=np.float64)
        return out.astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape: Sequence[int] | tuple = ()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=tuple(shape), dtype=np.int64)

    def get_state(self) -> dict:
        """JSON-safe snapshot of the full generator state."""
        state = self._bitgen.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in state["state"]["counter"]],
            "key": [int(v) for v in state["state"]["key"]],
            "buffer": [int(v) for v in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    def set_state(self, snapshot: dict) -> None:
        self.seed = int(snapshot["seed"])
        self.stream = int(snapshot["stream"])
        state = self._bitgen.state
        state["state"]["counter"] = np.array(snapshot["counter"], dtype=np.uint64)
        state["state"]["key"] = np.array(snapshot["key"], dtype=np.uint64)
        state["buffer"] = np.array(snapshot["buffer"], dtype=np.uint64)
        state["buffer_pos"] = int(snapshot["buffer_pos"])
        state["has_uint32"] = int(snapshot["has_uint32"])
        state["uinteger"] = int(snapshot["uinteger"])
        self._bitgen.state = state


def gaussian_sample(rng: RngState, shape, mean: float = 0.0, std: float = 1.0,
                    dtype=FLOAT64) -> np.ndarray:
    """Draw ``mean + std * N(0, 1)`` with the given shape.

    std == 0 is allowed and returns the constant array.
    """
    if std < 0:
        raise ArgumentError(f"gaussian_sample: std must be >= 0, got {std}")
    return (mean + std * rng.normal(shape, dtype=np.float64)).astype(dtype, copy=False)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the gradient oracle.

    ``x`` must be float64: the whole point of this routine is to provide more
    accuracy than the float32 training path, and running it at 32 bits would
    silently destroy that.
    """
    if not isinstance(x, np.ndarray) or x.dtype != np.float64:
        raise ArgumentError(
            f"finite_diff_grad: x must be a float64 ndarray, got "
            f"{getattr(x, 'dtype', type(x).__name__)}")
    if h <= 0:
        raise ArgumentError(f"finite_diff_grad: h must be > 0, got {h}")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(v) for v in np.unravel_index(i, x.shape))
            raise NumericsError(
                f"finite_diff_grad: non-finite objective at coordinate {idx} "
                f"(f(x+h)={fp}, f(x-h)={fm})")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def elementwise_exp(x: np.ndarray) -> np.ndarray:
    """exp(x), rejecting inputs that would overflow to inf."""
    x = np.asarray(x)
    mx = float(np.max(x)) if x.size else 0.0
    if mx > _EXP_OVERFLOW_LIMIT:
        raise NumericsError(f"elementwise_exp: exponent {mx} overflows float64")
    return np.exp(x)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def reduce_sum(x: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x)
    if axis is not None and not (-x.ndim <= axis < x.ndim):
        raise ArgumentError(f"reduce_sum: axis {axis} out of range for shape {x.shape}")
    return np.sum(x, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax.  A slice with no finite entry has no
    distribution to normalize to and is rejected."""
    x = np.asarray(x, dtype=np.float64) if np.asarray(x).dtype != np.float32 else np.asarray(x)
    mx = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise NumericsError("softmax: a slice contains no finite entries")
    e = np.exp(x - mx)
    return e / np.sum(e, axis=axis, keepdims=True)


def require_finite(name: str, x: np.ndarray) -> np.ndarray:
    """Detect-and-reject guard: raise instead of letting NaN/inf propagate."""
    if not np.all(np.isfinite(x)):
        bad = int(np.count_nonzero(~np.isfinite(x)))
        raise NumericsError(f"{name}: {bad} non-finite element(s) detected")
    return x
