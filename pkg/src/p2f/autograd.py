"""Reverse-mode autodiff over dense float32 tensors.

Small tape-based engine backed by numpy. Covers exactly the kernels a
byte-level transformer LM and the parameter generator need: matmul,
elementwise arithmetic, GELU, softmax, layer norm, embedding gather,
masked cross-entropy and dropout. Gradients are accumulated into
``Tensor.grad`` as plain numpy arrays.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional

import numpy as np

FLOAT = np.float32

_grad_enabled = True

# When True every kernel output is scanned for NaN/Inf. Cheap relative to
# the matmuls it guards.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily run kernels at a different precision (gradient checking)."""
    global FLOAT
    prev = FLOAT
    FLOAT = dtype
    try:
        yield
    finally:
        FLOAT = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float32 array plus optional backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=FLOAT)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(FLOAT, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse sweep from this scalar through its ancestry."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._backward is None and not self._parents:
            raise ValueError("backward on a detached value (no tape)")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic (tape-aware).
    def __add__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {opname}")


def _node(data: np.ndarray, parents: Iterable[Tensor], backward, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    c = FLOAT(c)
    data = a.data * c

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _node(data, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = _lift(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.transpose(g, inv))

    return _node(data, (a,), backward, "transpose")


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """Slice `length` entries from a 1-D tensor starting at `start`."""
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"narrow expects 1-D input, got {a.shape}")
    data = a.data[start : start + length]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start : start + length] = g
            a.accumulate(full)

    return _node(data, (a,), backward, "narrow")


def narrow_rows(a: Tensor, n: int) -> Tensor:
    """First `n` rows of a 2-D tensor."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"narrow_rows expects 2-D input, got {a.shape}")
    data = a.data[:n]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:n] = g
            a.accumulate(full)

    return _node(data, (a,), backward, "narrow_rows")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    a = _lift(a)
    x = a.data
    c = FLOAT(math.sqrt(2.0 / math.pi))
    inner = c * (x + FLOAT(0.044715) * x * x * x)
    t = np.tanh(inner)
    data = FLOAT(0.5) * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dt = (1.0 - t * t) * c * (1.0 + 3.0 * FLOAT(0.044715) * x * x)
            a.accumulate(g * (FLOAT(0.5) * (1.0 + t) + FLOAT(0.5) * x * dt))

    return _node(data, (a,), backward, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = _lift(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate(data * (g - dot))

    return _node(data, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + FLOAT(eps))
    xhat = (x - mean) * inv
    data = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta.accumulate(_unbroadcast(g, beta.data.shape))
        if a.requires_grad:
            gx = g * gamma.data
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            a.accumulate(inv * (gx - s1 / n - xhat * s2 / n))

    return _node(data, (a, gamma, beta), backward, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table."""
    table = _lift(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table.accumulate(full)

    return _node(data, (table,), backward, "embedding")


def add_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Add a constant additive mask (e.g. -inf-ish causal mask)."""
    a = _lift(a)
    data = a.data + mask.astype(FLOAT)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)

    return _node(data, (a,), backward, "add_mask")


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = _lift(a)
    if not train or p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(FLOAT) / FLOAT(1.0 - p)
    data = a.data * keep

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * keep)

    return _node(data, (a,), backward, "dropout")


def mean_all(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.asarray(a.data.mean(), dtype=FLOAT)
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full(a.data.shape, g / n, dtype=FLOAT))

    return _node(data, (a,), backward, "mean_all")


def sum_all(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.asarray(a.data.sum(), dtype=FLOAT)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full(a.data.shape, g, dtype=FLOAT))

    return _node(data, (a,), backward, "sum_all")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where mask is True.

    logits: (N, V); targets: (N,) int ids; mask: (N,) bool.
    """
    logits = _lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    if not mask.any():
        raise ValueError("cross_entropy: mask selects no positions")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    nll = lse - x[np.arange(x.shape[0]), targets]
    count = int(mask.sum())
    data = np.asarray(nll[mask].sum() / count, dtype=FLOAT)

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            probs[np.arange(x.shape[0]), targets] -= 1.0
            probs *= (mask.astype(FLOAT) / count)[:, None] * g
            logits.accumulate(probs.astype(FLOAT))

    return _node(data, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# rng


def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class RngState:
    """Counter-based random stream (Philox) addressable by (seed, stream).

    Identical (seed, stream path) yields identical draws on every
    platform; `child` derives statistically independent substreams so
    parallel evaluation stays deterministic.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF

    def child(self, *keys) -> "RngState":
        s = self.stream
        for k in keys:
            if isinstance(k, str):
                h = 0xCBF29CE484222325  # FNV-1a over the key bytes
                for byte in k.encode("utf-8"):
                    h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
                k = h
            s = _mix64(s ^ _mix64(int(k) & 0xFFFFFFFFFFFFFFFF))
        return RngState(self.seed, s)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=(self.seed, self.stream)))


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterStore:
    """Named tensors with a frozen flag and AdamW moments per entry."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not frozen
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def set_frozen(self, name: str, frozen: bool) -> None:
        t = self._params[name]
        if frozen:
            self._frozen.add(name)
        else:
            self._frozen.discard(name)
        t.requires_grad = not frozen

    def trainable(self):
        for name, t in self._params.items():
            if name not in self._frozen:
                yield name, t

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        """AdamW moments + step count, flat-named for checkpointing."""
        arrs: dict[str, np.ndarray] = {
            "step_count": np.asarray([float(self.step_count)], dtype=FLOAT)
        }
        for name, m in self._m.items():
            arrs[f"m.{name}"] = m
            arrs[f"v.{name}"] = self._v[name]
        return arrs

    def load_optimizer_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        """Inverse of optimizer_arrays; restores moments exactly."""
        self.step_count = int(np.asarray(arrs["step_count"]).reshape(-1)[0])
        self._m, self._v = {}, {}
        for key, a in arrs.items():
            if key.startswith("m."):
                self._m[key[2:]] = np.asarray(a, dtype=FLOAT).copy()
            elif key.startswith("v."):
                self._v[key[2:]] = np.asarray(a, dtype=FLOAT).copy()
        missing = set(self._m) ^ set(self._v)
        if missing:
            raise ValueError(f"incomplete optimizer state for: {sorted(missing)}")

    def adamw_step(
        self,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """Decoupled-weight-decay Adam over trainable entries with grads."""
        for name, t in self.trainable():
            if t.grad is not None and not np.isfinite(t.grad).all():
                raise NonFiniteError(f"NaN/Inf gradient for parameter {name!r}")
        self.step_count += 1
        tstep = self.step_count
        bc1 = 1.0 - beta1**tstep
        bc2 = 1.0 - beta2**tstep
        for name, t in self.trainable():
            g = t.grad
            if g is None:
                continue
            if name not in self._m:
                self._m[name] = np.zeros_like(t.data)
                self._v[name] = np.zeros_like(t.data)
            m, v = self._m[name], self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            if weight_decay:
                t.data -= FLOAT(lr * weight_decay) * t.data
            t.data -= (FLOAT(lr) * mhat / (np.sqrt(vhat) + FLOAT(eps))).astype(FLOAT)


def cosine_schedule(step: int, total: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at `total`."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = warmup_ratio * total
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
