"""Minimal reverse-mode differentiation over dense numpy arrays.

Every op returns a new :class:`Tensor` holding references to its parents and
a closure that pushes the output gradient back into them. ``Tensor.backward``
linearises the expression graph into a :class:`Tape` (topological order) and
replays it in reverse, visiting each record once.

Broadcasting is limited to what numpy does for ``add``/``mul``; gradients are
summed back to the operand shape.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> "Tape":
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.from_root(self)
        tape.run(self, np.asarray(grad, dtype=self.data.dtype))
        return tape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered records reachable from one output."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        root._accumulate(seed)
        for node in reversed(self.records):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _result(out, (x,), "sigmoid", backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return _result(out, (x,), "tanh", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)

    def backward(g):
        x._accumulate(g * scale)

    return _result(x.data * scale, (x,), "leaky_relu", backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                x._accumulate(g[tuple(idx)])

    return _result(out, xs, "concat", backward)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, index, g)
        x._accumulate(buf)

    return _result(x.data[index], (x,), "gather", backward)


def _check_segments(index: np.ndarray, num_segments: int, n: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (n,):
        raise ValueError(f"segment index has shape {index.shape}, expected ({n},)")
    if n and (index.min() < 0 or index.max() >= num_segments):
        bad = int(index[(index < 0) | (index >= num_segments)][0])
        raise IndexError(f"segment index {bad} out of range for {num_segments} segments")
    return index


def segment_sum(x: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Row ``v`` of the result is the sum of rows ``i`` of ``x`` with ``index[i] == v``."""
    index = _check_segments(index, num_segments, x.shape[0])
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, index, x.data)

    def backward(g):
        x._accumulate(g[index])

    return _result(out, (x,), "segment_sum", backward)


def segment_softmax(logits: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over axis 0 within each group of rows sharing ``index``."""
    index = _check_segments(index, num_segments, logits.shape[0])
    z = logits.data
    gmax = np.full((num_segments,) + z.shape[1:], -np.inf, dtype=z.dtype)
    np.maximum.at(gmax, index, z)
    e = np.exp(z - gmax[index])
    denom = np.zeros_like(gmax)
    np.add.at(denom, index, e)
    out = e / denom[index]

    def backward(g):
        dot = np.zeros_like(gmax)
        np.add.at(dot, index, g * out)
        logits._accumulate(out * (g - dot[index]))

    return _result(out, (logits,), "segment_softmax", backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _result(np.asarray(x.data.sum()), (x,), "sum", backward)


def sum_rows(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _result(x.data.sum(axis=0), (x,), "sum_rows", backward)


def mean_rows(x: Tensor) -> Tensor:
    n = x.shape[0]

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape).copy())

    return _result(x.data.mean(axis=0), (x,), "mean_rows", backward)


# ---------------------------------------------------------------- losses

def loss_mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"loss_mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        pred._accumulate(g * 2.0 * diff / n)

    return _result(np.asarray(np.mean(diff * diff)), (pred,), "mse", backward)


def loss_bce(logits: Tensor, targets) -> Tensor:
    """Mean logit-space binary cross entropy, ``log(1 + exp(-z * (2y - 1)))``."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                   dtype=logits.data.dtype)
    if logits.shape != y.shape:
        raise ValueError(f"loss_bce shape mismatch: {logits.shape} vs {y.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("loss_bce targets must be 0 or 1")
    z = logits.data
    s = -z * (2.0 * y - 1.0)
    per = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
    n = z.size

    def backward(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        logits._accumulate(g * (p - y) / n)

    return _result(np.asarray(per.mean()), (logits,), "bce", backward)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState) -> None:
    """Bias-corrected Adam update applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               tolerance: float | None = None, step: float = 1e-5,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    Relative error per input is ``|a - n| / max(|a|, |n|, floor)`` in the
    Euclidean norm. The floor keeps finite-difference noise on gradients that
    are exactly zero from reading as a relative error of 1.
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function value is not finite")
    out.backward()
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def value(vals):
        return float(fn(*[Tensor(v) for v in vals]).data)

    numeric = []
    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = value(arrays)
            flat[j] = orig - step
            fm = value(arrays)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * step)
        if not np.all(np.isfinite(num)):
            raise FloatingPointError(f"non-finite numeric gradient for input {i}")
        numeric.append(num)

    errors = []
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        errors.append(float(np.linalg.norm(a - n) / scale))
    report = GradCheckReport(max(errors, default=0.0), errors, analytic, numeric)
    if tolerance is not None and not report.passed(tolerance):
        raise AssertionError(f"gradient check failed: max rel. error {report.max_rel_error:.3e}")
    return report


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PSNN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Write named parameters as little-endian fp32.

    Layout: magic, u32 version, u32 count, then per parameter u16 name length,
    UTF-8 name, u8 rank, u32 dims, fp32 payload.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
