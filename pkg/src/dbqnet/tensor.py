"""Minimal dense tensor library with reverse-mode differentiation.

Everything the encoder needs runs through this module: tensors of rank
up to 3, a recording tape, and the handful of differentiable kernels
(linear maps, ReLU/sigmoid, neighborhood max pooling, gathers/scatters,
losses). Two precisions are supported: float32 ("standard") for training
and benchmarks, float64 ("wide") for finite-difference gradient checks.

There is no general broadcasting; the only implicit expansion is the
bias row inside `linear`. Shapes are checked eagerly and mismatches
raise DimensionError naming both shapes.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError

STANDARD = np.float32
WIDE = np.float64

_SIGMOID_CLAMP = 40.0  # |x| beyond this saturates; keeps exp() finite

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense array of rank <= 3 with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        data = np.asarray(data)
        if data.ndim > 3:
            raise DimensionError(f"tensors are limited to rank 3, got shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: output, inputs, and the gradient rule."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, which is already topological;
    `backward` walks them exactly once in reverse. Use as a context
    manager; ops executed outside any tape run forward-only.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of a scalar loss into every reachable input."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("loss is non-finite; refusing to backpropagate")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise DimensionError(
                        f"gradient shape {gi.shape} does not match tensor shape {t.data.shape}")
                t.grad = gi if t.grad is None else t.grad + gi


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, registering it on the active tape when needed.

    `backward_fn` receives the upstream gradient and must return one
    gradient (or None) per input, in order. Custom ops in other modules
    build on this entry point.
    """
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    tape = active_tape()
    if tape is not None and needs_grad:
        tape.nodes.append(Node(out, inputs, backward_fn))
    return out


def constant(data, dtype=STANDARD) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def parameter(data, dtype=STANDARD) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed tensor dtypes in one op: {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return record(a.data * b.data, (a, b),
                  lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return record(a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, x.data.dtype.type(0)), (x,),
                  lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic; the exponent argument is clamped to +-40."""
    z = np.clip(x.data, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))
    out = out.astype(x.data.dtype, copy=False)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where a is (N, C) or (M, phi, C) and b is (C, K)."""
    _check_same_dtype(a, b)
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = a2.T @ g2
        return ga, gb

    return record(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b a (1, K) bias row broadcast over leading extents."""
    _check_same_dtype(x, w, b)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear inner extents disagree: {x.shape} @ {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"bias must be (1, {w.shape[1]}), got {b.shape}")
    out = x.data @ w.data
    out = out + b.data.reshape((1,) * (out.ndim - 1) + (w.shape[1],))

    def backward(g):
        gx = g @ w.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gw = x2.T @ g2
        gb = g2.sum(axis=0, keepdims=True)
        return gx, gw, gb

    return record(out, (x, w, b), backward)


def mlp_apply(params: Iterable[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """Stack of linear layers, each followed by ReLU.

    `params` is a sequence of (W, b) pairs whose widths must chain.
    """
    out = x
    for w, b in params:
        out = relu(linear(out, w, b))
    return out


def max_pool_neighbors(f: Tensor) -> Tensor:
    """Max over the middle (neighbor) extent: (M, phi, C) -> (M, C).

    The gradient is routed to the argmax slot only; ties go to the first
    occurrence so repeated runs are bit-identical.
    """
    if f.data.ndim != 3:
        raise DimensionError(f"max_pool_neighbors expects rank 3, got {f.shape}")
    if f.shape[1] < 1:
        raise DimensionError("neighbor extent must be >= 1")
    idx = np.argmax(f.data, axis=1)  # first max on ties
    out = np.take_along_axis(f.data, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gf = np.zeros_like(f.data)
        np.put_along_axis(gf, idx[:, None, :], g[:, None, :], axis=1)
        return (gf,)

    return record(out, (f,), backward)


# ---------------------------------------------------------------------------
# indexing / reshaping


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a (N, C) tensor: out[i] = x[idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), backward)


def gather_neighbors(x: Tensor, table: np.ndarray) -> Tensor:
    """Gather a (Q, phi) index table out of (N, C): result (Q, phi, C)."""
    table = np.asarray(table, dtype=np.int64)
    out = x.data[table]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, table.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gx,)

    return record(out, (x,), backward)


def scatter_rows(x: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Spread (M, C) rows into a zero (n_rows, C) tensor at `rows`.

    Row indices must be unique; the backward is a plain gather.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
        raise DimensionError(f"scatter rows out of range for {n_rows} rows")
    out = np.zeros((n_rows, x.shape[-1]), dtype=x.data.dtype)
    out[rows] = x.data
    return record(out, (x,), lambda g: (g[rows],))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel (last) extent."""
    _check_same_dtype(a, b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat leading extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return record(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))


def column(x: Tensor, k: int) -> Tensor:
    """Slice column k of a (N, K) tensor as (N, 1)."""
    if x.data.ndim != 2:
        raise DimensionError(f"column expects rank 2, got {x.shape}")
    out = x.data[:, k:k + 1].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, k:k + 1] = g
        return (gx,)

    return record(out, (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows: (N, C) -> (1, C)."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows expects rank 2, got {x.shape}")
    n = x.shape[0]
    out = x.data.mean(axis=0, keepdims=True)
    return record(out, (x,), lambda g: (np.repeat(g / n, n, axis=0),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray([x.data.sum()], dtype=x.data.dtype)
    return record(out, (x,), lambda g: (np.full_like(x.data, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray([x.data.mean()], dtype=x.data.dtype)
    return record(out, (x,), lambda g: (np.full_like(x.data, g[0] / n),))


# ---------------------------------------------------------------------------
# losses


def bce_with_logits_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits, numerically stable form."""
    x = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=x.dtype).reshape(-1)
    if x.shape != t.shape:
        raise DimensionError(f"bce targets shape {t.shape} vs logits {x.shape}")
    n = x.size
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray([per.mean()], dtype=x.dtype)

    def backward(g):
        p = 1.0 / (1.0 + np.exp(-np.clip(x, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)))
        gx = ((p - t) * (g[0] / n)).reshape(logits.shape).astype(logits.data.dtype)
        return (gx,)

    return record(out, (logits,), backward)


def smooth_l1_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Huber (delta=1) summed over channels, averaged over rows."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise DimensionError(f"smooth_l1 target shape {t.shape} vs pred {pred.shape}")
    if pred.data.size == 0:
        return record(np.zeros(1, dtype=pred.data.dtype), (pred,),
                      lambda g: (np.zeros_like(pred.data),))
    n_rows = pred.shape[0]
    d = pred.data - t
    absd = np.abs(d)
    per = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    out = np.asarray([per.sum() / n_rows], dtype=pred.data.dtype)

    def backward(g):
        return ((np.clip(d, -1.0, 1.0) * (g[0] / n_rows)).astype(pred.data.dtype),)

    return record(out, (pred,), backward)


def abs_diff(x: Tensor, target: float) -> Tensor:
    """|x - target| on a scalar tensor; subgradient 0 at equality."""
    if x.data.size != 1:
        raise DimensionError(f"abs_diff expects a scalar, got {x.shape}")
    d = x.data - x.data.dtype.type(target)
    return record(np.abs(d), (x,), lambda g: (g * np.sign(d),))


# ---------------------------------------------------------------------------
# verification


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    `loss_fn` must build a fresh scalar loss from the current parameter
    values and be deterministic (freeze any noise before calling). The
    worst relative error over all parameter elements is returned, with
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    if not np.isfinite(loss.item()):
        raise NumericError("grad_check loss is non-finite")
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = loss_fn().item()
            flat[i] = keep - eps
            f_minus = loss_fn().item()
            flat[i] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("grad_check perturbation gave non-finite loss")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(float(gflat[i])), 1e-8)
            worst = max(worst, abs(numeric - float(gflat[i])) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: named records of (u32 name len, name bytes, u32 rank,
# u32 extents..., float32 little-endian values), plus a text manifest.


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Write named arrays as float32 little-endian records plus a manifest."""
    with open(path, "wb") as fh:
        for name, arr in named.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    with open(str(path) + ".manifest", "w") as fh:
        for name, arr in named.items():
            shape = "x".join(str(e) for e in np.asarray(arr).shape) or "scalar"
            fh.write(f"{name} {shape}\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by `save_checkpoint`."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"checkpoint truncated at byte {off} while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        extents = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(extents)) if rank else 1
        values = np.frombuffer(take(4 * count, "values"), dtype="<f4")
        out[name] = values.reshape(extents).astype(np.float32)
    return out
