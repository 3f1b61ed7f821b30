"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape`. Outside a tape
context nothing is recorded and results never participate in gradients, so
the same model code serves training and frozen inference.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """Dense float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of operations; use as a context manager to record."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


# -- branch recording (for kink-aware gradient checks) ------------------------------


def note_branch(decision: np.ndarray) -> None:
    """Log a discrete choice (ReLU mask, pool argmax, top-K set) if recording."""
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.asarray(decision).tobytes())


def _record_branches(f: Callable[[], "Tensor"]) -> tuple[float, list[bytes]]:
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        value = f().item()
        return value, _state.branches
    finally:
        _state.branches = prev


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out.name = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = Node(op, tuple(inputs), out, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    note_branch(mask)
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), backward)


# -- reductions and linear algebra -------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.data.size == 0:
        raise ShapeError(f"mean: empty operand of shape {x.shape}")
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def dot(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Inner product along ``axis`` (broadcast over the remaining axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError(f"dot: contracted dims differ, shapes {a.shape} and {b.shape}")
    return sum(mul(a, b), axis=axis)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dims differ, shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(b.shape)
        return ga, gb

    return _record("matmul", np.asarray(out, dtype=np.float64), (a, b), backward)


# -- structural -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = np.swapaxes(x.data, a1, a2)
    return _record("swapaxes", out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], dtype=np.float64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", out, tensors, backward)


# -- sequence ops -------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid-mode stride-1 temporal convolution.

    ``x`` is (batch, in_channels, length), ``w`` is (out_channels,
    in_channels, width) and ``b`` is (out_channels,).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    width = w.shape[2]
    length = x.shape[2]
    if length < width:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel width {width}")
    win = sliding_window_view(x.data, width, axis=2)  # (B, C, L', k)
    out = np.einsum("bclk,ock->bol", win, w.data, optimize=True)
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1d: bias {b.shape} does not match kernel {w.shape}")
        out = out + b.data[None, :, None]
        inputs = (x, w, b)
    out_len = out.shape[2]

    def backward(g):
        gw = np.einsum("bol,bclk->ock", g, win, optimize=True)
        gx = np.zeros_like(x.data)
        for j in range(width):
            gx[:, :, j : j + out_len] += np.einsum("bol,oc->bcl", g, w.data[:, :, j], optimize=True)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _record("conv1d", out, inputs, backward)


def max_pool1d(x: Tensor, width: int = 3, stride: int = 3) -> Tensor:
    """Temporal max-pool over (batch, channels, length); trailing remainder dropped."""
    if x.ndim != 3:
        raise ShapeError(f"max_pool1d: expected 3-D input, got {x.shape}")
    if x.shape[2] < width:
        raise ShapeError(f"max_pool1d: input length {x.shape[2]} shorter than width {width}")
    win = sliding_window_view(x.data, width, axis=2)[:, :, ::stride]
    arg = win.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    pos = arg + np.arange(arg.shape[2])[None, None, :] * stride

    def backward(g):
        gx = np.zeros_like(x.data)
        bi, ci, _ = np.indices(pos.shape)
        np.add.at(gx, (bi, ci, pos), g)
        return (gx,)

    return _record("max_pool1d", np.ascontiguousarray(out), (x,), backward)


def _sig(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_sequence(x: Tensor, W: Sequence[Tensor], U: Sequence[Tensor], b: Sequence[Tensor], h0: Tensor, c0: Tensor) -> Tensor:
    """Whole-sequence LSTM as one primitive with a hand-written BPTT backward.

    ``x`` is (batch, steps, in); ``W``, ``U`` and ``b`` each hold the input,
    forget, output and candidate-cell parameters in that order, shaped
    (in, hidden), (hidden, hidden) and (hidden,). Returns (batch, steps, hidden).
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence: expected (batch, steps, in) input, got {x.shape}")
    hid = U[0].shape[0]
    for w in W:
        if w.shape != (x.shape[2], hid):
            raise ShapeError(f"lstm_sequence: input weight {w.shape} incompatible with input {x.shape} and hidden {hid}")
    for u in U:
        if u.shape != (hid, hid):
            raise ShapeError(f"lstm_sequence: recurrent weight {u.shape}, expected {(hid, hid)}")
    if h0.shape != (x.shape[0], hid) or c0.shape != (x.shape[0], hid):
        raise ShapeError(f"lstm_sequence: initial states {h0.shape}/{c0.shape}, expected {(x.shape[0], hid)}")
    Wc = np.concatenate([w.data for w in W], axis=1)
    Uc = np.concatenate([u.data for u in U], axis=1)
    bc = np.concatenate([v.data for v in b])
    batch, steps, _ = x.shape
    zx = x.data @ Wc + bc
    h, c = h0.data, c0.data
    H = np.empty((batch, steps, hid))
    cache = []
    for t in range(steps):
        z = zx[:, t] + h @ Uc
        i, f, o = _sig(z[:, :hid]), _sig(z[:, hid : 2 * hid]), _sig(z[:, 2 * hid : 3 * hid])
        u = np.tanh(z[:, 3 * hid :])
        c_prev, h_prev = c, h
        c = c_prev * f + u * i
        tc = np.tanh(c)
        h = o * tc
        H[:, t] = h
        cache.append((i, f, o, u, tc, c_prev, h_prev))

    def backward(g):
        dZ = np.empty((batch, steps, 4 * hid))
        dU = np.zeros_like(Uc)
        dh_next = np.zeros((batch, hid))
        dc_next = np.zeros((batch, hid))
        for t in reversed(range(steps)):
            i, f, o, u, tc, c_prev, h_prev = cache[t]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * u * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - u * u),
            ], axis=1)
            dZ[:, t] = dz
            dU += h_prev.T @ dz
            dh_next = dz @ Uc.T
            dc_next = dc * f
        dW = np.einsum("btd,btg->dg", x.data, dZ)
        db = dZ.sum(axis=(0, 1))
        dx = dZ @ Wc.T
        split = lambda m: np.split(m, 4, axis=-1)  # noqa: E731
        return [dx, *split(dW), *split(dU), *split(db), dh_next, dc_next]

    inputs = (x, *W, *U, *b, h0, c0)
    return _record("lstm_sequence", H, inputs, backward)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "conv1d": conv1d,
    "max_pool1d": max_pool1d,
    "lstm_sequence": lstm_sequence,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "dot": dot,
    "sum": sum,
    "mean": mean,
    "relu": relu,
    "reshape": reshape,
    "getitem": getitem,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the named operation to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*[as_tensor(t) for t in inputs], **kwargs)


# -- backward ---------------------------------------------------------------------


def backprop(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every participating leaf's ``grad``.

    Returns a map from leaf tensor to the gradient contributed by this call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backprop: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# -- gradient checking -----------------------------------------------------------


class GradCheckError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_abs_error: float
    max_rel_error: float
    passed: bool
    skipped: int = 0  # entries whose perturbation crossed a kink at every step size


@dataclass
class GradCheckReport:
    params: list[ParamCheck]
    tolerance: float
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float | None = None,
    retries: int = 3,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` rebuilds the scalar loss from the current values in ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. By default
    ``floor`` is the gradient magnitude below which central-difference
    round-off alone would use a tenth of ``tol``, so exactly-zero gradients
    are judged against what the difference quotient can resolve.

    Piecewise ops (ReLU, max-pool, top-K selection) log their discrete
    choices. When a perturbation changes any choice the difference quotient
    straddles a kink; the entry is retried with a 10x smaller step up to
    ``retries`` times and otherwise counted as skipped. With ``max_entries``
    set, that many entries per parameter are sampled (seeded).
    """
    if not eps > 0:
        raise ValueError(f"finite difference step must be positive, got {eps}")
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    backprop(loss, tape)
    base_value, base_branches = _record_branches(f)
    if not math.isfinite(base_value):
        raise GradCheckError(f"loss is not finite ({base_value})")
    if floor is None:
        noise = np.finfo(np.float64).eps * max(1.0, abs(base_value)) / eps
        floor = 10.0 * noise / tol if tol > 0 else noise
    rng = np.random.default_rng(seed)
    checks = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_abs = worst_rel = 0.0
        skipped = 0
        for i in idx:
            orig = flat[i]
            step = eps
            numeric = None
            for _ in range(retries + 1):
                flat[i] = orig + step
                hi, hi_br = _record_branches(f)
                flat[i] = orig - step
                lo, lo_br = _record_branches(f)
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise GradCheckError(f"non-finite loss perturbing {name}[{int(i)}]")
                if hi_br == base_branches and lo_br == base_branches:
                    numeric = (hi - lo) / (2 * step)
                    break
                step /= 10
            if numeric is None:
                skipped += 1
                continue
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), floor)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, rel)
        checked = len(idx) - skipped
        checks.append(ParamCheck(name, checked, worst_abs, worst_rel, bool(worst_rel < tol and checked > 0), skipped))
        p.grad = None
    return GradCheckReport(checks, tol, floor)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, Tensor], config: dict | None = None) -> None:
    """Write ``{name: {shape, data}}`` as one JSON document.

    ``config``, when given, is stored under the reserved ``__config__`` key.
    """
    doc: dict = {}
    if config is not None:
        doc["__config__"] = config
    for name, t in params.items():
        doc[name] = {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict | None]:
    doc = json.loads(Path(path).read_text())
    config = doc.pop("__config__", None)
    params = {}
    for name, entry in doc.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"checkpoint entry {name!r} malformed: {exc}") from None
        if data.size != int(np.prod(shape)):
            raise ValueError(f"checkpoint entry {name!r}: {data.size} values for shape {shape}")
        params[name] = Tensor(data.reshape(shape), requires_grad=True, name=name)
    return params, config
