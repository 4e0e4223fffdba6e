"""Dense float64 tensors with a reverse-mode tape and FLOP accounting.

This is deliberately small: 2-D arrays, a dozen kernels, scalar losses.
Every kernel validates shapes, checks its output for non-finite values,
and adds to a global FLOP counter (multiply-accumulate = 2 FLOPs, one
FLOP per element for activations and elementwise arithmetic; data
movement such as concatenation is free). Only forward work is counted.

Gradient recording is controlled by tapes. Kernels executed while a
recording tape is active append their backward rules to it; kernels
under a frozen tape (or no tape at all) compute values only. Frozen
tapes are how stop-gradient evaluation of the target network works.
Tapes are plain single-threaded context managers and may nest; the
innermost one wins.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericalError

_LEAKY_SLOPE = 0.01

_flops = 0
_tape_stack: list["Tape"] = []


def reset_flops() -> None:
    """Zero the global forward-FLOP counter."""
    global _flops
    _flops = 0


def flops_report() -> int:
    """Total forward FLOPs executed since the last reset."""
    return _flops


def _add_flops(n: int) -> None:
    global _flops
    _flops += int(n)


class Tensor:
    """Immutable-by-convention 2-D float64 value.

    ``tape`` points at the recording tape that produced this tensor, or
    None for leaves (constants and anything computed outside recording).
    """

    __slots__ = ("data", "tape")

    def __init__(self, data, _tape=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ContractError(f"tensors are 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ContractError("tensors must be non-empty")
        if not np.isfinite(arr).all():
            raise NumericalError("non-finite tensor payload")
        self.data = arr
        self.tape = _tape

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a (1, 1) tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter:
    """A trainable array with an accumulated gradient buffer and a stable id."""

    __slots__ = ("value", "grad", "id")

    def __init__(self, value, id: str):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ContractError(f"parameters are 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite initial value for parameter {id!r}")
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.id = str(id)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


class Tape:
    """Ordered log of (output, backward-rules) pairs for one forward pass."""

    __slots__ = ("recording", "nodes", "consumed")

    def __init__(self, recording: bool):
        self.recording = recording
        self.nodes: list = []
        self.consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: exited out of order")
        return False


def record() -> Tape:
    """A tape that records backward rules. Use as ``with record() as tape:``."""
    return Tape(recording=True)


def frozen() -> Tape:
    """A tape that records nothing; evaluation under it is a stop-gradient."""
    return Tape(recording=False)


def _active() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _recording() -> Tape | None:
    tape = _active()
    if tape is not None and tape.recording:
        return tape
    return None


def _data(x) -> np.ndarray:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, np.ndarray):
        return x
    raise ContractError(f"expected Tensor, Parameter or ndarray, got {type(x).__name__}")


def _bare(out: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.tape = None
    return t


def _finish(out: np.ndarray, opname: str, parents) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericalError(f"non-finite values out of {opname}")
    tape = _recording()
    if tape is None:
        return _bare(out)
    t = _bare(out)
    t.tape = tape
    tape.nodes.append((t, parents()))
    return t


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    if g.shape != tuple(shape):
        raise ContractError(f"cannot reduce gradient {g.shape} to {shape}")
    return g


def _check_broadcast(sa, sb, opname):
    ok = sa == sb or (
        (sb[0] == 1 or sa[0] == 1 or sb[0] == sa[0])
        and (sb[1] == 1 or sa[1] == 1 or sb[1] == sa[1])
    )
    if not ok:
        raise ContractError(f"{opname}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# kernels


def affine(x, w, b) -> Tensor:
    """x @ w + b with b a (1, out) row. 2*N*in*out + N*out FLOPs."""
    xd, wd, bd = _data(x), _data(w), _data(b)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ContractError(f"affine: x {xd.shape} does not match w {wd.shape}")
    if bd.shape != (1, wd.shape[1]):
        raise ContractError(f"affine: bias shape {bd.shape} != (1, {wd.shape[1]})")
    out = xd @ wd
    out += bd
    _add_flops(2 * xd.shape[0] * wd.shape[0] * wd.shape[1] + xd.shape[0] * wd.shape[1])

    def parents():
        return (
            (x, lambda g: g @ wd.T),
            (w, lambda g: xd.T @ g),
            (b, lambda g: g.sum(axis=0, keepdims=True)),
        )

    return _finish(out, "affine", parents)


def matmul(x, w) -> Tensor:
    """x @ w without a bias term. 2*N*in*out FLOPs."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ContractError(f"matmul: x {xd.shape} does not match w {wd.shape}")
    out = xd @ wd
    _add_flops(2 * xd.shape[0] * wd.shape[0] * wd.shape[1])

    def parents():
        return (
            (x, lambda g: g @ wd.T),
            (w, lambda g: xd.T @ g),
        )

    return _finish(out, "matmul", parents)


def sigmoid(x) -> Tensor:
    xd = _data(x)
    out = expit(xd)
    _add_flops(out.size)

    def parents():
        return ((x, lambda g: g * out * (1.0 - out)),)

    return _finish(out, "sigmoid", parents)


def relu(x) -> Tensor:
    xd = _data(x)
    out = np.maximum(xd, 0.0)
    _add_flops(out.size)

    def parents():
        return ((x, lambda g: g * (xd > 0.0)),)

    return _finish(out, "relu", parents)


def leaky_relu(x, slope: float = _LEAKY_SLOPE) -> Tensor:
    xd = _data(x)
    # max(x, slope*x) selects x on the positive side and slope*x on the
    # negative side for any slope in (0, 1) -- same values as a
    # where(x > 0, ...) formulation, one fewer full pass.
    out = xd * slope
    np.maximum(xd, out, out=out)
    _add_flops(out.size)

    def parents():
        return ((x, lambda g: np.where(xd > 0.0, g, g * slope)),)

    return _finish(out, "leaky_relu", parents)


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad.shape, bd.shape, "add")
    out = ad + bd
    _add_flops(out.size)

    def parents():
        return (
            (a, lambda g: _reduce_to(g, ad.shape)),
            (b, lambda g: _reduce_to(g, bd.shape)),
        )

    return _finish(out, "add", parents)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad.shape, bd.shape, "sub")
    out = ad - bd
    _add_flops(out.size)

    def parents():
        return (
            (a, lambda g: _reduce_to(g, ad.shape)),
            (b, lambda g: _reduce_to(-g, bd.shape)),
        )

    return _finish(out, "sub", parents)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad.shape, bd.shape, "mul")
    out = ad * bd
    _add_flops(out.size)

    def parents():
        return (
            (a, lambda g: _reduce_to(g * bd, ad.shape)),
            (b, lambda g: _reduce_to(g * ad, bd.shape)),
        )

    return _finish(out, "mul", parents)


def scale(x, s: float) -> Tensor:
    """x * s for a python scalar s. scale(x, 1.0) is bitwise x."""
    s = float(s)
    if not np.isfinite(s):
        raise ContractError("scale factor must be finite")
    xd = _data(x)
    out = xd * s
    _add_flops(out.size)

    def parents():
        return ((x, lambda g: g * s),)

    return _finish(out, "scale", parents)


def sum_all(x) -> Tensor:
    """Sum every element down to a (1, 1) scalar. One FLOP per element."""
    xd = _data(x)
    out = np.array([[xd.sum()]])
    _add_flops(xd.size)

    def parents():
        return ((x, lambda g: np.full(xd.shape, g[0, 0])),)

    return _finish(out, "sum_all", parents)


def max_pool_rows(x) -> Tensor:
    """Column-wise max over rows: (N, d) -> (1, d). Ties go to the first row."""
    xd = _data(x)
    idx = np.argmax(xd, axis=0)
    cols = np.arange(xd.shape[1])
    out = xd[idx, cols].reshape(1, -1)
    _add_flops(xd.size)

    def parents():
        def back(g):
            gx = np.zeros_like(xd)
            gx[idx, cols] = g[0]
            return gx

        return ((x, back),)

    return _finish(out, "max_pool_rows", parents)


def concat_cols(a, b) -> Tensor:
    """Concatenate two row vectors along columns. Pure data movement: 0 FLOPs."""
    ad, bd = _data(a), _data(b)
    if ad.shape[0] != bd.shape[0]:
        raise ContractError(f"concat_cols: row counts differ ({ad.shape} vs {bd.shape})")
    out = np.concatenate([ad, bd], axis=1)
    p = ad.shape[1]

    def parents():
        return (
            (a, lambda g: g[:, :p]),
            (b, lambda g: g[:, p:]),
        )

    return _finish(out, "concat_cols", parents)


# ---------------------------------------------------------------------------
# backward + checking


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss.

    Accumulates into ``Parameter.grad`` buffers and returns a dict mapping
    leaf Tensors (inputs that were not produced on the tape) to their
    gradients. The tape is consumed; calling backward twice on the same
    forward pass is a contract violation.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss was not produced under a recording tape")
    if tape.consumed:
        raise ContractError("tape already consumed; re-run the forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, Tensor] = {}
    for out, parents in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for obj, vjp in parents:
            if isinstance(obj, Parameter):
                obj.grad += vjp(g)
            elif isinstance(obj, Tensor):
                key = id(obj)
                contrib = vjp(g)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                    leaves[key] = obj
            # raw ndarray operands are constants; no gradient is kept
    return {leaves[k]: v for k, v in grads.items() if k in leaves}


def grad_check(loss_fn, params, rng, samples: int = 64, h: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must rebuild the forward pass from scratch on every call
    (it is re-evaluated under a frozen tape for the difference quotients).
    Returns the max relative error over ``samples`` randomly chosen
    coordinates spread across ``params``.
    """
    params = list(params)
    if not params:
        raise ContractError("grad_check needs at least one parameter")
    for p in params:
        p.zero_grad()
    with record():
        loss = loss_fn()
    backward(loss)
    analytic = {p.id: p.grad.copy() for p in params}

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    n_probe = min(samples, total)
    flat_choice = rng.choice(total, size=n_probe, replace=False)

    worst = 0.0
    bounds = np.cumsum(sizes)
    for flat in flat_choice:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        orig = p.value.flat[local]
        p.value.flat[local] = orig + h
        with frozen():
            hi = loss_fn().item()
        p.value.flat[local] = orig - h
        with frozen():
            lo = loss_fn().item()
        p.value.flat[local] = orig
        numeric = (hi - lo) / (2.0 * h)
        a = analytic[p.id].flat[local]
        rel = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, rel)
    for p in params:
        p.zero_grad()
    return worst
