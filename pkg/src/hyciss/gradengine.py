"""Minimal reverse-mode tape over numpy arrays.

Scope is exactly the operations this package trains with: dense affine and
3x3 convolution, pointwise nonlinearities, reductions, masked group min/max,
log-softmax, and the Poincare-ball operations whose analytic backward rules
live in :mod:`hyciss.geometry`.

Usage::

    tape = Tape()
    with tape:
        loss = ...            # compose ops on Tensors
    tape.backward(loss)       # accumulates into leaf .grad buffers

Ops accept Tensors or plain arrays; plain arrays are constants and receive
no gradient. A Tensor created while no tape is active records nothing, which
is how frozen models run their forward passes.
"""

from __future__ import annotations

import numpy as np

from . import geometry
from .errors import NonFiniteError, ShapeMismatchError

_TAPES: list["Tape"] = []


class Tensor:
    """Array value plus an optional gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


class Tape:
    """Append-only record of operations; nodes are topologically ordered by
    construction, so one reversed sweep visits each node exactly once."""

    def __init__(self):
        self.nodes = []  # (out Tensor, parent Tensors, vjp: g -> grads)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _current_tape():
    return _TAPES[-1] if _TAPES else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every participating leaf's .grad.

    Leaves that do not influence the loss are left untouched (a zeroed
    accumulator therefore reads as an exact-zero gradient).
    """
    if loss.value.size != 1:
        raise ShapeMismatchError("backward expects a scalar loss")
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("loss is not finite")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.value)}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(out, None)
        if g is None:
            continue
        partials = vjp(g)
        for p, pg in zip(parents, partials):
            if pg is None:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError("non-finite intermediate gradient")
            acc = grads.get(p)
            grads[p] = pg if acc is None else acc + pg
    for t, g in grads.items():
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g


class ParamStore:
    """Named trainable tensors with paired gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = parameter(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.value)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}


# -- op plumbing ---------------------------------------------------------------


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _op(value, operands, partial_fns) -> Tensor:
    """Wrap an op result; partial_fns align with operands, None for constants."""
    tape = _current_tape()
    parents = tuple(o for o in operands if isinstance(o, Tensor))
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value)
    fns = tuple(f for o, f in zip(operands, partial_fns) if isinstance(o, Tensor))
    out = Tensor(value, requires_grad=True)

    def vjp(g):
        return tuple(f(g) for f in fns)

    tape.nodes.append((out, parents, vjp))
    return out


def _op_joint(value, operands, joint_vjp) -> Tensor:
    """Like _op but with one callable returning grads for all operands."""
    tape = _current_tape()
    parents = tuple(o for o in operands if isinstance(o, Tensor))
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value)
    keep = tuple(isinstance(o, Tensor) for o in operands)
    out = Tensor(value, requires_grad=True)

    def vjp(g):
        all_grads = joint_vjp(g)
        return tuple(pg for pg, k in zip(all_grads, keep) if k)

    tape.nodes.append((out, parents, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _op(
        av + bv,
        (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
    )


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _op(
        av - bv,
        (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)),
    )


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _op(
        av * bv,
        (a, b),
        (
            lambda g: _unbroadcast(g * bv, av.shape),
            lambda g: _unbroadcast(g * av, bv.shape),
        ),
    )


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _op(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / bv, av.shape),
            lambda g: _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def neg(a) -> Tensor:
    av = _val(a)
    return _op(-av, (a,), (lambda g: -g,))


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeMismatchError("matmul expects 2-D operands")
    return _op(
        av @ bv,
        (a, b),
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _op(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


# -- pointwise -----------------------------------------------------------------


def tanh(a) -> Tensor:
    y = np.tanh(_val(a))
    return _op(y, (a,), (lambda g: g * (1.0 - y * y),))


def exp(a) -> Tensor:
    y = np.exp(_val(a))
    return _op(y, (a,), (lambda g: g * y,))


def log(a) -> Tensor:
    av = _val(a)
    return _op(np.log(av), (a,), (lambda g: g / av,))


SCORE_EPS = 1e-12  # keeps sigmoid outputs in the open interval (0, 1)


def sigmoid(a) -> Tensor:
    av = _val(a)
    e = np.exp(-np.abs(av))
    y = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    y = np.clip(y, SCORE_EPS, 1.0 - SCORE_EPS)
    return _op(y, (a,), (lambda g: g * y * (1.0 - y),))


def clip(a, lo: float, hi: float) -> Tensor:
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _op(np.clip(av, lo, hi), (a,), (lambda g: g * inside,))


# -- reductions ----------------------------------------------------------------


def total(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _op(av.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    if axis is None:
        count = av.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([av.shape[i] for i in axes]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, av.shape).copy()

    return _op(av.mean(axis=axis, keepdims=keepdims), (a,), (vjp,))


# -- gather / scatter ----------------------------------------------------------


def gather(a, idx: np.ndarray) -> Tensor:
    """Select channels of the last axis; backward scatter-adds into place."""
    av = _val(a)
    idx = np.asarray(idx, dtype=np.intp)
    unique = np.unique(idx).size == idx.size

    def vjp(g):
        out = np.zeros_like(av)
        if unique:
            out[..., idx] = g
        else:
            flat = out.reshape(-1, av.shape[-1])
            rows = np.repeat(np.arange(flat.shape[0]), idx.size)
            np.add.at(flat, (rows, np.tile(idx, flat.shape[0])), g.reshape(-1))
        return out

    return _op(av[..., idx], (a,), (vjp,))


def select_rows(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """y[i] = a[rows[i], cols[i]] for a 2-D operand."""
    av = _val(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, (rows, cols), g)
        return out

    return _op(av[rows, cols], (a,), (vjp,))


def tree_reduce_values(av: np.ndarray, plan: np.ndarray, minimize: bool):
    """Run a fold plan over the channel axis.

    Each (dst, src) plan row merges channel src's running extremum into dst;
    ties keep the lower achieving channel. Returns (reduced values, achieving
    channel per output element).
    """
    red = np.array(av, dtype=np.float64)
    chan = np.broadcast_to(np.arange(av.shape[-1]), av.shape).copy()
    for dst, src in plan:
        dv, sv = red[..., dst], red[..., src]
        dc, sc = chan[..., dst], chan[..., src]
        if minimize:
            better = (sv < dv) | ((sv == dv) & (sc < dc))
        else:
            better = (sv > dv) | ((sv == dv) & (sc < dc))
        red[..., dst] = np.where(better, sv, dv)
        chan[..., dst] = np.where(better, sc, dc)
    return red, chan


def _tree_reduce(a, plan, minimize) -> Tensor:
    av = _val(a)
    red, chan = tree_reduce_values(av, plan, minimize)

    def vjp(g):
        nc = av.shape[-1]
        rows = np.arange(g.size // nc)[:, None]
        flat_idx = (rows * nc + chan.reshape(-1, nc)).ravel()
        out = np.bincount(flat_idx, weights=g.ravel(), minlength=av.size)
        return out.reshape(av.shape)

    return _op(red, (a,), (vjp,))


def tree_min(a, plan: np.ndarray) -> Tensor:
    """Running minimum along a taxonomy fold plan (ancestor-min); the
    subgradient goes to the achieving channel, lowest channel on ties."""
    return _tree_reduce(a, plan, minimize=True)


def tree_max(a, plan: np.ndarray) -> Tensor:
    """Running maximum along a taxonomy fold plan (descendant-max)."""
    return _tree_reduce(a, plan, minimize=False)


def log_softmax(a, axis: int = -1) -> Tensor:
    av = _val(a)
    m = av.max(axis=axis, keepdims=True)
    shifted = av - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def vjp(g):
        return g - np.exp(y) * g.sum(axis=axis, keepdims=True)

    return _op(y, (a,), (vjp,))


# -- convolution ---------------------------------------------------------------


def conv3x3(x, w, b) -> Tensor:
    """Stride-1, same-padding 3x3 convolution on NHWC input.

    w has shape [3, 3, c_in, c_out]; b has shape [c_out]. Implemented as nine
    shifted GEMMs, which avoids materializing an im2col buffer.
    """
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.ndim != 4:
        raise ShapeMismatchError(f"conv3x3 expects NHWC input, got shape {xv.shape}")
    if wv.shape[:2] != (3, 3) or wv.shape[2] != xv.shape[3]:
        raise ShapeMismatchError(f"kernel {wv.shape} does not match input {xv.shape}")
    n, h, wd, cin = xv.shape
    cout = wv.shape[3]
    cols = _im2col(xv)
    wmat = wv.reshape(9 * cin, cout)
    out = (cols @ wmat + bv).reshape(n, h, wd, cout)

    def vjp_x(g):
        # gradient w.r.t. the input is the convolution of g with the
        # spatially flipped, channel-transposed kernel
        wflip = wv[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
        return (_im2col(g) @ wflip).reshape(n, h, wd, cin)

    def vjp_w(g):
        return (cols.T @ g.reshape(-1, cout)).reshape(3, 3, cin, cout)

    def vjp_b(g):
        return g.reshape(-1, cout).sum(axis=0)

    return _op(out, (x, w, b), (vjp_x, vjp_w, vjp_b))


def _im2col(xv: np.ndarray) -> np.ndarray:
    """[N,H,W,C] -> [N*H*W, 9*C] patch matrix for a same-padded 3x3 window."""
    n, h, wd, cin = xv.shape
    xp = np.pad(xv, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * cin)


# -- Poincare-ball ops (analytic rules from hyciss.geometry) ---------------------


def expmap0(v, c: float) -> Tensor:
    vv = _val(v)
    return _op(
        geometry.expmap0(vv, c),
        (v,),
        (lambda g: geometry.expmap0_vjp(g, vv, c),),
    )


def logmap0(x, c: float) -> Tensor:
    xv = _val(x)
    return _op(
        geometry.logmap0(xv, c),
        (x,),
        (lambda g: geometry.logmap0_vjp(g, xv, c),),
    )


def project(x, c: float) -> Tensor:
    xv = _val(x)
    return _op(
        geometry.project(xv, c),
        (x,),
        (lambda g: geometry.project_vjp(g, xv, c),),
    )


def mobius_add(x, y, c: float) -> Tensor:
    xv, yv = _val(x), _val(y)

    def joint(g):
        gx, gy = geometry.mobius_add_vjp(g, xv, yv, c)
        return _unbroadcast(gx, xv.shape), _unbroadcast(gy, yv.shape)

    return _op_joint(geometry.mobius_add(xv, yv, c), (x, y), joint)


def hyperplane_logit(x, offset, orientation, c: float) -> Tensor:
    xv, ov, rv = _val(x), _val(offset), _val(orientation)

    def joint(g):
        gx, go, gr = geometry.hyperplane_logit_vjp(g, xv, ov, rv, c)
        return (
            _unbroadcast(gx, xv.shape),
            _unbroadcast(go, ov.shape),
            _unbroadcast(gr, rv.shape),
        )

    return _op_joint(
        geometry.hyperplane_logit(xv, ov, rv, c), (x, offset, orientation), joint
    )


def batched_logits(x, offsets, orientations, c: float) -> Tensor:
    """Fused per-point, per-node hyperplane logits: [P,N] x [V,N] -> [P,V]."""
    xv, ov, rv = _val(x), _val(offsets), _val(orientations)
    tables = geometry._gyroplane_tables(xv, ov, rv, c)

    def joint(g):
        return geometry.batched_logits_vjp(g, xv, ov, rv, c, tables=tables)

    return _op_joint(
        geometry.batched_logits(xv, ov, rv, c, tables=tables),
        (x, offsets, orientations),
        joint,
    )
