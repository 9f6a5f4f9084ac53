"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function taking and returning :class:`Tensor`. When a
:class:`Tape` is active (``with Tape() as tape:``) and any input requires a
gradient, the op appends a node holding a closure that maps the output
gradient to input gradients. :func:`backward` replays the tape in reverse.

Broadcasting is refused except for the bias pattern: the second operand of
:func:`add` / :func:`mul` may match the *trailing* dimensions of the first.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Tape",
    "backward",
    "finite_difference_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """An op precondition was violated."""


class Tensor:
    """Immutable float64 array, optionally tracked for gradients.

    Parameters are the only tensors whose storage is replaced after
    construction, and only through :meth:`assign` (the optimizer's single-writer
    path).
    """

    __slots__ = ("_data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else _not_scalar(self)

    def assign(self, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        if value.shape != self.shape:
            raise ShapeError(f"cannot assign {value.shape} into {self.shape}")
        value.flags.writeable = False
        self._data = value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


class Tape:
    """Append-only record of differentiable ops.

    ``nodes`` holds ``(output, inputs, vjp)`` triples in execution order, which
    is a topological order, so reverse iteration visits each node once after
    all of its consumers.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.gradients.get(id(t))
        return np.zeros(t.shape) if g is None else g


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data, dtype=np.float64)
    out_data.flags.writeable = False
    out._data = out_data
    out.grad = None
    out.name = None
    tracked = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out.requires_grad = tracked
    if tracked:
        _ACTIVE[-1].nodes.append((out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Populate ``tape.gradients`` (keyed by ``id``) from a scalar ``loss``.

    If ``params`` is given, each gets ``.grad`` set, zeros for parameters the
    loss does not depend on.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.gradients = grads
    if params is not None:
        for p in params:
            g = grads.get(id(p))
            p.grad = np.zeros(p.shape) if g is None else np.asarray(g).reshape(p.shape)
    return grads


# ---------------------------------------------------------------------------
# Elementwise and bias-pattern binary ops
# ---------------------------------------------------------------------------

def _check_bias_pattern(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and not a trailing bias pattern")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data + c, (a,), lambda g: (g,))
    _check_bias_pattern(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    _check_bias_pattern(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _record(softplus_np(x), (a,), lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return _record(np.array(a.data[key]), (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    n = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis))
    reduced = out.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), src).copy(),)
        return (np.broadcast_to(np.expand_dims(g.reshape(reduced), axis), src).copy(),)

    return _record(out.reshape(1) if out.ndim == 0 else out, (a,), vjp)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (any leading dims)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = x.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, vjp)


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum without repeated indices inside one operand."""
    lhs, out_sub = spec.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"einsum: {spec!r} expects {len(in_subs)} operands, got {len(operands)}")
    sizes: dict[str, int] = {}
    for sub_, t in zip(in_subs, operands):
        if len(sub_) != t.ndim or len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum: subscripts {sub_!r} do not fit shape {t.shape}")
        for ch, n in zip(sub_, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum: index {ch!r} has sizes {sizes[ch]} and {n}")
    datas = [t.data for t in operands]
    out = np.einsum(spec, *datas, optimize=True)

    def vjp(g):
        grads = []
        for i, sub_ in enumerate(in_subs):
            others = [s for j, s in enumerate(in_subs) if j != i]
            odata = [d for j, d in enumerate(datas) if j != i]
            # indices summed away by this operand alone get a broadcast gradient
            keep = "".join(ch for ch in sub_ if ch in out_sub or any(ch in s for s in others))
            gi = np.einsum(",".join([out_sub] + others) + "->" + keep, g, *odata, optimize=True)
            if keep != sub_:
                gi = gi.reshape([sizes[ch] if ch in keep else 1 for ch in sub_])
                gi = np.broadcast_to(gi, [sizes[ch] for ch in sub_]).copy()
            grads.append(gi)
        return tuple(grads)

    return _record(out, operands, vjp)


# ---------------------------------------------------------------------------
# Fused model primitives
# ---------------------------------------------------------------------------

def depthwise_conv1d(x: Tensor, kernel: Tensor, pad: int = 3) -> Tensor:
    """Per-channel cross-correlation of ``x`` (b, d, n) with ``kernel`` (d, w).

    ``pad`` zeros go on both sides and the result is trimmed to the first ``n``
    positions, so with ``pad = w - 1`` output ``t`` sees inputs ``t-w+1 .. t``.
    """
    if x.ndim != 3:
        raise ShapeError(f"depthwise_conv1d: expected (b, d, n) input, got {x.shape}")
    b, d, n = x.shape
    if kernel.shape[0] != d or kernel.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: kernel {kernel.shape} does not match {d} channels")
    w = kernel.shape[1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    kd = kernel.data
    # window j of the padded input for output positions 0..n-1
    windows = np.stack([xp[:, :, j:j + n] for j in range(w)], axis=-1)  # b, d, n, w
    out = np.einsum("bdnw,dw->bdn", windows, kd)

    def vjp(g):
        gk = np.einsum("bdnw,bdn->dw", windows, g)
        gxp = np.zeros_like(xp)
        for j in range(w):
            gxp[:, :, j:j + n] += g * kd[None, :, j, None]
        return gxp[:, :, pad:pad + n], gk

    return _record(out, (x, kernel), vjp)


def rmsnorm(z: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """``z / sqrt(mean(z**2, -1) + eps) * weight`` over the last axis."""
    if weight.shape != (z.shape[-1],):
        raise ShapeError(f"rmsnorm: weight {weight.shape} does not match feature dim of {z.shape}")
    zd, wd = z.data, weight.data
    h = zd.shape[-1]
    r = 1.0 / np.sqrt(np.mean(zd * zd, axis=-1, keepdims=True) + eps)
    zn = zd * r
    out = zn * wd

    def vjp(g):
        gn = g * wd
        gz = r * (gn - zn * np.sum(gn * zn, axis=-1, keepdims=True) / h)
        gw = np.sum((g * zn).reshape(-1, h), axis=0)
        return gz, gw

    return _record(out, (z, weight), vjp)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """``v / max(||v||_2, eps)`` along the last axis."""
    vd = v.data
    norm = np.sqrt(np.sum(vd * vd, axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = vd / denom

    def vjp(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / eps),)

    return _record(out, (v,), vjp)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential selective state-space recurrence.

    Shapes: ``u, delta`` (b, n, d); ``A`` (d, s); ``B, C`` (b, n, s); ``D`` (d,).
    With ``x_0 = 0``::

        x_t = exp(delta_t * A) * x_{t-1} + (delta_t * u_t) * B_t
        y_t = sum_s(x_t * C_t) + D * u_t

    where ``B_t`` and ``C_t`` are shared by all ``d`` channels.
    """
    b, n, d = u.shape
    s = A.shape[1]
    if delta.shape != u.shape or A.shape != (d, s) or B.shape != (b, n, s) or C.shape != (b, n, s) or D.shape != (d,):
        raise ShapeError(
            f"selective_scan: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )
    dd, ud, Ad, Bd, Cd, Dd = delta.data, u.data, A.data, B.data, C.data, D.data
    if not np.all(dd > 0):
        raise ContractError("selective_scan: delta must be strictly positive")
    dA = np.exp(dd[..., None] * Ad)  # b n d s
    du = dd * ud  # b n d
    xs = np.empty((b, n, d, s))
    x = np.zeros((b, d, s))
    for t in range(n):
        x = dA[:, t] * x + du[:, t, :, None] * Bd[:, t, None, :]
        xs[:, t] = x
    y = np.einsum("bnds,bns->bnd", xs, Cd) + ud * Dd

    def vjp(gy):
        gD = np.sum((gy * ud).reshape(-1, d), axis=0)
        gC = np.einsum("bnd,bnds->bns", gy, xs)
        gxs = np.empty_like(xs)
        gx = np.zeros((b, d, s))
        for t in range(n - 1, -1, -1):
            gx = gy[:, t, :, None] * Cd[:, t, None, :] + gx
            gxs[:, t] = gx
            gx = gx * dA[:, t]
        xprev = np.concatenate([np.zeros((b, 1, d, s)), xs[:, :-1]], axis=1)
        g_dA = gxs * xprev * dA  # gradient w.r.t. (delta*A) inside the exp
        g_delta = np.einsum("bnds,ds->bnd", g_dA, Ad)
        gA = np.einsum("bnds,bnd->ds", g_dA, dd)
        g_du = np.einsum("bnds,bns->bnd", gxs, Bd)
        gB = np.einsum("bnds,bnd->bns", gxs, du)
        g_delta = g_delta + g_du * ud
        gu = g_du * dd + gy * Dd
        return gu, g_delta, gA, gB, gC, gD

    return _record(y, (u, delta, A, B, C, D), vjp)


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Mean softmax cross-entropy against targets ``1-s`` (true) and ``s/(K-1)``."""
    z = logits.data
    bsz, k = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bsz,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {bsz} integers in [0, {k}), got {labels!r}")
    target = np.full((bsz, k), smoothing / (k - 1))
    target[np.arange(bsz), labels] = 1.0 - smoothing
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))
    loss = -np.sum(target * logp) / bsz
    p = np.exp(logp)

    def vjp(g):
        return (g.reshape(()) * (p - target) / bsz,)

    return _record(np.array([loss]), (logits,), vjp)


def scaled_laplacian(A: Tensor, lam_fallback: float = 2.0) -> Tensor:
    """Rescaled symmetric-normalized Laplacian ``2L/lambda_max - I``.

    ``L = I - D^-1/2 A D^-1/2`` with isolated nodes (zero degree) given unit
    degree. ``lambda_max`` is the top eigenvalue of ``L`` from a dense
    symmetric eigensolver; an edgeless graph uses ``lam_fallback``.
    Differentiable in ``A`` (first-order eigenvalue perturbation for
    ``lambda_max``).
    """
    a = A.data
    c = a.shape[0]
    if A.ndim != 2 or a.shape[1] != c:
        raise ShapeError(f"scaled_laplacian: expected square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise ContractError("scaled_laplacian: adjacency must be symmetric")
    deg = a.sum(axis=1)
    iso = deg <= 1e-12
    s = np.where(iso, 1.0, 1.0 / np.sqrt(np.where(iso, 1.0, deg)))
    N = s[:, None] * a * s[None, :]
    L = np.eye(c) - N
    if not np.any(a != 0):
        lam, v = lam_fallback, None
    else:
        w, vecs = np.linalg.eigh(L)
        lam, v = float(w[-1]), vecs[:, -1]
    out = 2.0 * L / lam - np.eye(c)

    def vjp(g):
        gL = 2.0 * g / lam
        if v is not None:
            gL = gL - (2.0 / lam**2) * np.sum(g * L) * np.outer(v, v)
        gN = -gL
        gA = s[:, None] * gN * s[None, :]
        gs = (gN * a) @ s + (gN * a).T @ s
        gdeg = np.where(iso, 0.0, -0.5 * np.where(iso, 1.0, deg) ** -1.5 * gs)
        gA = gA + gdeg[:, None]
        return (gA,)

    return _record(out, (A,), vjp)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5,
                           coords: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``param``.

    ``param`` is perturbed in place via :meth:`Tensor.assign` and restored.
    Entries outside ``coords`` (when given) are left as NaN.
    """
    base = param.data.copy()
    out = np.full(param.shape, np.nan) if coords is not None else np.zeros(param.shape)
    it = coords if coords is not None else np.ndindex(*param.shape)
    try:
        for idx in it:
            plus = base.copy()
            plus[idx] += h
            param.assign(plus)
            fp = fn()
            minus = base.copy()
            minus[idx] -= h
            param.assign(minus)
            fm = fn()
            out[idx] = (fp - fm) / (2.0 * h)
    finally:
        param.assign(base)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both are below ``floor``."""
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], numeric[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
