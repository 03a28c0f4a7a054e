"""Dense float64 tensors with a dynamically recorded reverse-mode graph.

Every op takes ``Tensor`` inputs, computes its forward value eagerly with
numpy and, when any input requires a gradient, records a closure mapping the
output gradient to input gradients.  ``backward`` walks the recorded graph in
reverse topological order and accumulates into ``Parameter.grad``.

Broadcasting is deliberately limited to scalar operands and row-bias addition;
anything else must match exactly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """n-dimensional float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        self.data = np.array(data, dtype=DTYPE) if copy else np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, copy=False)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dP into ``grad`` of every reachable Parameter.

    The graph is kept alive for as long as ``loss`` is referenced, so calling
    this twice accumulates twice.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    if _is_scalar(like):
        return np.asarray(g.sum()).reshape(like.shape)
    # row bias: like is (D,), g is (..., D)
    return g.reshape(-1, like.shape[0]).sum(axis=0)


def _check_broadcast(a: Tensor, b: Tensor, op: str, allow_bias: bool) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    if allow_bias and b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add", allow_bias=True)
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub", allow_bias=True)
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), -_reduce_to(g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; either operand may be a single-element scalar."""
    _check_broadcast(a, b, "mul", allow_bias=False)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + float(c), (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _softplus_grad(x: np.ndarray) -> np.ndarray:
    return _sigmoid(x)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    ad = a.data
    # derivative at exactly 0 is the slope
    d = np.where(ad > 0, 1.0, slope)
    return _result(ad * d, (a,), lambda g: (g * d,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.logaddexp(0.0, ad), (a,), lambda g: (g * _softplus_grad(ad),))


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


def activation(a: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    try:
        return ACTIVATIONS[kind](a)
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def take(a: Tensor, index: int) -> Tensor:
    """Single element of a 1-D tensor as a scalar tensor."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _result(np.asarray(a.data[index]), (a,), bw)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"columns expects a matrix, got {a.shape}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _result(a.data[:, start:stop].copy(), (a,), bw)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_columns: shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand ``np.einsum``.  Every index of an operand must also occur in
    the other operand or the output, so each gradient is again an einsum."""
    try:
        ins, out_sub = subscripts.replace(" ", "").split("->")
        sa, sb = ins.split(",")
    except ValueError:
        raise DimensionError(f"einsum: need 'ab,bc->ac' style subscripts, got {subscripts!r}") from None
    for sx, sy in ((sa, sb), (sb, sa)):
        if len(set(sx)) != len(sx) or not set(sx) <= set(sy) | set(out_sub):
            raise DimensionError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts!r}: {a.shape} and {b.shape}: {exc}") from None
    ad, bd = a.data, b.data

    def bw(g):
        return (
            np.einsum(f"{out_sub},{sb}->{sa}", g, bd),
            np.einsum(f"{out_sub},{sa}->{sb}", g, ad),
        )

    return _result(out, (a, b), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis (rows of a matrix, or of every stacked matrix)."""
    if a.data.ndim < 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` (N x D) to zero mean, unit variance."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution and pooling on C x H x W maps


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of a C x H x W map with O x C x kh x kw kernels."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(
            f"conv2d: input has {c} channels but kernels {kernels.shape} expect {kc}"
        )
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {o} output channels")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape}")

    if kh == 1 and kw == 1:
        cols = xp.reshape(c, ho * wo).T
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    wm = kernels.data.reshape(o, -1)
    out = (cols @ wm.T + bias.data).T.reshape(o, ho, wo)

    def bw(g):
        g2 = g.reshape(o, ho * wo)
        dk = (g2 @ cols).reshape(kernels.shape)
        db = g2.sum(axis=1)
        dcols = g2.T @ wm
        if kh == 1 and kw == 1:
            dxp = dcols.T.reshape(c, ho, wo)
        else:
            dc = dcols.reshape(ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + ho, j:j + wo] += dc[:, :, :, i, j].transpose(2, 0, 1)
        dx = dxp[:, p:p + h, p:p + w] if p else dxp
        return dx, dk, db

    return _result(out, (x, kernels, bias), bw)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; odd sizes are rounded up (ceil mode)."""
    c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xd = x.data
    if (h % 2) or (w % 2):
        xd = np.pad(xd, ((0, 0), (0, 2 * ho - h), (0, 2 * wo - w)), constant_values=-np.inf)
    blocks = xd.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def bw(g):
        gb = np.zeros((c, ho, wo, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=3)
        full = gb.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        return (full[:, :h, :w],)

    return _result(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    n = h * w
    return _result(
        x.data.mean(axis=(1, 2)).reshape(c, 1, 1),
        (x,),
        lambda g: (np.broadcast_to(g / n, (c, h, w)).copy(),),
    )


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    worst: str = ""
    message: str = ""
    failures: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} max_rel_error={self.max_rel_error:.3e} over {self.n_checked} entries"
        if self.worst:
            text += f" (worst: {self.worst})"
        if self.message:
            text += f" - {self.message}"
        return text


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-8,
    small: float = 1e-6,
    fraction: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` must rebuild the graph from the current parameter values on each
    call.  Entries whose analytic gradient is below ``small`` in magnitude are
    judged by absolute error against ``abs_tol`` instead.  ``fraction`` < 1
    checks a random subsample of entries (at least one per parameter).
    """
    params = list(params)
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        return GradCheckReport(False, float("inf"), 0, message="loss is not finite")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)

    max_rel = 0.0
    worst = ""
    failures = []
    n = 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if fraction < 1.0:
            if rng is None:
                rng = np.random.default_rng(0)
            k = max(1, int(round(fraction * flat.size)))
            idxs = np.sort(rng.choice(flat.size, size=k, replace=False))
        gflat = ga.reshape(-1)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(
                    False, float("inf"), n, f"{p.name}[{i}]", "non-finite loss under perturbation"
                )
            num = (fp - fm) / (2.0 * eps)
            a = gflat[i]
            n += 1
            err = abs(a - num)
            if abs(a) < small:
                ok = err < abs_tol
                rel = 0.0 if ok else err / max(abs(a), abs(num), 1e-300)
            else:
                rel = err / max(abs(a), abs(num))
                ok = rel < rel_tol
            if rel > max_rel:
                max_rel = rel
                worst = f"{p.name}[{i}] analytic={a:.6e} numeric={num:.6e}"
            if not ok:
                failures.append((p.name, int(i), float(a), float(num)))
    return GradCheckReport(not failures, max_rel, n, worst, failures=failures)
