"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records an entry on the active tape during the forward
pass; ``backward`` replays the tape in exact reverse execution order, so
gradient accumulation order is deterministic and fixed seeds give
bitwise-identical runs. Shapes are plain numpy shapes; primitives accept
the ranks they document and raise :class:`ShapeError` otherwise.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

# epsilon added under the square root of pairwise distances so the
# gradient is defined at coincident points (hard-mined zero-distance pairs)
DISTANCE_EPS = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A forward or finite-difference evaluation produced NaN/Inf."""


class _TapeEntry:
    """One executed primitive: output, inputs, and its local backward rule."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Execution-ordered record of primitives for one unit of work.

    Use as a context manager to scope recording (the trainer opens a fresh
    tape per batch so memory stays bounded). A tape and its tensors belong
    to one thread; independent tapes may run concurrently.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().stack.pop()
        return False


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.grad_enabled = True


_STATE = _ThreadState()


def _state() -> _ThreadState:
    return _STATE


def active_tape() -> Tape:
    st = _state()
    return st.stack[-1] if st.stack else st.default


class no_grad:
    """Context manager disabling tape recording (forward-only evaluation)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array, optionally participating in differentiation.

    ``grad`` is lazily allocated by ``backward`` and accumulates across
    calls; it always matches ``data`` in shape when present.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from the tape: gradients stop here."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar over the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    def __rmul__(self, c):
        return scale(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def relu(self):
        return relu(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _state().grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_tape().entries.append(_TapeEntry(out, inputs, backward_fn))
    return out


def _as2d(x: Tensor, op: str) -> np.ndarray:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-d tensor, got shape {x.data.shape}")
    return x.data


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m*k and a k*n tensor."""
    ad, bd = _as2d(a, "matmul"), _as2d(b, "matmul")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {ad.shape} x {bd.shape}")
    out = Tensor(ad @ bd)

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    ad = _as2d(a, "transpose")
    out = Tensor(ad.T.copy())

    def bw(g):
        return (g.T,)

    return _record(out, (a,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1*n row added to every row of m*n."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        out = Tensor(ad + bd)

        def bw(g):
            return g, g

    elif ad.ndim == 2 and bd.shape == (1, ad.shape[1]):
        out = Tensor(ad + bd)

        def bw(g):
            return g, g.sum(axis=0, keepdims=True)

    else:
        raise ShapeError(f"add shapes disagree: {ad.shape} vs {bd.shape}")
    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data)

    def bw(g):
        return g, -g

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g):
        return (g * c,)

    return _record(out, (a,), bw)


def shift(a: Tensor, c: float) -> Tensor:
    """Add the constant ``c`` to every entry."""
    out = Tensor(a.data + float(c))

    def bw(g):
        return (g,)

    return _record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))

    def bw(g):
        return (g * mask,)

    return _record(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)

    def bw(g):
        return (2.0 * a.data * g,)

    return _record(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bw(g):
        return (np.full_like(a.data, float(g)),)

    return _record(out, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.sum() / n)

    def bw(g):
        return (np.full_like(a.data, float(g) / n),)

    return _record(out, (a,), bw)


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    out = Tensor(np.sum(a.data * a.data))

    def bw(g):
        return (2.0 * float(g) * a.data,)

    return _record(out, (a,), bw)


def mean_row_groups(a: Tensor, group: int) -> Tensor:
    """Average consecutive blocks of ``group`` rows: (G*group, n) -> (G, n)."""
    ad = _as2d(a, "mean_row_groups")
    m, n = ad.shape
    if group < 1 or m % group != 0:
        raise ShapeError(f"mean_row_groups: {m} rows not divisible into groups of {group}")
    out = Tensor(ad.reshape(m // group, group, n).mean(axis=1))

    def bw(g):
        return (np.repeat(g / group, group, axis=0),)

    return _record(out, (a,), bw)


def mean_rows(a: Tensor) -> Tensor:
    """Average all rows together: (m, n) -> (1, n)."""
    return mean_row_groups(a, a.data.shape[0])


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack 2-d tensors with equal column counts along rows."""
    if not parts:
        raise ShapeError("concat_rows of an empty list")
    datas = [_as2d(p, "concat_rows") for p in parts]
    ncols = datas[0].shape[1]
    if any(d.shape[1] != ncols for d in datas):
        raise ShapeError(f"concat_rows column counts disagree: {[d.shape for d in datas]}")
    out = Tensor(np.concatenate(datas, axis=0))
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def bw(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(datas)))

    return _record(out, tuple(parts), bw)


def gather(a: Tensor, rows, cols) -> Tensor:
    """Pick entries (rows[i], cols[i]) of a matrix into a 1-d tensor."""
    ad = _as2d(a, "gather")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError(f"gather index shapes disagree: {rows.shape} vs {cols.shape}")
    out = Tensor(ad[rows, cols])

    def bw(g):
        ga = np.zeros_like(ad)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    ad = _as2d(a, "softmax_rows")
    z = ad - ad.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        # full Jacobian-vector product: y * (g - <g, y> per row)
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax (numerically stable); exact backward rule."""
    ad = _as2d(a, "log_softmax_rows")
    z = ad - ad.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(z - lse)
    sm = np.exp(z - lse)

    def bw(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return _record(out, (a,), bw)


def pairwise_euclidean(x: Tensor, y: Tensor) -> Tensor:
    """Matrix of Euclidean distances between rows of x (m*d) and y (n*d).

    Entry (i, j) is sqrt(max(|x_i|^2 + |y_j|^2 - 2 x_i.y_j, 0) + eps); the
    epsilon keeps the gradient finite for coincident pairs.
    """
    xd, yd = _as2d(x, "pairwise_euclidean"), _as2d(y, "pairwise_euclidean")
    if xd.shape[1] != yd.shape[1]:
        raise ShapeError(
            f"pairwise_euclidean feature dims disagree: {xd.shape} vs {yd.shape}"
        )
    sq = (
        (xd * xd).sum(axis=1)[:, None]
        + (yd * yd).sum(axis=1)[None, :]
        - 2.0 * (xd @ yd.T)
    )
    active = sq > 0
    d = np.sqrt(np.where(active, sq, 0.0) + DISTANCE_EPS)
    out = Tensor(d)

    def bw(g):
        w = np.where(active, g / d, 0.0)
        gx = w.sum(axis=1)[:, None] * xd - w @ yd
        gy = w.sum(axis=0)[:, None] * yd - w.T @ xd
        return gx, gy

    return _record(out, (x, y), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor the loss depends on.

    Replays the active tape in reverse execution order; gradient flow is
    restricted to ancestors of ``loss``. Leaf grads accumulate across
    calls, so backward of a sum equals the sum of backwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(active_tape().entries):
        g_out = flow.get(id(entry.out))
        if g_out is None:
            continue
        grads = entry.backward(g_out)
        for inp, g_in in zip(entry.inputs, grads):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in flow:
                flow[key] = flow[key] + g_in
            else:
                flow[key] = g_in
                holders[key] = inp
    for key, t in holders.items():
        g = flow[key].reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-central-difference comparison."""

    max_rel_err: float
    tol: float
    passed: bool = field(init=False)
    worst_index: tuple[int, ...] = ()

    def __post_init__(self):
        self.passed = self.max_rel_err <= self.tol


def finite_differences(f, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x0, coordinate by coordinate."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    base = x0.copy()
    for i in range(x0.size):
        idx = np.unravel_index(i, x0.shape)
        orig = base[idx]
        base[idx] = orig + step
        fp = _eval_scalar(f, base, idx)
        base[idx] = orig - step
        fm = _eval_scalar(f, base, idx)
        base[idx] = orig
        flat[i] = (fp - fm) / (2.0 * step)
    return grad


def _eval_scalar(f, x: np.ndarray, idx) -> float:
    with Tape(), no_grad():
        v = f(Tensor(x.copy())).item()
    if not np.isfinite(v):
        raise NonFiniteError(f"non-finite evaluation while perturbing coordinate {idx}")
    return v


def _compare(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> GradCheckReport:
    # relative where the reference gradient is large, absolute where it
    # vanishes (central differences of a zero gradient still carry noise)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradCheckReport(max_rel_err=float(err.max()) if err.size else 0.0,
                           tol=tol, worst_index=tuple(int(i) for i in worst))


def grad_check(f, x0: Tensor, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` against central
    finite differences at ``x0``."""
    with Tape():
        x = Tensor(x0.data.copy(), requires_grad=True)
        loss = f(x)
        if not np.isfinite(loss.item()):
            raise NonFiniteError("non-finite loss at the expansion point")
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = finite_differences(f, x0.data, step=step)
    return _compare(analytic, numeric, tol)


def grad_check_params(
    loss_fn,
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> dict[str, GradCheckReport]:
    """Finite-difference check of ``loss_fn()`` against every named parameter.

    One backward pass supplies all analytic gradients; numeric gradients
    come from perturbing each parameter coordinate in place and re-running
    the forward pass. The parameters are restored exactly afterwards.
    """
    with Tape():
        for p in params.values():
            p.zero_grad()
        loss = loss_fn()
        if not np.isfinite(loss.item()):
            raise NonFiniteError("non-finite loss at the expansion point")
        backward(loss)
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
        for p in params.values():
            p.zero_grad()

    def eval_loss(idx) -> float:
        with Tape(), no_grad():
            v = loss_fn().item()
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite evaluation while perturbing coordinate {idx}")
        return v

    reports = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat_n = numeric.reshape(-1)
        for i in range(p.data.size):
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + step
            fp = eval_loss((name, idx))
            p.data[idx] = orig - step
            fm = eval_loss((name, idx))
            p.data[idx] = orig
            flat_n[i] = (fp - fm) / (2.0 * step)
        reports[name] = _compare(analytic[name], numeric, tol)
    return reports
