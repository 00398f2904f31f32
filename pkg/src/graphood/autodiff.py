"""Reverse-mode automatic differentiation on a flat recording tape.

All tensors are dense 2-D float64 arrays; scalars are shape (1, 1).
The op catalog is closed (version 1): matmul, spmm, add, sub, mul,
scale, relu, bias_add, hstack, slice_rows, reshape, transpose,
segment_sum, l2_normalize_rows, exp, log, row_sum, row_logsumexp,
sum_all, mean_all.

Gradients are accumulated in strict reverse recording order, one node
at a time, so repeated runs of the same tape are bit-identical. Ops
whose inputs all have requires_grad=False are not recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, NumericalError, ShapeError

LOG_EPS = 1e-12
NORM_EPS = 1e-12
CATALOG_VERSION = 1


class Tensor:
    """A 2-D float64 array bound to a tape node."""

    __slots__ = ("tape", "node_id", "data", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.node_id = node_id
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a (1, 1) tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# Backward callbacks receive the output gradient and return one gradient
# array (or None) per recorded input id, in input order.
_BackwardFn = Callable[[np.ndarray], tuple]


class Tape:
    """Records operations in execution order; replays them in reverse."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], _BackwardFn]] = []
        self._next_id = 0

    def _alloc(self, data: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor(self, self._next_id, data, requires_grad)
        self._next_id += 1
        return t

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        return self._alloc(arr, requires_grad)

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def scalar(self, value: float) -> Tensor:
        return self.leaf(np.array([[float(value)]]), requires_grad=False)

    def _emit(self, data: np.ndarray, inputs: Sequence[Tensor], backward: _BackwardFn) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = self._alloc(data, needs)
        if needs:
            self._records.append((out.node_id, tuple(t.node_id for t in inputs), backward))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every reachable node.

        Returns a dict keyed by node id; nodes not reached from the loss
        are simply absent (their gradient is zero).
        """
        if loss.tape is not self:
            raise ArgumentError("loss tensor belongs to a different tape")
        if loss.data.shape != (1, 1):
            raise ArgumentError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for out_id, in_ids, fn in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for node_id, contrib in zip(in_ids, fn(g)):
                if contrib is None:
                    continue
                acc = grads.get(node_id)
                if acc is None:
                    grads[node_id] = contrib
                else:
                    acc += contrib
        return grads


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ArgumentError("operands belong to different tapes")
    return tape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return tape._emit(ad @ bd, (a, b), backward)


def spmm(rows: np.ndarray, cols: np.ndarray, n_out: int, x: Tensor,
         csr=None, csr_t=None) -> Tensor:
    """Sparse-adjacency times dense: out[i] = sum over (i, j) entries of x[j].

    rows/cols list the nonzero coordinates (value 1 each). Prebuilt CSR
    operators may be passed to amortize construction across calls.
    """
    from scipy import sparse

    if csr is None:
        ones = np.ones(len(rows))
        csr = sparse.csr_matrix((ones, (rows, cols)), shape=(n_out, x.data.shape[0]))
        csr_t = csr.T.tocsr()
    if csr.shape[1] != x.data.shape[0]:
        raise ShapeError(f"spmm adjacency {csr.shape} against dense {x.data.shape}")
    ct = csr_t

    def backward(g):
        return (ct @ g,)

    return x.tape._emit(csr @ x.data, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} and {b.data.shape}")
    return tape._emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes {a.data.shape} and {b.data.shape}")
    return tape._emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return tape._emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return a.tape._emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return a.tape._emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(x, b)
    if b.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"bias_add bias {b.data.shape} against {x.data.shape}")
    return tape._emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def hstack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ArgumentError("hstack of an empty sequence")
    tape = _same_tape(*tensors)
    rows = tensors[0].data.shape[0]
    for t in tensors:
        if t.data.shape[0] != rows:
            raise ShapeError(f"hstack row counts {rows} and {t.data.shape[0]}")
    widths = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return tape._emit(np.hstack([t.data for t in tensors]), tensors, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {x.data.shape}")
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return x.tape._emit(x.data[start:stop].copy(), (x,), backward)


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != x.data.size:
        raise ShapeError(f"reshape {x.data.shape} to ({rows}, {cols})")
    old = x.data.shape
    return x.tape._emit(x.data.reshape(rows, cols).copy(), (x,),
                        lambda g: (g.reshape(old).copy(),))


def transpose(x: Tensor) -> Tensor:
    return x.tape._emit(np.ascontiguousarray(x.data.T), (x,),
                        lambda g: (np.ascontiguousarray(g.T),))


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of x per segment. segment_ids must be nondecreasing."""
    seg = np.asarray(segment_ids)
    if seg.shape != (x.data.shape[0],):
        raise ShapeError(f"segment_ids {seg.shape} against {x.data.shape}")
    if len(seg) and np.any(np.diff(seg) < 0):
        raise ArgumentError("segment_ids must be nondecreasing")
    counts = np.bincount(seg, minlength=num_segments)
    if len(seg) and counts.all():
        starts = np.zeros(num_segments, dtype=np.intp)
        np.cumsum(counts[:-1], out=starts[1:])
        out = np.add.reduceat(x.data, starts, axis=0)
    else:
        out = np.zeros((num_segments, x.data.shape[1]))
        np.add.at(out, seg, x.data)

    def backward(g):
        return (g[seg],)

    return x.tape._emit(out, (x,), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Row-wise x / max(||x||, eps); rows below eps scale linearly."""
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    denom = np.maximum(norms, NORM_EPS)
    y = x.data / denom
    small = norms[:, 0] <= NORM_EPS

    def backward(g):
        # d(x/n)/dx = (I - y y^T) / n for n > eps; plain 1/eps below.
        inner = np.sum(g * y, axis=1, keepdims=True)
        gx = (g - y * inner) / denom
        if small.any():
            gx[small] = g[small] / NORM_EPS
        return (gx,)

    return x.tape._emit(y, (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return x.tape._emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    clamped = np.maximum(x.data, LOG_EPS)
    return x.tape._emit(np.log(clamped), (x,), lambda g: (g / clamped,))


def row_sum(x: Tensor) -> Tensor:
    cols = x.data.shape[1]
    return x.tape._emit(x.data.sum(axis=1, keepdims=True), (x,),
                        lambda g: (np.repeat(g, cols, axis=1),))


def row_logsumexp(x: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))), stabilized by a constant max shift."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s

    def backward(g):
        return (g * soft,)

    return x.tape._emit(m + np.log(s), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return x.tape._emit(np.array([[x.data.sum()]]), (x,),
                        lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    n = x.data.size
    return x.tape._emit(np.array([[x.data.sum() / n]]), (x,),
                        lambda g: (np.full(shape, g[0, 0] / n),))


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    n_coords: int
    excluded: tuple[int, ...]
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{self.name}: {status} max_rel_err={self.max_rel_err:.3e} "
                f"coords={self.n_coords}")
        if self.excluded:
            line += f" excluded={len(self.excluded)}"
        return line


def grad_check(build, x0, h: float = 1e-5, tol: float = 1e-4,
               kink_tol: float = 5e-2, name: str = "f") -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    build(tape, x) must return a scalar Tensor. Coordinates whose left
    and right one-sided slopes disagree (a kink under the probe) are
    excluded from the pass/fail decision and reported instead.
    """
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if x0.ndim != 2:
        raise ShapeError(f"grad_check point must be 2-D, got ndim={x0.ndim}")

    def feval(arr: np.ndarray) -> float:
        t = Tape()
        out = build(t, t.leaf(arr))
        v = out.item()
        if not np.isfinite(v):
            raise NumericalError(f"{name}: non-finite value near the probe point")
        return v

    tape = Tape()
    x = tape.leaf(x0, requires_grad=True)
    loss = build(tape, x)
    f0 = loss.item()
    if not np.isfinite(f0):
        raise NumericalError(f"{name}: non-finite value at the probe point")
    g_ad = tape.backward(loss).get(x.node_id)
    if g_ad is None:
        g_ad = np.zeros_like(x0)

    flat = x0.ravel()
    max_rel = 0.0
    excluded: list[int] = []
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + h
        fp = feval(probe.reshape(x0.shape))
        probe[i] = flat[i] - h
        fm = feval(probe.reshape(x0.shape))
        d_plus = (fp - f0) / h
        d_minus = (f0 - fm) / h
        jump = abs(d_plus - d_minus) / max(1e-8, abs(d_plus) + abs(d_minus))
        if jump > kink_tol:
            excluded.append(i)
            continue
        g_fd = (fp - fm) / (2.0 * h)
        ga = g_ad.ravel()[i]
        rel = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
        max_rel = max(max_rel, rel)
    return GradCheckReport(name=name, max_rel_err=max_rel, n_coords=flat.size,
                           excluded=tuple(excluded), passed=max_rel <= tol)


def _random_adjacency(rng: np.random.Generator, n: int):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    if not pairs:
        pairs = [(0, 1)]
    rows = np.array([p[0] for p in pairs] + [p[1] for p in pairs])
    cols = np.array([p[1] for p in pairs] + [p[0] for p in pairs])
    return rows, cols


def _op_check_table():
    """One scalar-valued probe per catalog op, parameterized by an rng."""

    def with_weight(rng, shape, fn):
        w = rng.normal(size=shape)
        return lambda tape, x: sum_all(mul(fn(tape, x), tape.constant(w)))

    def t_matmul(rng):
        b = rng.normal(size=(3, 4))
        return with_weight(rng, (2, 4), lambda tp, x: matmul(x, tp.constant(b))), rng.normal(size=(2, 3))

    def t_spmm(rng):
        rows, cols = _random_adjacency(rng, 5)
        return with_weight(rng, (5, 3), lambda tp, x: spmm(rows, cols, 5, x)), rng.normal(size=(5, 3))

    def t_add(rng):
        b = rng.normal(size=(3, 3))
        return with_weight(rng, (3, 3), lambda tp, x: add(x, tp.constant(b))), rng.normal(size=(3, 3))

    def t_sub(rng):
        b = rng.normal(size=(3, 3))
        return with_weight(rng, (3, 3), lambda tp, x: sub(tp.constant(b), x)), rng.normal(size=(3, 3))

    def t_mul(rng):
        b = rng.normal(size=(3, 3))
        return with_weight(rng, (3, 3), lambda tp, x: mul(x, tp.constant(b))), rng.normal(size=(3, 3))

    def t_scale(rng):
        s = float(rng.normal())
        return with_weight(rng, (2, 3), lambda tp, x: scale(x, s)), rng.normal(size=(2, 3))

    def t_relu(rng):
        x0 = rng.normal(size=(3, 4))
        x0 = np.where(np.abs(x0) < 0.1, x0 + 0.3, x0)  # keep probes off the kink
        return with_weight(rng, (3, 4), lambda tp, x: relu(x)), x0

    def t_bias_add(rng):
        b = rng.normal(size=(1, 4))
        return with_weight(rng, (3, 4), lambda tp, x: bias_add(x, tp.constant(b))), rng.normal(size=(3, 4))

    def t_bias_grad(rng):
        a = rng.normal(size=(3, 4))
        return with_weight(rng, (3, 4), lambda tp, x: bias_add(tp.constant(a), x)), rng.normal(size=(1, 4))

    def t_hstack(rng):
        b = rng.normal(size=(3, 2))
        return with_weight(rng, (3, 5), lambda tp, x: hstack([x, tp.constant(b)])), rng.normal(size=(3, 3))

    def t_slice_rows(rng):
        return with_weight(rng, (2, 3), lambda tp, x: slice_rows(x, 1, 3)), rng.normal(size=(4, 3))

    def t_reshape(rng):
        return with_weight(rng, (2, 6), lambda tp, x: reshape(x, 2, 6)), rng.normal(size=(3, 4))

    def t_transpose(rng):
        return with_weight(rng, (4, 2), lambda tp, x: transpose(x)), rng.normal(size=(2, 4))

    def t_segment_sum(rng):
        seg = np.array([0, 0, 1, 2, 2])
        return with_weight(rng, (3, 3), lambda tp, x: segment_sum(x, seg, 3)), rng.normal(size=(5, 3))

    def t_l2norm(rng):
        x0 = rng.normal(size=(3, 4))
        x0 += np.sign(x0.sum(axis=1, keepdims=True)) * 0.5  # rows away from zero norm
        return with_weight(rng, (3, 4), lambda tp, x: l2_normalize_rows(x)), x0

    def t_exp(rng):
        return with_weight(rng, (2, 3), lambda tp, x: exp(x)), rng.normal(size=(2, 3))

    def t_log(rng):
        x0 = rng.uniform(0.5, 2.0, size=(2, 3))
        return with_weight(rng, (2, 3), lambda tp, x: log(x)), x0

    def t_row_sum(rng):
        return with_weight(rng, (3, 1), lambda tp, x: row_sum(x)), rng.normal(size=(3, 4))

    def t_row_lse(rng):
        return with_weight(rng, (3, 1), lambda tp, x: row_logsumexp(x)), rng.normal(size=(3, 5))

    def t_sum_all(rng):
        return (lambda tp, x: sum_all(mul(x, x))), rng.normal(size=(3, 3))

    def t_mean_all(rng):
        return (lambda tp, x: mean_all(mul(x, x))), rng.normal(size=(3, 3))

    return [
        ("matmul", t_matmul), ("spmm", t_spmm), ("add", t_add), ("sub", t_sub),
        ("mul", t_mul), ("scale", t_scale), ("relu", t_relu),
        ("bias_add", t_bias_add), ("bias_add_grad", t_bias_grad),
        ("hstack", t_hstack), ("slice_rows", t_slice_rows), ("reshape", t_reshape),
        ("transpose", t_transpose), ("segment_sum", t_segment_sum),
        ("l2_normalize_rows", t_l2norm), ("exp", t_exp), ("log", t_log),
        ("row_sum", t_row_sum), ("row_logsumexp", t_row_lse),
        ("sum_all", t_sum_all), ("mean_all", t_mean_all),
    ]


OP_CHECKS = _op_check_table()


def op_gradcheck_suite(instances: int = 20, seed: int = 0, checks=None,
                       h: float = 1e-5, tol: float = 1e-4) -> list[GradCheckReport]:
    """Run grad_check over the whole op catalog; one report per op."""
    reports = []
    for name, maker in (checks if checks is not None else OP_CHECKS):
        worst = 0.0
        n_coords = 0
        excluded: list[int] = []
        passed = True
        for k in range(instances):
            rng = np.random.default_rng([seed, k, hash(name) & 0xFFFF])
            build, x0 = maker(rng)
            rep = grad_check(build, x0, h=h, tol=tol, name=name)
            worst = max(worst, rep.max_rel_err)
            n_coords += rep.n_coords
            excluded.extend(rep.excluded)
            passed = passed and rep.passed
        reports.append(GradCheckReport(name=name, max_rel_err=worst, n_coords=n_coords,
                                       excluded=tuple(excluded), passed=passed))
    return reports
