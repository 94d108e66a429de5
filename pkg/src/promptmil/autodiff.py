"""Reverse-mode autodiff over dense numpy vectors and matrices.

Every primitive used by the slide pipeline is defined here with its
analytic vector-Jacobian product. Ops run on plain ndarrays (1-D or 2-D,
float32 for training, float64 for verification) and record onto the
active :class:`Tape` only when a gradient is actually required, so
inference passes pay no tracking cost.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN/Inf while finite checks were enabled."""

    def __init__(self, op_name: str):
        super().__init__(f"non-finite value produced by primitive '{op_name}'")
        self.op_name = op_name


_TAPE_STACK: list["Tape"] = []
_CHECK_FINITE = False


@contextmanager
def finite_checks(enabled: bool = True):
    """Enable per-op NaN/Inf detection within the block."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """A numpy value plus gradient slot. 0-d scalars, 1-d vectors, 2-d matrices."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, check: bool | None = None):
        v = np.asarray(value)
        if v.dtype.kind != "f":
            v = v.astype(np.float64)
        if v.ndim > 2:
            raise ValueError(f"rank-{v.ndim} arrays are not supported")
        do_check = _CHECK_FINITE if check is None else check
        if do_check and not np.all(np.isfinite(v)):
            raise NonFiniteError("tensor construction")
        self.value = v
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def rows(self) -> int:
        return self.value.shape[0] if self.value.ndim >= 1 else 1

    @property
    def cols(self) -> int:
        return self.value.shape[1] if self.value.ndim == 2 else 1

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.value.shape}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    v = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(v)


def parameter(value, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=True)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


@dataclass
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjps: tuple[Callable | None, ...]
    forward: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into .grad of every recorded tensor."""
        if root.value.ndim != 0:
            raise ValueError("backward requires a scalar root")
        root.grad = np.ones_like(root.value)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for t, vjp in zip(rec.inputs, rec.vjps):
                if vjp is None or not t.requires_grad:
                    continue
                contrib = vjp(g)
                t.grad = contrib if t.grad is None else t.grad + contrib

    def replay_matches(self) -> bool:
        """Re-run every recorded primitive on its current inputs; True iff
        all outputs reproduce bit-exactly."""
        for rec in self.records:
            redo = rec.forward(*(t.value for t in rec.inputs))
            if redo.tobytes() != rec.output.value.tobytes():
                return False
        return True


def _apply(name: str, fwd: Callable, inputs: tuple[Tensor, ...],
           make_vjps: Callable) -> Tensor:
    vals = tuple(t.value for t in inputs)
    if _CHECK_FINITE:
        # non-finite results become typed errors; numpy's own warning is noise
        with np.errstate(all="ignore"):
            out_val = np.asarray(fwd(*vals))
        if not np.all(np.isfinite(out_val)):
            raise NonFiniteError(name)
    else:
        out_val = np.asarray(fwd(*vals))
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_val, requires_grad=needs, check=False)
    if needs and _TAPE_STACK:
        vjps = make_vjps(vals, out_val)
        _TAPE_STACK[-1].records.append(_Record(name, inputs, out, vjps, fwd))
    return out


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _apply("add", lambda x, y: x + y, (a, b),
                  lambda vals, out: (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _apply("sub", lambda x, y: x - y, (a, b),
                  lambda vals, out: (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _apply("mul", lambda x, y: x * y, (a, b),
                  lambda vals, out: (lambda g: g * vals[1], lambda g: g * vals[0]))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _apply("scale", lambda x: x * np.asarray(c, dtype=x.dtype), (a,),
                  lambda vals, out: (lambda g: g * np.asarray(c, dtype=g.dtype),))


def div_by_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Elementwise a / s for a scalar tensor s; gradients reach both."""
    a, s = as_tensor(a), as_tensor(s)
    if s.value.ndim != 0:
        raise ValueError("div_by_scalar: divisor must be a scalar")

    def vjps(vals, out):
        x, sv = vals
        return (lambda g: g / sv,
                lambda g: np.asarray(-(g * x).sum() / (sv * sv), dtype=sv.dtype))

    return _apply("div_by_scalar", lambda x, sv: x / sv, (a, s), vjps)


def sum_vec(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _apply("sum", lambda x: x.sum(), (a,),
                  lambda vals, out: (lambda g: g * np.ones_like(vals[0]),))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _apply("log", np.log, (a,),
                  lambda vals, out: (lambda g: g / vals[0],))


def log_sum_exp(v: Tensor) -> Tensor:
    """Stable log(sum(exp(v))) of a 1-D vector."""
    v = as_tensor(v)
    if v.value.ndim != 1 or v.shape[0] == 0:
        raise ValueError("log_sum_exp: non-empty vector required")

    def fwd(x):
        m = x.max()
        return m + np.log(np.exp(x - m).sum())

    def vjps(vals, out):
        x = vals[0]
        e = np.exp(x - x.max())
        sm = e / e.sum()
        return (lambda g: g * sm,)

    return _apply("log_sum_exp", fwd, (v,), vjps)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjps(vals, out):
        x, y = vals
        return (lambda g: g @ y.T, lambda g: x.T @ g)

    return _apply("matmul", lambda x, y: x @ y, (a, b), vjps)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    a, x = as_tensor(a), as_tensor(x)
    if a.value.ndim != 2 or x.value.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ValueError(f"matvec: incompatible shapes {a.shape} @ {x.shape}")

    def vjps(vals, out):
        m, v = vals
        return (lambda g: np.outer(g, v), lambda g: m.T @ g)

    return _apply("matvec", lambda m, v: m @ v, (a, x), vjps)


def vecmat(x: Tensor, a: Tensor) -> Tensor:
    x, a = as_tensor(x), as_tensor(a)
    if x.value.ndim != 1 or a.value.ndim != 2 or x.shape[0] != a.shape[0]:
        raise ValueError(f"vecmat: incompatible shapes {x.shape} @ {a.shape}")

    def vjps(vals, out):
        v, m = vals
        return (lambda g: m @ g, lambda g: np.outer(v, g))

    return _apply("vecmat", lambda v, m: v @ m, (x, a), vjps)


def dot(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.value.ndim != 1:
        raise ValueError(f"dot: incompatible shapes {u.shape}, {v.shape}")

    def vjps(vals, out):
        a, b = vals
        return (lambda g: g * b, lambda g: g * a)

    return _apply("dot", lambda a, b: a @ b, (u, v), vjps)


def mean_rows(m: Tensor) -> Tensor:
    m = as_tensor(m)
    if m.value.ndim != 2 or m.shape[0] == 0:
        raise ValueError("mean_rows: non-empty matrix required")
    n = m.shape[0]

    def vjps(vals, out):
        return (lambda g: np.tile(g / n, (n, 1)),)

    return _apply("mean_rows", lambda x: x.mean(axis=0), (m,), vjps)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D blocks with equal column counts into one matrix."""
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ValueError("concat_rows: empty input")
    counts = [p.shape[0] for p in parts]

    def vjps(vals, out):
        offs = np.cumsum([0] + counts)

        def make(i):
            return lambda g: g[offs[i]:offs[i + 1]]

        return tuple(make(i) for i in range(len(vals)))

    return _apply("concat_rows", lambda *vs: np.concatenate(vs, axis=0),
                  parts, vjps)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D vectors into an N x d matrix."""
    vecs = tuple(as_tensor(v) for v in vectors)
    if not vecs:
        raise ValueError("stack_rows: empty input")

    def vjps(vals, out):
        def make(i):
            return lambda g: g[i]

        return tuple(make(i) for i in range(len(vals)))

    return _apply("stack_rows", lambda *vs: np.stack(vs, axis=0), vecs, vjps)


def stack_scalars(scalars: Sequence[Tensor]) -> Tensor:
    vals = tuple(as_tensor(s) for s in scalars)
    if not vals:
        raise ValueError("stack_scalars: empty input")

    def vjps(ins, out):
        def make(i):
            return lambda g: np.asarray(g[i])

        return tuple(make(i) for i in range(len(ins)))

    return _apply("stack_scalars", lambda *vs: np.stack(vs), vals, vjps)


def concat_vecs(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    nu = u.shape[0]

    def vjps(vals, out):
        return (lambda g: g[:nu], lambda g: g[nu:])

    return _apply("concat_vecs", lambda a, b: np.concatenate([a, b]), (u, v), vjps)


def get_row(m: Tensor, i: int) -> Tensor:
    m = as_tensor(m)
    i = int(i)

    def vjps(vals, out):
        def back(g):
            z = np.zeros_like(vals[0])
            z[i] = g
            return z

        return (back,)

    return _apply("get_row", lambda x: x[i].copy(), (m,), vjps)


def pick(v: Tensor, i: int) -> Tensor:
    v = as_tensor(v)
    i = int(i)
    if not 0 <= i < v.shape[0]:
        raise IndexError(f"pick: index {i} out of range for length {v.shape[0]}")

    def vjps(vals, out):
        def back(g):
            z = np.zeros_like(vals[0])
            z[i] = g
            return z

        return (back,)

    return _apply("pick", lambda x: np.asarray(x[i]), (v,), vjps)


def slice_vec(v: Tensor, start: int, stop: int) -> Tensor:
    v = as_tensor(v)
    start, stop = int(start), int(stop)
    if not 0 <= start < stop <= v.shape[0]:
        raise IndexError(f"slice_vec: [{start}:{stop}] invalid for length {v.shape[0]}")

    def vjps(vals, out):
        def back(g):
            z = np.zeros_like(vals[0])
            z[start:stop] = g
            return z

        return (back,)

    return _apply("slice_vec", lambda x: x[start:stop].copy(), (v,), vjps)


def gather(v: Tensor, indices) -> Tensor:
    """Vector elements at the given indices, in order."""
    v = as_tensor(v)
    idx = np.asarray(indices, dtype=np.intp)

    def vjps(vals, out):
        def back(g):
            z = np.zeros_like(vals[0])
            np.add.at(z, idx, g)
            return z

        return (back,)

    return _apply("gather", lambda x: x[idx], (v,), vjps)


def gather_rows(m: Tensor, indices) -> Tensor:
    """Matrix rows at the given indices, in order."""
    m = as_tensor(m)
    idx = np.asarray(indices, dtype=np.intp)

    def vjps(vals, out):
        def back(g):
            z = np.zeros_like(vals[0])
            np.add.at(z, idx, g)
            return z

        return (back,)

    return _apply("gather_rows", lambda x: x[idx], (m,), vjps)


def add_scalar(v: Tensor, s: Tensor) -> Tensor:
    """Broadcast-add a scalar tensor to every element of a vector."""
    v, s = as_tensor(v), as_tensor(s)
    if s.value.ndim != 0:
        raise ValueError("add_scalar: second argument must be a scalar")

    def vjps(vals, out):
        return (lambda g: g, lambda g: np.asarray(g.sum()))

    return _apply("add_scalar", lambda x, sv: x + sv, (v, s), vjps)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(v: Tensor) -> Tensor:
    """Stable softmax of a 1-D vector; shift-invariant by construction."""
    v = as_tensor(v)
    if v.value.ndim != 1 or v.shape[0] == 0:
        raise ValueError("softmax: non-empty vector required")

    def fwd(x):
        e = np.exp(x - x.max())
        return e / e.sum()

    def vjps(vals, out):
        return (lambda g: out * (g - (g * out).sum()),)

    return _apply("softmax", fwd, (v,), vjps)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize a vector to zero mean, unit population variance. No affine."""
    x = as_tensor(x)
    if x.value.ndim != 1 or x.shape[0] == 0:
        raise ValueError("layer_norm: non-empty vector required")
    eps = float(eps)

    def fwd(v):
        m = v.mean()
        var = ((v - m) ** 2).mean()
        return (v - m) / np.sqrt(var + np.asarray(eps, dtype=v.dtype))

    def vjps(vals, out):
        v = vals[0]
        m = v.mean()
        var = ((v - m) ** 2).mean()
        inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=v.dtype))

        def back(g):
            xhat = (v - m) * inv
            return inv * (g - g.mean() - xhat * (g * xhat).mean())

        return (back,)

    return _apply("layer_norm", fwd, (x,), vjps)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    if x.value.ndim != 1:
        raise ValueError("l2_normalize: vector required")

    def fwd(v):
        n = np.sqrt((v * v).sum())
        return v / np.maximum(n, np.asarray(eps, dtype=v.dtype))

    def vjps(vals, out):
        v = vals[0]
        n = np.sqrt((v * v).sum())

        def back(g):
            if n < eps:
                return np.zeros_like(v)
            return (g - out * (g * out).sum()) / n

        return (back,)

    return _apply("l2_normalize", fwd, (x,), vjps)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def vjps(vals, out):
        return (lambda g: g * (vals[0] > 0),)

    return _apply("relu", lambda v: np.maximum(v, 0), (x,), vjps)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0,1), got {slope}")

    def fwd(v):
        return np.where(v >= 0, v, np.asarray(slope, dtype=v.dtype) * v)

    def vjps(vals, out):
        return (lambda g: g * np.where(vals[0] >= 0, 1.0, slope).astype(g.dtype),)

    return _apply("leaky_relu", fwd, (x,), vjps)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def vjps(vals, out):
        return (lambda g: g * (1.0 - out * out),)

    return _apply("tanh", np.tanh, (x,), vjps)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def fwd(v):
        # split form avoids exp overflow for large |v|
        pos = v >= 0
        out = np.empty_like(v)
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    def vjps(vals, out):
        return (lambda g: g * out * (1.0 - out),)

    return _apply("sigmoid", fwd, (x,), vjps)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of two vectors; 0 when either norm is below 1e-12."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.value.ndim != 1:
        raise ValueError(f"cosine_similarity: incompatible shapes {u.shape}, {v.shape}")

    def fwd(a, b):
        na = np.sqrt((a * a).sum())
        nb = np.sqrt((b * b).sum())
        if na < 1e-12 or nb < 1e-12:
            return np.asarray(0.0, dtype=a.dtype)
        return (a @ b) / (na * nb)

    def vjps(vals, out):
        a, b = vals
        na = np.sqrt((a * a).sum())
        nb = np.sqrt((b * b).sum())

        def back_a(g):
            if na < 1e-12 or nb < 1e-12:
                return np.zeros_like(a)
            return g * (b / (na * nb) - out * a / (na * na))

        def back_b(g):
            if na < 1e-12 or nb < 1e-12:
                return np.zeros_like(b)
            return g * (a / (na * nb) - out * b / (nb * nb))

        return (back_a, back_b)

    return _apply("cosine_similarity", fwd, (u, v), vjps)


def cosine_rows(m: Tensor, z: Tensor) -> Tensor:
    """Cosine of every matrix row against one vector; a row (or z) with norm
    below 1e-12 yields 0, matching cosine_similarity."""
    m, z = as_tensor(m), as_tensor(z)
    if m.value.ndim != 2 or z.value.ndim != 1 or m.shape[1] != z.shape[0]:
        raise ValueError(f"cosine_rows: incompatible shapes {m.shape}, {z.shape}")

    def fwd(rows, v):
        nv = np.sqrt((v * v).sum())
        rn = np.sqrt((rows * rows).sum(axis=1))
        out = np.zeros(rows.shape[0], dtype=v.dtype)
        if nv < 1e-12:
            return out
        ok = rn >= 1e-12
        out[ok] = (rows[ok] @ v) / (rn[ok] * nv)
        return out

    def vjps(vals, out):
        rows, v = vals
        nv = np.sqrt((v * v).sum())
        rn = np.sqrt((rows * rows).sum(axis=1))
        ok = rn >= 1e-12

        def back_rows(g):
            dz = np.zeros_like(rows)
            if nv < 1e-12:
                return dz
            gi = g[ok, None]
            dz[ok] = gi * (v[None, :] / (rn[ok, None] * nv)
                           - out[ok, None] * rows[ok] / (rn[ok, None] ** 2))
            return dz

        def back_z(g):
            if nv < 1e-12:
                return np.zeros_like(v)
            gi = (g * ok)[:, None]
            part = (gi * rows / (rn[:, None] * nv + (~ok)[:, None])).sum(axis=0)
            correction = ((g * ok) * out).sum() * v / (nv * nv)
            return part - correction

        return (back_rows, back_z)

    return _apply("cosine_rows", fwd, (m, z), vjps)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max over parameter entries of the relative error between the tape
    gradient of the scalar f() and a central finite difference.

    Relative error uses max(1, |central difference|) as denominator.
    Parameters are perturbed in place and restored; f must be pure in
    everything except the supplied parameters.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-4], got {eps}")
    zero_grads(params)
    with finite_checks(True):
        with Tape() as tape:
            out = f()
        tape.backward(out)
        analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                    for p in params]
        worst = 0.0
        for p, ga in zip(params, analytic):
            flat = p.value.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().value)
                flat[i] = orig - eps
                fm = float(f().value)
                flat[i] = orig
                central = (fp - fm) / (2.0 * eps)
                rel = abs(float(gflat[i]) - central) / max(1.0, abs(central))
                worst = max(worst, rel)
    return worst
