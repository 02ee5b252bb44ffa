"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation appends a node to a Tape, backward() walks
the recording in reverse.  Shapes are scalars, vectors and matrices; the
only broadcasting is scalar-with-array plus the explicit column-broadcast
helpers addcol/mulcol used by the recurrent cells.
"""

from __future__ import annotations

import numpy as np


class TapeError(ValueError):
    pass


def _as_array(value):
    a = np.asarray(value, dtype=float)
    return a


class Var:
    """A recorded value; ``idx`` is its handle into the owning tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    # operator sugar for the common elementwise cases
    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(self, other)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.scale(self, -1.0)


class Tape:
    """Recording of primitive operations in topological order."""

    def __init__(self):
        self.nodes = []  # (backward_fn | None, parent_indices, value)

    # -- recording helpers -------------------------------------------------

    def _record(self, value, parents, backward):
        value = _as_array(value)
        idx = len(self.nodes)
        self.nodes.append((backward, tuple(p.idx for p in parents), value))
        return Var(self, idx, value)

    def leaf(self, value) -> Var:
        value = _as_array(value)
        if not np.all(np.isfinite(value)):
            raise TapeError("leaf values must be finite")
        return self._record(value, (), None)

    def _coerce(self, other):
        """Return (array, is_var). Non-Var operands are constants."""
        if isinstance(other, Var):
            return other, True
        return _as_array(other), False

    @staticmethod
    def _match(a_shape, b_shape, op):
        if a_shape != b_shape and a_shape != () and b_shape != ():
            raise TapeError(f"{op}: shape mismatch {a_shape} vs {b_shape}")

    @staticmethod
    def _reduce_to(grad, shape):
        # gradients for scalar operands of broadcast elementwise ops
        if shape == () and grad.shape != ():
            return np.sum(grad)
        return grad

    # -- elementwise primitives --------------------------------------------

    def add(self, a: Var, b):
        b, b_is_var = self._coerce(b)
        if b_is_var:
            self._match(a.shape, b.shape, "add")

            def back(g, out):
                return (self._reduce_to(g, a.shape), self._reduce_to(g, b.value.shape))

            return self._record(a.value + b.value, (a, b), back)
        return self._record(a.value + b, (a,), lambda g, out: (self._reduce_to(g, a.shape),))

    def sub(self, a: Var, b):
        b, b_is_var = self._coerce(b)
        if b_is_var:
            self._match(a.shape, b.shape, "sub")

            def back(g, out):
                return (self._reduce_to(g, a.shape), self._reduce_to(-g, b.value.shape))

            return self._record(a.value - b.value, (a, b), back)
        return self._record(a.value - b, (a,), lambda g, out: (self._reduce_to(g, a.shape),))

    def mul(self, a: Var, b):
        b, b_is_var = self._coerce(b)
        if b_is_var:
            self._match(a.shape, b.shape, "mul")
            av, bv = a.value, b.value

            def back(g, out):
                return (self._reduce_to(g * bv, av.shape), self._reduce_to(g * av, bv.shape))

            return self._record(av * bv, (a, b), back)
        return self._record(a.value * b, (a,), lambda g, out: (self._reduce_to(g * b, a.shape),))

    def div(self, a: Var, b):
        if isinstance(a, Var):
            b2, b_is_var = self._coerce(b)
            if b_is_var:
                self._match(a.shape, b2.shape, "div")
                av, bv = a.value, b2.value

                def back(g, out):
                    return (
                        self._reduce_to(g / bv, av.shape),
                        self._reduce_to(-g * av / (bv * bv), bv.shape),
                    )

                return self._record(av / bv, (a, b2), back)
            return self._record(
                a.value / b2, (a,), lambda g, out: (self._reduce_to(g / b2, a.shape),)
            )
        # constant numerator / Var denominator
        a_const = _as_array(a)
        bv = b

        def back(g, out):
            return (self._reduce_to(-g * a_const / (bv.value * bv.value), bv.value.shape),)

        return self._record(a_const / bv.value, (bv,), back)

    def scale(self, a: Var, c: float):
        c = float(c)
        return self._record(a.value * c, (a,), lambda g, out: (g * c,))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a: Var, b):
        b, b_is_var = self._coerce(b)
        av = a.value
        bv = b.value if b_is_var else b
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise TapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
        if b_is_var:

            def back(g, out):
                return (g @ bv.T, av.T @ g)

            return self._record(av @ bv, (a, b), back)
        return self._record(av @ bv, (a,), lambda g, out: (g @ bv.T,))

    def matvec(self, a, v):
        a, a_is_var = self._coerce(a)
        v, v_is_var = self._coerce(v)
        av = a.value if a_is_var else a
        vv = v.value if v_is_var else v
        if av.ndim != 2 or vv.ndim != 1 or av.shape[1] != vv.shape[0]:
            raise TapeError(f"matvec: incompatible shapes {av.shape} @ {vv.shape}")
        parents, grads = [], []
        if a_is_var:
            parents.append(a)
            grads.append(lambda g: np.outer(g, vv))
        if v_is_var:
            parents.append(v)
            grads.append(lambda g: av.T @ g)
        if not parents:
            raise TapeError("matvec needs at least one Var operand")

        def back(g, out):
            return tuple(fn(g) for fn in grads)

        return self._record(av @ vv, tuple(parents), back)

    def addcol(self, mat: Var, vec: Var):
        """Matrix plus column-broadcast vector."""
        mv, vv = mat.value, vec.value
        if mv.ndim != 2 or vv.ndim != 1 or mv.shape[0] != vv.shape[0]:
            raise TapeError(f"addcol: incompatible shapes {mv.shape} + {vv.shape}")

        def back(g, out):
            return (g, np.sum(g, axis=1))

        return self._record(mv + vv[:, None], (mat, vec), back)

    def mulcol(self, mat: Var, vec):
        """Matrix times column-broadcast vector."""
        vec, v_is_var = self._coerce(vec)
        mv = mat.value
        vv = vec.value if v_is_var else vec
        if mv.ndim != 2 or vv.ndim != 1 or mv.shape[0] != vv.shape[0]:
            raise TapeError(f"mulcol: incompatible shapes {mv.shape} * {vv.shape}")
        if v_is_var:

            def back(g, out):
                return (g * vv[:, None], np.sum(g * mv, axis=1))

            return self._record(mv * vv[:, None], (mat, vec), back)
        return self._record(mv * vv[:, None], (mat,), lambda g, out: (g * vv[:, None],))

    # -- reductions and shape ops -------------------------------------------

    def sum(self, a: Var):
        return self._record(np.sum(a.value), (a,), lambda g, out: (g * np.ones_like(a.value),))

    def mean(self, a: Var):
        n = a.value.size
        return self._record(
            np.mean(a.value), (a,), lambda g, out: (g * np.ones_like(a.value) / n,)
        )

    def concat(self, parts: list[Var]):
        vals = [p.value for p in parts]
        if any(v.ndim != 1 for v in vals):
            raise TapeError("concat expects 1-D vectors")
        sizes = [v.shape[0] for v in vals]
        offs = np.cumsum([0] + sizes)

        def back(g, out):
            return tuple(g[offs[i] : offs[i + 1]] for i in range(len(parts)))

        return self._record(np.concatenate(vals), tuple(parts), back)

    def vslice(self, a: Var, start: int, stop: int):
        """Slice of the leading axis (rows of a matrix, span of a vector)."""
        av = a.value
        if not 0 <= start < stop <= av.shape[0]:
            raise TapeError(f"vslice [{start}:{stop}] out of bounds for {av.shape}")

        def back(g, out):
            full = np.zeros_like(av)
            full[start:stop] = g
            return (full,)

        return self._record(av[start:stop], (a,), back)

    # -- nonlinearities -------------------------------------------------------

    def square(self, a: Var):
        return self._record(a.value**2, (a,), lambda g, out: (2.0 * g * a.value,))

    def exp(self, a: Var):
        return self._record(np.exp(a.value), (a,), lambda g, out: (g * out,))

    def sigmoid(self, a: Var):
        out_val = 1.0 / (1.0 + np.exp(-a.value))
        return self._record(out_val, (a,), lambda g, out: (g * out * (1.0 - out),))

    def tanh(self, a: Var):
        return self._record(np.tanh(a.value), (a,), lambda g, out: (g * (1.0 - out * out),))

    def relu(self, a: Var):
        # derivative at exactly 0 is taken as 0
        return self._record(
            np.maximum(a.value, 0.0), (a,), lambda g, out: (g * (a.value > 0.0),)
        )

    def softplus(self, a: Var):
        out_val = np.logaddexp(0.0, a.value)

        def back(g, out):
            return (g / (1.0 + np.exp(-a.value)),)

        return self._record(out_val, (a,), back)

    # -- escape hatch ---------------------------------------------------------

    def custom_node(self, parents: list[Var], value, vjp) -> Var:
        """Splice an externally computed value with a caller-supplied
        vector-Jacobian callback.

        ``vjp(cotangent)`` must return one cotangent array per parent, in
        order and with matching shapes.
        """
        parent_shapes = [p.value.shape for p in parents]

        def back(g, out):
            cots = vjp(g)
            if len(cots) != len(parents):
                raise TapeError("custom_node callback returned wrong arity")
            cots = tuple(_as_array(c) for c in cots)
            for c, s in zip(cots, parent_shapes):
                if c.shape != s:
                    raise TapeError(f"custom_node cotangent shape {c.shape} != parent {s}")
            return cots

        return self._record(value, tuple(parents), back)

    # -- reverse pass -----------------------------------------------------------

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every recorded node.

        Returns a table mapping node handle to gradient array; nodes that
        do not influence the loss get zeros.
        """
        if loss.value.shape != ():
            raise TapeError("backward expects a scalar loss")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.idx] = np.asarray(1.0)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            backward_fn, parents, value = self.nodes[idx]
            if backward_fn is None:
                continue
            cots = backward_fn(g, value)
            for p_idx, cot in zip(parents, cots):
                if grads[p_idx] is None:
                    grads[p_idx] = np.array(cot, dtype=float, copy=True)
                else:
                    grads[p_idx] = grads[p_idx] + cot
        out = {}
        for idx, (backward_fn, parents, value) in enumerate(self.nodes):
            g = grads[idx]
            out[idx] = np.zeros_like(value) if g is None else np.broadcast_to(g, value.shape).astype(float)
        return out


def grad_check(f, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error of tape gradients vs central finite differences.

    ``f`` maps a Var to a scalar Var; a fresh tape is built per
    evaluation, matching the define-by-run training style.
    """
    if not eps > 0:
        raise TapeError("eps must be positive")
    x = np.asarray(x, dtype=float)

    tape = Tape()
    var = tape.leaf(x)
    loss = f(var)
    analytic = tape.backward(loss)[var.idx]

    def value_at(xv):
        t = Tape()
        return float(f(t.leaf(xv)).value)

    worst = 0.0
    flat = x.ravel()
    grad_flat = np.asarray(analytic, dtype=float).ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        fd = (value_at((flat + bump).reshape(x.shape)) - value_at((flat - bump).reshape(x.shape))) / (
            2 * eps
        )
        err = abs(grad_flat[i] - fd) / max(abs(fd), abs(grad_flat[i]), 1e-8)
        worst = max(worst, err)
    return worst
