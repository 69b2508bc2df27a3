"""Expression graphs with exact first- and second-order forward-mode derivatives.

Model functions (dynamics, costs, constraints, storage functions) are written
as ordinary numpy code acting on arrays of :class:`Expr` objects. Calling such
code on symbols records a DAG which :class:`Function` compiles into a flat
program in topological order. Evaluation is vectorised over a leading batch
axis, so one pass through the program evaluates every stage of a horizon.

Example
-------
>>> f = Function.from_callable("sq", lambda x: [x[0] * x[1], np.sin(x[0])], [("x", 2)])
>>> f.jacobian([1.0, 2.0])
array([[2.        , 1.        ],
       [0.54030231, 0.        ]])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

VAR, CONST, ADD, SUB, MUL, NEG, RECIP, POW, SIN, COS, TAN, EXP, LOG, SQRT = range(14)

_OP_NAMES = {
    VAR: "var", CONST: "const", ADD: "add", SUB: "sub", MUL: "mul", NEG: "neg",
    RECIP: "recip", POW: "pow", SIN: "sin", COS: "cos", TAN: "tan", EXP: "exp",
    LOG: "log", SQRT: "sqrt",
}

_TAN_POLE_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a node is evaluated outside the domain where it is C2."""

    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (node {node})")
        self.node = node


class Expr:
    """A node of an expression DAG. Build with arithmetic and numpy ufuncs."""

    __slots__ = ("op", "args", "value", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, op: int, args: tuple = (), value=None):
        self.op = op
        self.args = args
        self.value = value

    def __repr__(self) -> str:
        if self.op == CONST:
            return f"Expr({self.value!r})"
        if self.op == VAR:
            return f"Expr(var {self.value})"
        return f"Expr({_OP_NAMES[self.op]}, {len(self.args)} args)"

    @property
    def is_const(self) -> bool:
        return self.op == CONST

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_expr(other))

    def __radd__(self, other):
        return _add(as_expr(other), self)

    def __sub__(self, other):
        return _sub(self, as_expr(other))

    def __rsub__(self, other):
        return _sub(as_expr(other), self)

    def __mul__(self, other):
        return _mul(self, as_expr(other))

    def __rmul__(self, other):
        return _mul(as_expr(other), self)

    def __truediv__(self, other):
        other = as_expr(other)
        if other.op == CONST:
            if other.value == 0.0:
                raise ZeroDivisionError("division by constant zero")
            return _mul(self, _const(1.0 / other.value))
        return _mul(self, _unary(RECIP, other))

    def __rtruediv__(self, other):
        return _mul(as_expr(other), _unary(RECIP, self))

    def __neg__(self):
        return _unary(NEG, self)

    def __pos__(self):
        return self

    def __pow__(self, exponent):
        if isinstance(exponent, Expr):
            if exponent.op != CONST:
                raise TypeError("only constant exponents are supported")
            exponent = exponent.value
        exponent = float(exponent)
        if exponent == 1.0:
            return self
        if exponent == 0.0:
            return _const(1.0)
        if exponent == 2.0:
            return _mul(self, self)
        if exponent == -1.0:
            return _unary(RECIP, self)
        return _unary(POW, self, exponent)

    # numpy ufunc hooks on object arrays ----------------------------------
    def sin(self):
        return _unary(SIN, self)

    def cos(self):
        return _unary(COS, self)

    def tan(self):
        return _unary(TAN, self)

    def exp(self):
        return _unary(EXP, self)

    def log(self):
        return _unary(LOG, self)

    def sqrt(self):
        return _unary(SQRT, self)

    def square(self):
        return _mul(self, self)


def _const(value: float) -> Expr:
    return Expr(CONST, (), float(value))


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return _const(float(x))
    if isinstance(x, np.ndarray) and x.ndim == 0:
        return as_expr(x.item())
    raise TypeError(f"cannot convert {type(x).__name__} to Expr")


def _numeric_unary(op: int, a: float, c) -> float:
    with np.errstate(all="raise"):
        if op == NEG:
            return -a
        if op == RECIP:
            return 1.0 / a
        if op == POW:
            return a ** c
        return float({SIN: np.sin, COS: np.cos, TAN: np.tan, EXP: np.exp,
                      LOG: np.log, SQRT: np.sqrt}[op](a))


def _unary(op: int, a: Expr, c=None) -> Expr:
    if a.op == CONST:
        return _const(_numeric_unary(op, a.value, c))
    if op == NEG and a.op == NEG:
        return a.args[0]
    return Expr(op, (a,), c)


def _add(a: Expr, b: Expr) -> Expr:
    if a.op == CONST and b.op == CONST:
        return _const(a.value + b.value)
    if a.op == CONST and a.value == 0.0:
        return b
    if b.op == CONST and b.value == 0.0:
        return a
    return Expr(ADD, (a, b))


def _sub(a: Expr, b: Expr) -> Expr:
    if a.op == CONST and b.op == CONST:
        return _const(a.value - b.value)
    if b.op == CONST and b.value == 0.0:
        return a
    if a.op == CONST and a.value == 0.0:
        return _unary(NEG, b)
    return Expr(SUB, (a, b))


def _mul(a: Expr, b: Expr) -> Expr:
    if a.op == CONST and b.op == CONST:
        return _const(a.value * b.value)
    for p, q in ((a, b), (b, a)):
        if p.op == CONST:
            if p.value == 0.0:
                return p
            if p.value == 1.0:
                return q
            if p.value == -1.0:
                return _unary(NEG, q)
    return Expr(MUL, (a, b))


def symbols(n: int, offset: int = 0) -> np.ndarray:
    """Object array of ``n`` fresh input variables numbered from ``offset``."""
    out = np.empty(n, dtype=object)
    for i in range(n):
        out[i] = Expr(VAR, (), offset + i)
    return out


def _as_output_list(result) -> list[Expr]:
    if isinstance(result, (Expr, int, float, np.floating)):
        return [as_expr(result)]
    arr = np.asarray(result, dtype=object).ravel()
    return [as_expr(v) for v in arr]


@dataclass(frozen=True)
class DerivativeBundle:
    """Value, Jacobian and weight-contracted Hessian at one or many points."""

    value: np.ndarray
    jacobian: np.ndarray | None = None
    weighted_hessian: np.ndarray | None = None


class Function:
    """An immutable, compiled expression DAG with named vector inputs.

    Parameters
    ----------
    name : str
        Label used in error messages.
    inputs : sequence of (name, dim)
        Declared inputs; their concatenation is the evaluation point.
    outputs : sequence of Expr
        Output expressions in terms of the variables created by :func:`symbols`
        (variable ``i`` is entry ``i`` of the concatenated input).
    """

    def __init__(self, name: str, inputs: Sequence[tuple[str, int]], outputs: Sequence):
        self.name = name
        self.inputs = tuple((str(n), int(d)) for n, d in inputs)
        self.n_in = sum(d for _, d in self.inputs)
        outs = [as_expr(o) for o in outputs]
        self.n_out = len(outs)
        self._compile(outs)

    @classmethod
    def from_callable(cls, name: str, fn: Callable, inputs: Sequence[tuple[str, int]]) -> "Function":
        args, offset = [], 0
        for _, dim in inputs:
            args.append(symbols(dim, offset))
            offset += dim
        return cls(name, inputs, _as_output_list(fn(*args)))

    def _compile(self, outputs: list[Expr]) -> None:
        index: dict[int, int] = {}
        prog: list[tuple[int, tuple[int, ...], object]] = []
        for root in outputs:
            if id(root) in index:
                continue
            stack = [(root, False)]
            while stack:
                node, expanded = stack.pop()
                if id(node) in index:
                    continue
                if expanded or not node.args:
                    if node.op == VAR and not 0 <= node.value < self.n_in:
                        raise ValueError(f"{self.name}: variable {node.value} outside input range")
                    index[id(node)] = len(prog)
                    prog.append((node.op, tuple(index[id(a)] for a in node.args), node.value))
                    continue
                stack.append((node, True))
                for a in reversed(node.args):
                    if id(a) not in index:
                        stack.append((a, False))
        self._prog = tuple(prog)
        self._out = tuple(index[id(o)] for o in outputs)
        last = [-1] * len(prog)
        for i, (_, args, _) in enumerate(prog):
            for a in args:
                last[a] = i
        for o in self._out:
            last[o] = len(prog)
        # nodes whose storage can be dropped right after node i
        release: list[list[int]] = [[] for _ in prog]
        for j, lu in enumerate(last):
            if 0 <= lu < len(prog):
                release[lu].append(j)
        self._release = tuple(tuple(r) for r in release)

    def dependencies(self) -> np.ndarray:
        """Boolean ``(n_out, n_in)`` structural sparsity: which inputs each output reads."""
        masks: list[int] = []
        for op, args, c in self._prog:
            if op == VAR:
                masks.append(1 << int(c))
            else:
                m = 0
                for a in args:
                    m |= masks[a]
                masks.append(m)
        out = np.zeros((self.n_out, self.n_in), dtype=bool)
        for k, o in enumerate(self._out):
            m = masks[o]
            out[k] = [(m >> j) & 1 for j in range(self.n_in)]
        return out

    @property
    def n_nodes(self) -> int:
        return len(self._prog)

    def __repr__(self) -> str:
        ins = ", ".join(f"{n}[{d}]" for n, d in self.inputs)
        return f"Function({self.name}: ({ins}) -> {self.n_out}, {self.n_nodes} nodes)"

    # symbolic composition -------------------------------------------------
    def call(self, *args) -> np.ndarray:
        """Inline this function into a new graph; returns an object array."""
        flat = self._split_args(args, symbolic=True)
        nodes: list[Expr] = []
        for op, a, c in self._prog:
            if op == VAR:
                nodes.append(flat[c])
            elif op == CONST:
                nodes.append(_const(c))
            elif op == ADD:
                nodes.append(_add(nodes[a[0]], nodes[a[1]]))
            elif op == SUB:
                nodes.append(_sub(nodes[a[0]], nodes[a[1]]))
            elif op == MUL:
                nodes.append(_mul(nodes[a[0]], nodes[a[1]]))
            else:
                nodes.append(_unary(op, nodes[a[0]], c))
        out = np.empty(self.n_out, dtype=object)
        for i, o in enumerate(self._out):
            out[i] = nodes[o]
        return out

    def _split_args(self, args, symbolic: bool):
        if len(args) == 1 and len(self.inputs) != 1:
            flat = list(np.asarray(args[0], dtype=object if symbolic else float).ravel())
        else:
            if len(args) != len(self.inputs):
                raise ValueError(f"{self.name}: expected {len(self.inputs)} arguments, got {len(args)}")
            flat = []
            for (nm, dim), a in zip(self.inputs, args):
                arr = np.asarray(a, dtype=object if symbolic else float).ravel()
                if arr.size != dim:
                    raise ValueError(f"{self.name}: input {nm} has dimension {dim}, got {arr.size}")
                flat.extend(arr)
        if len(flat) != self.n_in:
            raise ValueError(f"{self.name}: point has dimension {len(flat)}, expected {self.n_in}")
        if symbolic:
            flat = [as_expr(v) for v in flat]
        return flat

    def __call__(self, *args):
        """Numeric evaluation on separate inputs, or symbolic inlining if any
        argument holds expressions."""
        def has_expr(a):
            if isinstance(a, Expr):
                return True
            arr = np.asarray(a)
            return arr.dtype == object and any(isinstance(v, Expr) for v in arr.ravel())
        if any(has_expr(a) for a in args):
            return self.call(*args)
        return self.eval(np.concatenate([np.atleast_1d(np.asarray(a, float)).ravel() for a in args]))

    # numeric evaluation ---------------------------------------------------
    def _point(self, point) -> tuple[np.ndarray, bool]:
        X = np.asarray(point, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: point has shape {np.shape(point)}, expected (..., {self.n_in})")
        return X, single

    def eval(self, point) -> np.ndarray:
        X, single = self._point(point)
        v = self._forward(X, 0, 0)[0]
        return v[0] if single else v

    def jacobian(self, point, n_diff: int | None = None) -> np.ndarray:
        """Exact Jacobian w.r.t. the first ``n_diff`` inputs (default: all)."""
        return self.derivatives(point, order=1, n_diff=n_diff).jacobian

    def weighted_hessian(self, point, weight, n_diff: int | None = None) -> np.ndarray:
        """Symmetric matrix sum_i weight_i * Hessian(output_i)."""
        return self.derivatives(point, order=2, weight=weight, n_diff=n_diff).weighted_hessian

    def derivatives(self, point, order: int = 1, weight=None, n_diff: int | None = None) -> DerivativeBundle:
        X, single = self._point(point)
        n_diff = self.n_in if n_diff is None else int(n_diff)
        if order >= 2:
            if weight is None:
                if self.n_out != 1:
                    raise ValueError(f"{self.name}: weight required for vector-valued Hessian")
                weight = np.ones(self.n_out)
            W = np.asarray(weight, dtype=float)
            if W.ndim == 1:
                W = np.broadcast_to(W, (X.shape[0], W.size))
            if W.shape != (X.shape[0], self.n_out):
                raise ValueError(f"{self.name}: weight has shape {np.shape(weight)}, expected ({self.n_out},)")
        else:
            W = None
        val, jac, hess = self._forward(X, order, n_diff, W)
        if single:
            val = val[0]
            jac = None if jac is None else jac[0]
            hess = None if hess is None else hess[0]
        return DerivativeBundle(val, jac, hess)

    def _forward(self, X: np.ndarray, order: int, n_diff: int, W=None):
        B = X.shape[0]
        n_nodes = len(self._prog)
        vals: list = [None] * n_nodes
        grads: list = [None] * n_nodes
        hess: list = [None] * n_nodes
        release = self._release
        want_g = order >= 1
        want_h = order >= 2
        with np.errstate(all="ignore"):
            for i, (op, args, c) in enumerate(self._prog):
                if op == VAR:
                    vals[i] = X[:, c]
                    if want_g and c < n_diff:
                        g = np.zeros((B, n_diff))
                        g[:, c] = 1.0
                        grads[i] = g
                elif op == CONST:
                    vals[i] = c
                elif op == ADD or op == SUB:
                    a, b = args
                    sign = 1.0 if op == ADD else -1.0
                    vals[i] = vals[a] + sign * vals[b]
                    if want_g:
                        grads[i] = _lin(grads[a], grads[b], sign)
                        if want_h:
                            hess[i] = _lin(hess[a], hess[b], sign)
                elif op == MUL:
                    a, b = args
                    va, vb = vals[a], vals[b]
                    vals[i] = va * vb
                    if want_g:
                        ga, gb = grads[a], grads[b]
                        grads[i] = _sum(_scale(ga, vb, 1), _scale(gb, va, 1))
                        if want_h:
                            h = _sum(_scale(hess[a], vb, 2), _scale(hess[b], va, 2))
                            if ga is not None and gb is not None:
                                cross = ga[:, :, None] * gb[:, None, :]
                                cross = cross + cross.transpose(0, 2, 1)
                                h = cross if h is None else h + cross
                            hess[i] = h
                else:
                    (a,) = args
                    va = vals[a]
                    v, d1, d2 = _unary_derivs(op, va, c, i)
                    vals[i] = v
                    if want_g and grads[a] is not None:
                        ga = grads[a]
                        grads[i] = _scale(ga, d1, 1)
                        if want_h:
                            h = _scale(hess[a], d1, 2)
                            if d2 is not None:
                                outer = _scale(ga[:, :, None] * ga[:, None, :], d2, 2)
                                h = outer if h is None else h + outer
                            hess[i] = h
                for j in release[i]:
                    vals[j] = grads[j] = hess[j] = None

        m = self.n_out
        value = np.empty((B, m))
        for k, o in enumerate(self._out):
            value[:, k] = vals[o]
        jac = None
        if want_g:
            jac = np.zeros((B, m, n_diff))
            for k, o in enumerate(self._out):
                if grads[o] is not None:
                    jac[:, k, :] = grads[o]
        H = None
        if want_h:
            H = np.zeros((B, n_diff, n_diff))
            for k, o in enumerate(self._out):
                if hess[o] is not None:
                    H += W[:, k, None, None] * hess[o]
            H = 0.5 * (H + H.transpose(0, 2, 1))
        if not np.all(np.isfinite(value)):
            bad = int(np.argmin(np.isfinite(value).all(0)))
            raise DomainError(f"{self.name}: non-finite output {bad}", self._out[bad])
        return value, jac, H


def _lin(a, b, sign):
    if a is None:
        return None if b is None else (b if sign > 0 else -b)
    if b is None:
        return a
    return a + b if sign > 0 else a - b


def _sum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _scale(g, s, extra_dims: int):
    if g is None:
        return None
    if isinstance(s, np.ndarray):
        s = s.reshape(s.shape + (1,) * extra_dims)
    elif s == 0.0:
        return None
    return g * s


def _unary_derivs(op: int, a, c, node: int):
    """Value, first and second derivative of a scalar unary op."""
    if op == NEG:
        return -a, -1.0, None
    if op == RECIP:
        if np.any(a == 0.0):
            raise DomainError("division by zero", node)
        r = 1.0 / a
        return r, -r * r, 2.0 * r * r * r
    if op == POW:
        if float(c).is_integer():
            if c < 0 and np.any(a == 0.0):
                raise DomainError("negative power of zero", node)
        elif np.any(a <= 0.0):
            raise DomainError("fractional power of non-positive base", node)
        return a ** c, c * a ** (c - 1.0), c * (c - 1.0) * a ** (c - 2.0)
    if op == SIN:
        s = np.sin(a)
        return s, np.cos(a), -s
    if op == COS:
        co = np.cos(a)
        return co, -np.sin(a), -co
    if op == TAN:
        co = np.cos(a)
        if np.any(np.abs(co) < _TAN_POLE_TOL):
            raise DomainError("tan evaluated at a pole", node)
        t = np.tan(a)
        sec2 = 1.0 + t * t
        return t, sec2, 2.0 * t * sec2
    if op == EXP:
        e = np.exp(a)
        return e, e, e
    if op == LOG:
        if np.any(a <= 0.0):
            raise DomainError("log of non-positive value", node)
        r = 1.0 / a
        return np.log(a), r, -r * r
    if op == SQRT:
        if np.any(a <= 0.0):
            raise DomainError("sqrt of non-positive value", node)
        s = np.sqrt(a)
        return s, 0.5 / s, -0.25 / (s * a)
    raise ValueError(f"unknown op {op}")


def evaluate(f: Function, point) -> np.ndarray:
    return f.eval(point)


def jacobian(f: Function, point) -> np.ndarray:
    return f.jacobian(point)


def weighted_hessian(f: Function, point, weight) -> np.ndarray:
    return f.weighted_hessian(point, weight)
