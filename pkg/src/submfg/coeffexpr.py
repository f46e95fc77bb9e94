"""Arithmetic expressions for user-defined coefficients.

Expressions are written over the variables ``t``, ``x1..xd``, ``a1..ak``,
``m1..mJ`` and ``y1..yd`` and support ``+ - * /``, integer powers ``^``, the
unary functions ``exp``, ``tanh``, ``abs`` and the calls ``min``, ``max``,
``clamp(e, lo, hi)``.  Parsed trees can be evaluated on scalars or on numpy
arrays (elementwise) and differentiated symbolically.

Precedence, from tightest to loosest: ``^``, unary ``-``, ``* /``, ``+ -``.
So ``-x1^2`` is ``-(x1^2)`` and ``2*-3`` is ``2*(-3)``.

Kinks: ``min``/``max``/``clamp`` differentiate through their first argument
at ties and ``abs`` is treated as ``max(u, -u)``, so ``d abs(u)`` at ``u = 0``
is ``u'``.  Derivatives of kinked functions are expressed with the internal
indicator ``le(u, v)`` (1 if ``u <= v`` else 0), which is also accepted by the
parser so that printed derivatives parse back.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Const", "Var", "Neg", "BinOp", "Pow", "Call",
    "Dims", "EvalContext", "ExprError", "ExprSyntaxError",
    "parse_expr", "eval_expr", "diff_expr", "to_source", "variables_of",
    "is_constant", "CompiledExpr", "compile_expr",
]

Number = Union[float, np.ndarray]

# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # one of "t", "x", "a", "m", "y"
    index: int = 0  # 1-based; 0 for t

    @property
    def name(self) -> str:
        return "t" if self.kind == "t" else f"{self.kind}{self.index}"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # "+", "-", "*", "/"
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Union[Const, Var, Neg, BinOp, Pow, Call]

_ARITY = {"exp": 1, "tanh": 1, "abs": 1, "min": 2, "max": 2, "clamp": 3, "le": 2}


@dataclass(frozen=True)
class Dims:
    """Declared dimensions: state ``d``, control ``k``, summaries ``J``."""

    d: int = 1
    k: int = 1
    J: int = 0

    def limit(self, kind: str) -> int:
        return {"x": self.d, "y": self.d, "a": self.k, "m": self.J}[kind]


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    """Parse failure with a 1-based position.

    Attributes:
        line, column: position of the offending token.
        expected: tokens that would have been accepted there (may be empty).
    """

    def __init__(self, message: str, line: int, column: int, expected: Sequence[str] = ()):
        self.line = line
        self.column = column
        self.expected = tuple(sorted(set(expected)))
        self.bare_message = message
        text = f"line {line}, column {column}: {message}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(text)


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r"|(?P<ws>\s+)"
)
_VAR_RE = re.compile(r"^([xamy])(\d+)$")


@dataclass
class _Token:
    kind: str  # "num", "ident", "op", "end"
    text: str
    pos: int


def _line_col(source: str, pos: int) -> tuple[int, int]:
    line = source.count("\n", 0, pos) + 1
    col = pos - (source.rfind("\n", 0, pos) + 1) + 1
    return line, col


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(source):
        match = _TOKEN_RE.match(source, pos)
        if match is None:
            line, col = _line_col(source, pos)
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", line, col)
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, match.group(), pos))
        pos = match.end()
    tokens.append(_Token("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, dims: Dims):
        self.source = source
        self.dims = dims
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def error(self, message: str, expected: Sequence[str] = (), tok: _Token | None = None):
        tok = tok or self.tok
        line, col = _line_col(self.source, tok.pos)
        raise ExprSyntaxError(message, line, col, expected)

    def expect(self, text: str) -> _Token:
        if self.tok.text != text or self.tok.kind == "end":
            found = "end of input" if self.tok.kind == "end" else repr(self.tok.text)
            self.error(f"unexpected {found}", [text])
        tok = self.tok
        self.i += 1
        return tok

    def parse(self) -> Expr:
        if self.tok.kind == "end":
            self.error("empty expression", ["number", "variable", "(", "-"])
        node = self.expr()
        if self.tok.kind != "end":
            self.error(f"unexpected {self.tok.text!r}", ["+", "-", "*", "/", "^", "end of input"])
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.i += 1
            nxt = self.tokens[self.i + 1] if self.i + 1 < len(self.tokens) else None
            # "-3" is a negative literal unless a power binds the literal first
            if self.tok.kind == "num" and not (nxt is not None and nxt.text == "^"):
                value = float(self.tok.text)
                self.i += 1
                return Const(-value)
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.i += 1
            sign = 1
            if self.tok.text == "-":
                sign = -1
                self.i += 1
            tok = self.tok
            if tok.kind != "num" or not re.fullmatch(r"\d+", tok.text):
                self.error("exponent must be an integer literal", ["integer"])
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "^":
                self.error("chained exponents are not supported; use parentheses", [])
            return Pow(base, sign * int(tok.text))
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Const(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "ident":
            self.i += 1
            name = tok.text
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(name, tok)
            return self.variable(name, tok)
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        self.error(f"unexpected {found}", ["number", "variable", "function", "("])

    def variable(self, name: str, tok: _Token) -> Var:
        if name == "t":
            return Var("t", 0)
        match = _VAR_RE.match(name)
        if match is None:
            if name in _ARITY:
                self.error(f"function {name!r} requires arguments", ["("])
            self.error(f"unknown identifier {name!r}", ["t", "x<i>", "a<i>", "m<i>", "y<i>"], tok)
        kind, index = match.group(1), int(match.group(2))
        if not 1 <= index <= self.dims.limit(kind):
            self.error(f"variable index out of range: {name} (declared {kind}1..{kind}{self.dims.limit(kind)})",
                       [], tok)
        return Var(kind, index)

    def call(self, name: str, tok: _Token) -> Call:
        if name not in _ARITY:
            self.error(f"unknown function {name!r}", sorted(_ARITY), tok)
        self.expect("(")
        args = [self.expr()]
        while self.tok.text == ",":
            self.i += 1
            args.append(self.expr())
        self.expect(")")
        if len(args) != _ARITY[name]:
            self.error(f"{name} takes {_ARITY[name]} argument(s), got {len(args)}", [], tok)
        return Call(name, tuple(args))


def parse_expr(source: str, dims: Dims | tuple = Dims()) -> Expr:
    """Parse ``source`` into an expression tree.

    Args:
        source: expression text; may span lines.
        dims: ``Dims`` or a ``(d, k, J)`` tuple bounding variable indices.

    Raises:
        ExprSyntaxError: on malformed input or out-of-range variables.
    """
    if not isinstance(dims, Dims):
        dims = Dims(*dims)
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 1, 1, ["number", "variable", "(", "-"])
    return _Parser(source, dims).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node: Expr) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    if isinstance(node, Const) and node.value < 0:
        return 3
    return 5


def _fmt_number(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def to_source(node: Expr) -> str:
    """Print ``node`` so that ``parse_expr(to_source(node))`` rebuilds it."""
    if isinstance(node, Const):
        if not math.isfinite(node.value):
            raise ExprError(f"cannot print non-finite constant {node.value}")
        if node.value < 0 or (node.value == 0 and math.copysign(1.0, node.value) < 0):
            return f"(-{_fmt_number(-node.value)})"
        return _fmt_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        # a bare positive literal would be re-read as a negative constant
        if _prec(node.operand) < 3 or (isinstance(node.operand, Const) and node.operand.value >= 0):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = to_source(node.base)
        atomic = isinstance(node.base, (Var, Call, Const))
        if not atomic:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, BinOp):
        prec = _PREC[node.op]
        left = to_source(node.left)
        right = to_source(node.right)
        if _prec(node.left) < prec:
            left = f"({left})"
        if _prec(node.right) <= prec:
            right = f"({right})"
        sep = f" {node.op} " if prec == 1 else node.op
        return f"{left}{sep}{right}"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalContext:
    """Variable values; array entries broadcast elementwise.

    ``x``, ``a``, ``m``, ``y`` carry their coordinate on the last axis.
    """

    t: Number = 0.0
    x: np.ndarray | Sequence[float] = ()
    a: np.ndarray | Sequence[float] = ()
    m: np.ndarray | Sequence[float] = ()
    y: np.ndarray | Sequence[float] = ()
    flags: set = field(default_factory=set)

    def lookup(self, var: Var) -> Number:
        if var.kind == "t":
            return self.t
        arr = np.asarray(getattr(self, var.kind), dtype=float)
        if arr.ndim == 0 or arr.shape[-1] < var.index:
            raise ExprError(f"context has no value for {var.name}")
        return arr[..., var.index - 1]


def _is_scalar(*vals) -> bool:
    return all(np.ndim(v) == 0 for v in vals)


def eval_expr(node: Expr, ctx: EvalContext) -> Number:
    """Evaluate in IEEE double precision.

    Division by zero yields ``inf``/``nan`` and adds ``"division by zero"`` to
    ``ctx.flags``; an exact tie at a kink adds ``"kink"``.
    """
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return ctx.lookup(node)
    if isinstance(node, Neg):
        return -eval_expr(node.operand, ctx)
    if isinstance(node, BinOp):
        left = eval_expr(node.left, ctx)
        right = eval_expr(node.right, ctx)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if np.any(np.asarray(right) == 0):
            ctx.flags.add("division by zero")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(left, right) if not _is_scalar(left, right) else _scalar_div(left, right)
    if isinstance(node, Pow):
        base = eval_expr(node.base, ctx)
        if node.exponent < 0:
            if np.any(np.asarray(base) == 0):
                ctx.flags.add("division by zero")
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = np.divide(1.0, base) if not _is_scalar(base) else _scalar_div(1.0, base)
            return inv ** (-node.exponent)
        return base ** node.exponent
    if isinstance(node, Call):
        args = [eval_expr(a, ctx) for a in node.args]
        f = node.func
        if f == "exp":
            with np.errstate(over="ignore"):
                return np.exp(args[0]) if not _is_scalar(*args) else _scalar_exp(args[0])
        if f == "tanh":
            return np.tanh(args[0]) if not _is_scalar(*args) else math.tanh(args[0])
        if f == "abs":
            if np.any(np.asarray(args[0]) == 0):
                ctx.flags.add("kink")
            return np.abs(args[0]) if not _is_scalar(*args) else abs(args[0])
        if f in ("min", "max"):
            if np.any(np.asarray(args[0]) == np.asarray(args[1])):
                ctx.flags.add("kink")
            fn = np.minimum if f == "min" else np.maximum
            out = fn(args[0], args[1])
            return float(out) if _is_scalar(*args) else out
        if f == "clamp":
            v, lo, hi = args
            if np.any(np.asarray(v) == np.asarray(lo)) or np.any(np.asarray(v) == np.asarray(hi)):
                ctx.flags.add("kink")
            out = np.minimum(np.maximum(v, lo), hi)
            return float(out) if _is_scalar(*args) else out
        if f == "le":
            out = np.where(np.asarray(args[0]) <= np.asarray(args[1]), 1.0, 0.0)
            return float(out) if _is_scalar(*args) else out
    raise TypeError(f"not an expression node: {node!r}")


def _scalar_div(a: float, b: float) -> float:
    try:
        return a / b
    except ZeroDivisionError:
        if a == 0 or math.isnan(a):
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)


def _scalar_exp(v: float) -> float:
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(node: Expr, value: float | None = None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


def _add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(b) and not _is_const(a):
        a, b = b, a
    if _is_const(a) and isinstance(b, BinOp) and b.op == "*" and _is_const(b.left):
        return _mul(Const(a.value * b.left.value), b.right)
    return BinOp("*", a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return BinOp("/", a, b)


def _neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(-a.value) if a.value != 0 else ZERO
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def _pow(base: Expr, n: int) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return base
    return Pow(base, n)


def _select(cond_le: tuple[Expr, Expr], if_true: Expr, if_false: Expr) -> Expr:
    """``le(u, v) * if_true + (1 - le(u, v)) * if_false`` with simplification."""
    if if_true == if_false:
        return if_true
    ind = Call("le", cond_le)
    return _add(_mul(ind, if_true), _mul(_sub(ONE, ind), if_false))


def _resolve_var(var: Union[str, Var]) -> Var:
    if isinstance(var, Var):
        return var
    if var == "t":
        return Var("t", 0)
    match = _VAR_RE.match(var)
    if match is None:
        raise ExprError(f"not a variable name: {var!r}")
    return Var(match.group(1), int(match.group(2)))


def diff_expr(node: Expr, var: Union[str, Var]) -> Expr:
    """Symbolic partial derivative of ``node`` with respect to ``var``."""
    v = _resolve_var(var)
    return _diff(node, v)


def _diff(node: Expr, v: Var) -> Expr:
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if node == v else ZERO
    if isinstance(node, Neg):
        return _neg(_diff(node.operand, v))
    if isinstance(node, BinOp):
        da, db = _diff(node.left, v), _diff(node.right, v)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, node.right), _mul(node.left, db))
        # (u/w)' = u'/w - u w'/w^2
        return _sub(_div(da, node.right), _div(_mul(node.left, db), _pow(node.right, 2)))
    if isinstance(node, Pow):
        du = _diff(node.base, v)
        if _is_const(du, 0.0):
            return ZERO
        return _mul(_mul(Const(float(node.exponent)), _pow(node.base, node.exponent - 1)), du)
    if isinstance(node, Call):
        f, args = node.func, node.args
        if f == "exp":
            return _mul(node, _diff(args[0], v))
        if f == "tanh":
            return _mul(_sub(ONE, _pow(node, 2)), _diff(args[0], v))
        if f == "abs":
            u = args[0]
            du = _diff(u, v)
            # abs(u) = max(u, -u); tie goes to the first branch
            return _select((_neg(u), u), du, _neg(du))
        if f == "min":
            u, w = args
            return _select((u, w), _diff(u, v), _diff(w, v))
        if f == "max":
            u, w = args
            return _select((w, u), _diff(u, v), _diff(w, v))
        if f == "clamp":
            u, lo, hi = args
            du, dlo, dhi = _diff(u, v), _diff(lo, v), _diff(hi, v)
            inner = _select((lo, u), du, dlo)  # max(u, lo)
            return _select((Call("max", (u, lo)), hi), inner, dhi)  # min(., hi)
        if f == "le":
            return ZERO
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Utilities
# ---------------------------------------------------------------------------


def variables_of(node: Expr) -> set:
    if isinstance(node, Var):
        return {node}
    if isinstance(node, Const):
        return set()
    if isinstance(node, Neg):
        return variables_of(node.operand)
    if isinstance(node, BinOp):
        return variables_of(node.left) | variables_of(node.right)
    if isinstance(node, Pow):
        return variables_of(node.base)
    if isinstance(node, Call):
        out = set()
        for arg in node.args:
            out |= variables_of(arg)
        return out
    raise TypeError(f"not an expression node: {node!r}")


def is_constant(node: Expr) -> bool:
    return not variables_of(node)


class CompiledExpr:
    """A parsed expression bound to its dimensions, callable on arrays.

    ``f(t=..., x=..., a=..., m=..., y=...)`` evaluates with broadcasting and
    always returns a float array shaped like the broadcast batch.
    """

    def __init__(self, source: str, dims: Dims | tuple, ast: Expr | None = None):
        self.dims = dims if isinstance(dims, Dims) else Dims(*dims)
        self.source = source
        self.ast = ast if ast is not None else parse_expr(source, self.dims)

    def __call__(self, t=0.0, x=(), a=(), m=(), y=()) -> np.ndarray:
        ctx = EvalContext(t=t, x=x, a=a, m=m, y=y)
        value = eval_expr(self.ast, ctx)
        shape = _batch_shape(t, x, a, m, y)
        return np.broadcast_to(np.asarray(value, dtype=float), shape).copy()

    def diff(self, var: Union[str, Var]) -> "CompiledExpr":
        ast = diff_expr(self.ast, var)
        return CompiledExpr(to_source(ast), self.dims, ast)

    @property
    def is_constant(self) -> bool:
        return is_constant(self.ast)

    def __repr__(self) -> str:
        return f"CompiledExpr({self.source!r})"


def _batch_shape(t, x, a, m, y) -> tuple:
    shapes = [np.shape(t)]
    for arr in (x, a, m, y):
        shp = np.shape(arr)
        if len(shp) >= 1:
            shapes.append(shp[:-1])
    return np.broadcast_shapes(*shapes)


def compile_expr(source: str, dims: Dims | tuple) -> CompiledExpr:
    return CompiledExpr(source, dims)


def substitute(node: Expr, mapping: Mapping[Var, Expr]) -> Expr:
    """Replace variables by expressions (used to freeze arguments)."""
    if isinstance(node, Var):
        return mapping.get(node, node)
    if isinstance(node, Const):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, mapping))
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    if isinstance(node, Pow):
        return Pow(substitute(node.base, mapping), node.exponent)
    if isinstance(node, Call):
        return Call(node.func, tuple(substitute(a, mapping) for a in node.args))
    raise TypeError(f"not an expression node: {node!r}")
