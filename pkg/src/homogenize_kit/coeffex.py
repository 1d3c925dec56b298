"""Coefficient expression mini-language.

Problem definitions write their coefficients as small arithmetic formulas,
e.g. ``"sqrt(2/(2+tanh(x1)))"``.  This module tokenizes and parses them
with a Pratt parser into an immutable AST, prints them back, and evaluates
them either on scalars (``evaluate``) or elementwise on numpy arrays
(``evaluate_array`` / ``bind``).

Grammar::

    expr   := literal | variable | func "(" args ")" | "(" expr ")"
            | "-" expr | expr op expr
    op     := "+" | "-" | "*" | "/" | "^"

``^`` binds tighter than unary minus, which binds tighter than ``*`` and
``/``, which bind tighter than ``+`` and ``-``.  ``^`` is right-associative,
the other binary operators are left-associative.
"""
from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Union

import numpy as np

__all__ = [
    "Num", "Var", "Unary", "Binary", "Call", "Expr",
    "CoeffexError", "FUNCTIONS", "parse", "to_source", "evaluate",
    "evaluate_array", "bind", "free_vars", "slot_vars", "is_valid_variable",
]


class CoeffexError(ValueError):
    """Parse or evaluation failure.

    ``kind`` is one of ``"syntax"``, ``"unknown_identifier"``,
    ``"disallowed_variable"``, ``"arity"`` or ``"domain"``; ``pos`` is the
    byte offset into the source (``None`` for evaluation errors); ``index``
    locates the first bad element of a domain error.
    """

    def __init__(self, kind: str, message: str, pos: int | None = None, index=None):
        self.kind = kind
        self.pos = pos
        self.index = index
        where = f" at offset {pos}" if pos is not None else ""
        super().__init__(f"{kind}{where}: {message}")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Expr = Union[Num, Var, Unary, Binary, Call]

# name -> arity
FUNCTIONS = {
    "sin": 1, "cos": 1, "tanh": 1, "exp": 1, "sqrt": 1, "abs": 1,
    "min": 2, "max": 2,
}

_VAR_RE = re.compile(r"^(x1|y|t|x2_[1-9][0-9]*|z_(0|[1-9][0-9]*))$")


def is_valid_variable(name: str) -> bool:
    return bool(_VAR_RE.match(name))


def slot_vars(d: int, *, yz: bool = False, time: bool = False) -> frozenset:
    """Variables legal in a coefficient slot for slow dimension ``d``."""
    names = {"x1"} | {f"x2_{i}" for i in range(1, d + 1)}
    if yz:
        names |= {"y"} | {f"z_{i}" for i in range(d + 1)}
    if time:
        names.add("t")
    return frozenset(names)


# ---------------------------------------------------------------- tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num, name, op, end
    text: str
    pos: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise CoeffexError("syntax", f"unexpected character {source[pos]!r}",
                               _byte_offset(source, pos))
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), _byte_offset(source, pos)))
        pos = m.end()
    toks.append(_Tok("end", "", _byte_offset(source, len(source))))
    return toks


def _byte_offset(source: str, char_pos: int) -> int:
    return len(source[:char_pos].encode("utf-8"))


# ------------------------------------------------------------------- parser

# binding powers
_BP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_UNARY_BP = 30


class _Parser:
    def __init__(self, source: str, allowed: frozenset | None):
        self.toks = _tokenize(source)
        self.i = 0
        self.allowed = allowed

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text or tok.kind != "op":
            got = tok.text or "end of input"
            raise CoeffexError("syntax", f"expected {text!r}, got {got!r}", tok.pos)
        return tok

    def expression(self, rbp: int = 0) -> Expr:
        left = self.nud(self.next())
        while True:
            tok = self.peek()
            if tok.kind != "op" or tok.text not in _BP:
                return left
            lbp = _BP[tok.text]
            if lbp <= rbp:
                return left
            self.next()
            # right-associative ^ parses its right side one notch lower
            right = self.expression(lbp - 1 if tok.text == "^" else lbp)
            left = Binary(tok.text, left, right)

    def nud(self, tok: _Tok) -> Expr:
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "op" and tok.text == "-":
            return Unary("-", self.expression(_UNARY_BP))
        if tok.kind == "op" and tok.text == "(":
            inner = self.expression()
            self.expect(")")
            return inner
        if tok.kind == "name":
            return self.name(tok)
        got = tok.text or "end of input"
        raise CoeffexError("syntax", f"unexpected {got!r}", tok.pos)

    def name(self, tok: _Tok) -> Expr:
        if tok.text in FUNCTIONS:
            if not (self.peek().kind == "op" and self.peek().text == "("):
                raise CoeffexError("syntax", f"function {tok.text!r} needs arguments", tok.pos)
            self.next()
            args = []
            if not (self.peek().kind == "op" and self.peek().text == ")"):
                args.append(self.expression())
                while self.peek().kind == "op" and self.peek().text == ",":
                    self.next()
                    args.append(self.expression())
            self.expect(")")
            if len(args) != FUNCTIONS[tok.text]:
                raise CoeffexError(
                    "arity",
                    f"{tok.text} takes {FUNCTIONS[tok.text]} argument(s), got {len(args)}",
                    tok.pos)
            return Call(tok.text, tuple(args))
        if not is_valid_variable(tok.text):
            raise CoeffexError("unknown_identifier", f"unknown identifier {tok.text!r}", tok.pos)
        if self.allowed is not None and tok.text not in self.allowed:
            raise CoeffexError("disallowed_variable",
                               f"variable {tok.text!r} is not allowed here", tok.pos)
        return Var(tok.text)


def parse(source: str, allowed_vars: Iterable[str] | None = None) -> Expr:
    """Parse ``source`` into an :data:`Expr`.

    ``allowed_vars`` restricts which variables may appear; ``None`` accepts
    any well-formed variable name.
    """
    if not source or not source.strip():
        raise CoeffexError("syntax", "empty expression", 0)
    allowed = frozenset(allowed_vars) if allowed_vars is not None else None
    p = _Parser(source, allowed)
    e = p.expression()
    tok = p.peek()
    if tok.kind != "end":
        raise CoeffexError("syntax", f"unexpected {tok.text!r}", tok.pos)
    return e


# ------------------------------------------------------------------ printer

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_UNARY_PREC = 3
_ATOM_PREC = 5


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary):
        return _UNARY_PREC
    if isinstance(e, Num) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _UNARY_PREC
    return _ATOM_PREC


def to_source(e: Expr) -> str:
    """Print ``e`` with the minimum parentheses needed to re-parse it."""
    if isinstance(e, Num):
        if not math.isfinite(e.value):
            raise CoeffexError("syntax", f"cannot print non-finite literal {e.value}")
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    if isinstance(e, Unary):
        inner = to_source(e.operand)
        if _prec(e.operand) < _UNARY_PREC:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[e.op]
    left, right = to_source(e.left), to_source(e.right)
    lp, rp = _prec(e.left), _prec(e.right)
    if lp < p or (e.op == "^" and lp <= p):
        left = f"({left})"
    if rp < p or (e.op != "^" and rp == p):
        right = f"({right})"
    return f"{left}{e.op}{right}"


def free_vars(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset([e.name])
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Unary):
        return free_vars(e.operand)
    if isinstance(e, Binary):
        return free_vars(e.left) | free_vars(e.right)
    return frozenset().union(*(free_vars(a) for a in e.args))


# ------------------------------------------------------- scalar evaluation

def _sdiv(a, b):
    if b == 0.0:
        raise ZeroDivisionError("division by zero")
    return a / b


def _ssqrt(a):
    if a < 0.0:
        raise ValueError(f"sqrt of negative number {a!r}")
    return math.sqrt(a)


_SCALAR_BIN = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _sdiv,
    "^": math.pow,
}
_SCALAR_FN = {
    "sin": math.sin, "cos": math.cos, "tanh": math.tanh, "exp": math.exp,
    "sqrt": _ssqrt, "abs": abs, "min": min, "max": max,
}


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate ``e`` in IEEE double precision.

    Raises :class:`CoeffexError` (kind ``"domain"``) for sqrt of a negative
    number, division by zero, or any non-finite intermediate result.
    """
    try:
        return _eval_scalar(e, env)
    except CoeffexError:
        raise
    except KeyError as exc:
        raise CoeffexError("domain", f"unbound variable {exc.args[0]!r}") from None
    except (ValueError, ZeroDivisionError, OverflowError) as exc:
        raise CoeffexError("domain", str(exc)) from None


def _eval_scalar(e: Expr, env) -> float:
    if isinstance(e, Num):
        v = e.value
    elif isinstance(e, Var):
        v = float(env[e.name])
    elif isinstance(e, Unary):
        v = -_eval_scalar(e.operand, env)
    elif isinstance(e, Binary):
        v = _SCALAR_BIN[e.op](_eval_scalar(e.left, env), _eval_scalar(e.right, env))
    else:
        v = _SCALAR_FN[e.name](*(_eval_scalar(a, env) for a in e.args))
    if isinstance(v, complex) or not math.isfinite(v):
        raise CoeffexError("domain", f"non-finite value in {to_source(e)!r}")
    return float(v)


# -------------------------------------------------------- array evaluation

_ARRAY_BIN = {
    "+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide, "^": np.power,
}
_ARRAY_FN = {
    "sin": np.sin, "cos": np.cos, "tanh": np.tanh, "exp": np.exp,
    "sqrt": np.sqrt, "abs": np.abs, "min": np.minimum, "max": np.maximum,
}


@functools.lru_cache(maxsize=None)
def _compile(e: Expr) -> Callable:
    """Closure tree evaluating ``e`` elementwise over an env of arrays."""
    if isinstance(e, Num):
        value = np.float64(e.value)
        return lambda env: value
    if isinstance(e, Var):
        name = e.name
        return lambda env: env[name]
    if isinstance(e, Unary):
        inner = _compile(e.operand)
        return lambda env: np.negative(inner(env))
    if isinstance(e, Binary):
        fn, left, right = _ARRAY_BIN[e.op], _compile(e.left), _compile(e.right)
        return lambda env: fn(left(env), right(env))
    fn = _ARRAY_FN[e.name]
    args = tuple(_compile(a) for a in e.args)
    if len(args) == 1:
        (a0,) = args
        return lambda env: fn(a0(env))
    a0, a1 = args
    return lambda env: fn(a0(env), a1(env))


def _checked(value, e: Expr, shape=None):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(np.atleast_1d(value)))[0])
        raise CoeffexError("domain",
                           f"non-finite value of {to_source(e)!r} at index {bad}", index=bad)
    if shape is not None and value.shape != shape:
        value = np.broadcast_to(value, shape).copy()
    return value


def evaluate_array(e: Expr, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate ``e`` elementwise; the result broadcasts against all env arrays."""
    shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
    try:
        with np.errstate(all="ignore"):
            value = _compile(e)(env)
    except KeyError as exc:
        raise CoeffexError("domain", f"unbound variable {exc.args[0]!r}") from None
    return _checked(value, e, shape)


def bind(e: Expr, fixed: Mapping[str, np.ndarray]) -> Callable[[Mapping], np.ndarray]:
    """Pre-evaluate every subtree of ``e`` that only reads ``fixed`` variables.

    Returns ``g(env)`` equivalent to ``evaluate_array(e, {**fixed, **env})``
    but without recomputing the folded subtrees; useful inside time loops
    where the spatial arguments never change.
    """
    fixed_names = frozenset(fixed)
    with np.errstate(all="ignore"):
        fn = _fold(e, fixed, fixed_names)
    shape = np.broadcast_shapes(*(np.shape(v) for v in fixed.values())) if fixed else ()

    def run(env):
        with np.errstate(all="ignore"):
            value = fn(env)
        out_shape = np.broadcast_shapes(shape, *(np.shape(v) for v in env.values()))
        return _checked(value, e, out_shape)

    return run


def _fold(e: Expr, fixed, fixed_names) -> Callable:
    if free_vars(e) <= fixed_names:
        value = _compile(e)(fixed)
        return lambda env: value
    if isinstance(e, Var):
        name = e.name
        return lambda env: env[name]
    if isinstance(e, Unary):
        inner = _fold(e.operand, fixed, fixed_names)
        return lambda env: np.negative(inner(env))
    if isinstance(e, Binary):
        fn = _ARRAY_BIN[e.op]
        left, right = _fold(e.left, fixed, fixed_names), _fold(e.right, fixed, fixed_names)
        return lambda env: fn(left(env), right(env))
    fn = _ARRAY_FN[e.name]
    args = tuple(_fold(a, fixed, fixed_names) for a in e.args)
    if len(args) == 1:
        (a0,) = args
        return lambda env: fn(a0(env))
    a0, a1 = args
    return lambda env: fn(a0(env), a1(env))
