"""Condition expressions for template rules.

Grammar, loosest to tightest binding::

    expr    := and ("||" and)*
    and     := eq ("&&" eq)*
    eq      := cmp [("==" | "!=") cmp]          # non-associative
    cmp     := add [("<" | "<=" | ">" | ">=") add]  # non-associative
    add     := mul (("+" | "-") mul)*
    mul     := unary (("*" | "/") unary)*
    unary   := ("-" | "!") unary | primary
    primary := NUMBER | IDENT | "(" expr ")"

All numbers are floats. Evaluation is strict (both sides of ``&&``/``||`` are
always evaluated), so a type or arithmetic error anywhere is always reported.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

# Parenthesis/unary nesting and overall tree height. Both keep the recursive
# parser and evaluator well inside the interpreter's recursion limit.
MAX_DEPTH = 64
MAX_HEIGHT = 256


class ExprError(Exception):
    pass


class ParseError(ExprError):
    """Syntax error. ``offset`` is a byte offset into the UTF-8 source."""

    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        exp = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"{message} at byte {offset}{exp}")
        self.offset = offset
        self.expected = expected


class EvalError(ExprError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Ident:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: Expr


@dataclass(frozen=True)
class Binary:
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call:
    """Reserved for registered functions; the parser never produces it."""

    name: str
    args: tuple[Expr, ...]


Expr = Union[Num, Ident, Unary, Binary, Call]

ARITH = ("+", "-", "*", "/")
RELATIONAL = ("<", "<=", ">", ">=")
EQUALITY = ("==", "!=")
LOGICAL = ("&&", "||")

PRECEDENCE = {"||": 1, "&&": 2, "==": 3, "!=": 3, "<": 4, "<=": 4, ">": 4, ">=": 4,
              "+": 5, "-": 5, "*": 6, "/": 6}
NON_ASSOC = {3, 4}
UNARY_PREC = 7
ATOM_PREC = 8

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>&&|\|\||==|!=|<=|>=|[-+*/<>!()])
""", re.VERBOSE)

_PRIMARY_START = frozenset({"number", "identifier", "(", "-", "!"})


@dataclass(frozen=True)
class _Tok:
    kind: str  # "num" | "ident" | "op" | "end"
    text: str
    pos: int


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.toks = self._tokenize(source)
        self.i = 0
        self.depth = 0

    def offset(self, pos: int) -> int:
        return len(self.source[:pos].encode("utf-8", "surrogatepass"))

    def fail(self, msg: str, tok: _Tok, expected=frozenset()):
        raise ParseError(msg, self.offset(tok.pos), frozenset(expected))

    def _tokenize(self, s: str) -> list[_Tok]:
        out = []
        pos = 0
        while pos < len(s):
            m = _TOKEN.match(s, pos)
            if m is None:
                raise ParseError(f"unexpected character {s[pos]!r}", self.offset(pos))
            if m.lastgroup != "ws":
                out.append(_Tok(m.lastgroup, m.group(), pos))
            pos = m.end()
        out.append(_Tok("end", "", len(s)))
        return out

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, *ops: str) -> bool:
        return self.tok.kind == "op" and self.tok.text in ops

    def parse(self) -> Expr:
        node = self.expr()
        if self.tok.kind != "end":
            self.fail(f"unexpected {self.tok.text!r}", self.tok,
                      set(PRECEDENCE) | {"end of input"})
        if _height(node) > MAX_HEIGHT:
            raise ParseError(f"expression tree deeper than {MAX_HEIGHT}", 0)
        return node

    def expr(self) -> Expr:
        node = self.conj()
        while self.at("||"):
            op = self.take().text
            node = Binary(op, node, self.conj())
        return node

    def conj(self) -> Expr:
        node = self.eq()
        while self.at("&&"):
            op = self.take().text
            node = Binary(op, node, self.eq())
        return node

    def eq(self) -> Expr:
        node = self.cmp()
        if self.at(*EQUALITY):
            op = self.take().text
            node = Binary(op, node, self.cmp())
            if self.at(*EQUALITY):
                self.fail("chained equality is not allowed; use parentheses", self.tok,
                          {"&&", "||", ")", "end of input"})
        return node

    def cmp(self) -> Expr:
        node = self.add()
        if self.at(*RELATIONAL):
            op = self.take().text
            node = Binary(op, node, self.add())
            if self.at(*RELATIONAL):
                self.fail("chained comparison is not allowed; use parentheses", self.tok,
                          {"==", "!=", "&&", "||", ")", "end of input"})
        return node

    def add(self) -> Expr:
        node = self.mul()
        while self.at("+", "-"):
            op = self.take().text
            node = Binary(op, node, self.mul())
        return node

    def mul(self) -> Expr:
        node = self.unary()
        while self.at("*", "/"):
            op = self.take().text
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.at("-", "!"):
            op = self.take()
            self.enter(op)
            node = Unary(op.text, self.unary())
            self.depth -= 1
            return node
        return self.primary()

    def enter(self, tok: _Tok) -> None:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.fail(f"expression nested deeper than {MAX_DEPTH}", tok)

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.take()
            value = float(t.text)
            if not math.isfinite(value):
                self.fail("number literal out of range", t)
            return Num(value)
        if t.kind == "ident":
            self.take()
            return Ident(t.text)
        if self.at("("):
            self.take()
            self.enter(t)
            node = self.expr()
            if not self.at(")"):
                self.fail(f"unexpected {self.tok.text or 'end of input'!r}", self.tok,
                          set(PRECEDENCE) | {")"})
            self.take()
            self.depth -= 1
            return node
        self.fail(f"unexpected {t.text or 'end of input'!r}", t, _PRIMARY_START)


def _height(node: Expr) -> int:
    best, stack = 0, [(node, 1)]
    while stack:
        n, h = stack.pop()
        best = max(best, h)
        if isinstance(n, Unary):
            stack.append((n.operand, h + 1))
        elif isinstance(n, Binary):
            stack.extend(((n.left, h + 1), (n.right, h + 1)))
    return best


def parse(source: str | bytes) -> Expr:
    """Parse ``source`` into an AST. Raises ParseError on any malformed input."""
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    return _Parser(source).parse()


def free_identifiers(expr: Expr) -> set[str]:
    out: set[str] = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Ident):
            out.add(node.name)
        elif isinstance(node, Unary):
            stack.append(node.operand)
        elif isinstance(node, Binary):
            stack.extend((node.left, node.right))
        elif isinstance(node, Call):
            stack.extend(node.args)
    return out


def _prec(node: Expr) -> int:
    if isinstance(node, Binary):
        return PRECEDENCE[node.op]
    if isinstance(node, Unary):
        return UNARY_PREC
    return ATOM_PREC


def pretty_print(expr: Expr) -> str:
    """Render with the minimum parentheses needed to re-parse to the same tree."""
    def wrap(node: Expr, ok: bool) -> str:
        text = pretty_print(node)
        return text if ok else f"({text})"

    if isinstance(expr, Num):
        return repr(expr.value)
    if isinstance(expr, Ident):
        return expr.name
    if isinstance(expr, Unary):
        return expr.op + wrap(expr.operand, _prec(expr.operand) >= UNARY_PREC)
    if isinstance(expr, Binary):
        p = PRECEDENCE[expr.op]
        lp, rp = _prec(expr.left), _prec(expr.right)
        left_ok = lp > p or (lp == p and p not in NON_ASSOC)
        return f"{wrap(expr.left, left_ok)} {expr.op} {wrap(expr.right, rp > p)}"
    raise TypeError(f"cannot print {expr!r}")


def _is_num(v) -> bool:
    return isinstance(v, float)


def evaluate(expr: Expr, env: Mapping[str, float]) -> float | bool:
    """Evaluate ``expr`` with identifiers resolved from ``env``.

    Raises EvalError for unbound identifiers, operand type mismatches,
    division by zero and non-finite arithmetic results.
    """
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Ident):
        try:
            v = env[expr.name]
        except KeyError:
            raise EvalError(f"unbound identifier {expr.name!r}") from None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise EvalError(f"identifier {expr.name!r} is not a finite number: {v!r}")
        return float(v)
    if isinstance(expr, Unary):
        v = evaluate(expr.operand, env)
        if expr.op == "-":
            if not _is_num(v):
                raise EvalError("unary '-' needs a number")
            return -v
        if not isinstance(v, bool):
            raise EvalError("'!' needs a boolean")
        return not v
    if isinstance(expr, Call):
        raise EvalError(f"unknown function {expr.name!r}")

    a = evaluate(expr.left, env)
    b = evaluate(expr.right, env)
    op = expr.op
    if op in LOGICAL:
        if not (isinstance(a, bool) and isinstance(b, bool)):
            raise EvalError(f"{op!r} needs boolean operands")
        return (a and b) if op == "&&" else (a or b)
    if not (_is_num(a) and _is_num(b)):
        raise EvalError(f"{op!r} needs numeric operands")
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "+":
        r = a + b
    elif op == "-":
        r = a - b
    elif op == "*":
        r = a * b
    else:
        if b == 0:
            raise EvalError("division by zero")
        r = a / b
    if not math.isfinite(r):
        raise EvalError(f"non-finite result of {op!r}")
    return r
