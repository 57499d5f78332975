"""Drift expressions b(x, y) for the Hamiltonian system.

Grammar::

    expr   := sign? term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := base ('^' integer)?
    base   := number | 'x' | 'y' | func '(' expr ')' | '(' expr ')'
    func   := sin | cos | tanh | exp

A leading sign is accepted at the start of every ``expr`` so that inputs like
``-x - y`` parse.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .exceptions import EvalError, ParseError

_FUNCS = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh, "exp": np.exp}

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_]\w*)
  | (?P<op>[-+*/^()])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src):
    toks, pos = [], 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", pos)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


# AST nodes are plain tuples: ("num", v) ("var", name) ("neg", e)
# ("bin", op, l, r) ("pow", e, n) ("call", fname, e)


class _Parser:
    def __init__(self, src):
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def _accept(self, text):
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def _expect(self, text):
        if not self._accept(text):
            got = self.tok.text or "end of input"
            raise ParseError(f"expected {text!r}, got {got!r}", self.tok.pos)

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return node

    def expr(self):
        neg = False
        if self._accept("-"):
            neg = True
        else:
            self._accept("+")
        node = self.term()
        if neg:
            node = ("neg", node)
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = ("bin", op, node, self.factor())
        return node

    def factor(self):
        node = self.base()
        if self._accept("^"):
            t = self.tok
            if t.kind != "number" or not t.text.isdigit():
                raise ParseError("exponent must be a non-negative integer", t.pos)
            self.i += 1
            node = ("pow", node, int(t.text))
        return node

    def base(self):
        t = self.tok
        if t.kind == "number":
            self.i += 1
            return ("num", float(t.text))
        if t.kind == "name":
            self.i += 1
            if t.text in ("x", "y"):
                return ("var", t.text)
            if t.text in _FUNCS:
                self._expect("(")
                arg = self.expr()
                self._expect(")")
                return ("call", t.text, arg)
            raise ParseError(f"unknown identifier {t.text!r}", t.pos)
        if self._accept("("):
            node = self.expr()
            self._expect(")")
            return node
        raise ParseError(f"unexpected {t.text or 'end of input'!r}", t.pos)


def _eval(node, x, y):
    kind = node[0]
    if kind == "num":
        return np.full(np.shape(x), node[1]) if np.ndim(x) else node[1]
    if kind == "var":
        return x if node[1] == "x" else y
    if kind == "neg":
        return -_eval(node[1], x, y)
    if kind == "pow":
        return _eval(node[1], x, y) ** node[2]
    if kind == "call":
        return _FUNCS[node[1]](_eval(node[2], x, y))
    op, left, right = node[1], _eval(node[2], x, y), _eval(node[3], x, y)
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    if np.any(np.asarray(right) == 0):
        raise EvalError("division by zero in drift expression")
    return left / right


def _is_const(node):
    kind = node[0]
    if kind == "num":
        return True
    if kind == "var":
        return False
    if kind in ("neg", "pow"):
        return _is_const(node[1])
    if kind == "call":
        return _is_const(node[2])
    return _is_const(node[2]) and _is_const(node[3])


class DriftFn:
    """A parsed drift ``b(x, y)`` with a grid-based Lipschitz estimate.

    Instances are vectorised callables. ``lipschitz`` is the largest
    finite-difference gradient norm over a regular grid of ``box``.
    """

    def __init__(self, expr, box=(-5.0, 5.0, -5.0, 5.0), grid_points=200):
        self.expr = expr
        self.box = tuple(float(v) for v in box)
        self._ast = _Parser(expr).parse()
        self.is_constant = _is_const(self._ast)
        self.lipschitz = self._estimate_lipschitz(grid_points)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            out = _eval(self._ast, x, y)
        out = np.broadcast_to(out, np.broadcast(x, y).shape)
        if not np.all(np.isfinite(out)):
            raise EvalError(f"drift {self.expr!r} is not finite at some evaluation point")
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"DriftFn({self.expr!r})"

    def _estimate_lipschitz(self, n):
        x0, x1, y0, y1 = self.box
        xs = np.linspace(x0, x1, n)
        ys = np.linspace(y0, y1, n)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        try:
            F = self(X, Y)
        except EvalError as exc:
            raise EvalError(f"drift {self.expr!r} is singular on the box {self.box}") from exc
        qx = np.abs(np.diff(F, axis=0))[:, :-1] / (xs[1] - xs[0])
        qy = np.abs(np.diff(F, axis=1))[:-1, :] / (ys[1] - ys[0])
        return float(np.max(np.hypot(qx, qy)))


def parse_drift(expr, box=(-5.0, 5.0, -5.0, 5.0), grid_points=200):
    return DriftFn(expr, box, grid_points)


def as_drift(obj, box=(-5.0, 5.0, -5.0, 5.0)):
    """Coerce a string, number or :class:`DriftFn` to a :class:`DriftFn`."""
    if obj is None:
        return None
    if isinstance(obj, DriftFn):
        return obj
    if isinstance(obj, (int, float)):
        return DriftFn(repr(float(obj)), box)
    if isinstance(obj, str):
        return DriftFn(obj, box)
    raise TypeError(f"cannot interpret {obj!r} as a drift expression")
