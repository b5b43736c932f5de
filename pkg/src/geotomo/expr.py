"""Closed-form metric expressions: a small Pratt parser and second-order jets.

Expressions use the variables ``x`` and ``y``, the constants ``pi`` and
``e``, the functions ``exp sin cos sqrt log`` and the operators
``+ - * / ^``.  Evaluation returns a :class:`Jet2` carrying the value, the
gradient and the Hessian, all exact up to rounding.  Every routine accepts
numpy arrays for ``x`` and ``y`` and broadcasts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

FUNCTIONS = ("exp", "sin", "cos", "sqrt", "log")
CONSTANTS = {"pi": math.pi, "e": math.e}
VARIABLES = ("x", "y")


class ExprError(ValueError):
    """Base class for expression errors; ``offset`` is a byte offset into the source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ExprSyntaxError(ExprError):
    pass


class UnknownIdentifierError(ExprError):
    pass


class ExprDomainError(ExprError):
    pass


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Const:
    value: float
    pos: int = 0

    def __eq__(self, other):
        return isinstance(other, Const) and self.value == other.value

    def __hash__(self):
        return hash(("const", self.value))


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = 0

    def __eq__(self, other):
        return isinstance(other, Var) and self.name == other.name

    def __hash__(self):
        return hash(("var", self.name))


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or a function name
    arg: "Node"
    pos: int = 0

    def __eq__(self, other):
        return isinstance(other, Unary) and self.op == other.op and self.arg == other.arg

    def __hash__(self):
        return hash(("un", self.op, self.arg))


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"
    pos: int = 0

    def __eq__(self, other):
        return (
            isinstance(other, Binary)
            and self.op == other.op
            and self.left == other.left
            and self.right == other.right
        )

    def __hash__(self):
        return hash(("bin", self.op, self.left, self.right))


Node = Union[Const, Var, Unary, Binary]

# ---------------------------------------------------------------------- tokenizer


@dataclass(frozen=True)
class Token:
    kind: str  # "num", "id", "op", "end"
    text: str
    pos: int
    value: float = 0.0


def tokenize(src: str) -> list[Token]:
    if not src.isascii():
        bad = next(i for i, c in enumerate(src) if not c.isascii())
        raise ExprSyntaxError("non-ASCII character", len(src[:bad].encode()))
    tokens = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
        elif c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            try:
                value = float(text)
            except ValueError:
                raise ExprSyntaxError(f"malformed number {text!r}", i) from None
            tokens.append(Token("num", text, i, value))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(Token("id", src[i:j], i))
            i = j
        elif c in "+-*/^(),":
            tokens.append(Token("op", c, i))
            i += 1
        else:
            raise ExprSyntaxError(f"unexpected character {c!r}", i)
    tokens.append(Token("end", "", n))
    return tokens


# ------------------------------------------------------------------------- parser

# binding powers; unary minus binds tighter than * / but looser than ^
_INFIX = {"+": (10, 11), "-": (10, 11), "*": (20, 21), "/": (20, 21), "^": (41, 40)}
_PREFIX_BP = 30


class _Parser:
    def __init__(self, src: str):
        self.tokens = tokenize(src)
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text or tok.kind != "op":
            what = "end of input" if tok.kind == "end" else repr(tok.text)
            raise ExprSyntaxError(f"expected {text!r}, got {what}", tok.pos)
        return tok

    def parse(self) -> Node:
        node = self.expr(0)
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected token {tok.text!r}", tok.pos)
        return node

    def expr(self, min_bp: int) -> Node:
        left = self.prefix()
        while True:
            tok = self.peek()
            if tok.kind != "op" or tok.text not in _INFIX:
                break
            lbp, rbp = _INFIX[tok.text]
            if lbp < min_bp:
                break
            self.next()
            right = self.expr(rbp)
            left = Binary(tok.text, left, right, tok.pos)
        return left

    def prefix(self) -> Node:
        tok = self.next()
        if tok.kind == "num":
            return Const(tok.value, tok.pos)
        if tok.kind == "id":
            name = tok.text
            if name in VARIABLES:
                return Var(name, tok.pos)
            if name in CONSTANTS:
                return Const(CONSTANTS[name], tok.pos)
            if name in FUNCTIONS:
                self.expect("(")
                arg = self.expr(0)
                self.expect(")")
                return Unary(name, arg, tok.pos)
            raise UnknownIdentifierError(f"unknown identifier {name!r}", tok.pos)
        if tok.kind == "op" and tok.text == "(":
            node = self.expr(0)
            self.expect(")")
            return node
        if tok.kind == "op" and tok.text == "-":
            return Unary("neg", self.expr(_PREFIX_BP), tok.pos)
        if tok.kind == "op" and tok.text == "+":
            return self.expr(_PREFIX_BP)
        what = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExprSyntaxError(f"unexpected {what}", tok.pos)


def parse(src: str) -> Node:
    """Parse ``src`` into an AST.

    >>> parse("exp(-(x^2+y^2))")
    Unary(op='exp', arg=Unary(op='neg', arg=Binary(op='+', ...), ...), ...)
    """
    return _Parser(src).parse()


def pretty(node: Node) -> str:
    """Print ``node`` so that ``parse(pretty(node)) == node``."""
    if isinstance(node, Const):
        if node.value == math.pi:
            return "pi"
        if node.value == math.e:
            return "e"
        # repr round-trips floats exactly
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{_wrap(node.arg)})"
        return f"{node.op}({pretty(node.arg)})"
    return f"({pretty(node.left)} {node.op} {pretty(node.right)})"


def _wrap(node: Node) -> str:
    s = pretty(node)
    return s if s.startswith("(") or isinstance(node, (Var, Unary)) else f"({s})"


def variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Const):
        return set()
    if isinstance(node, Unary):
        return variables(node.arg)
    return variables(node.left) | variables(node.right)


def is_constant(node: Node) -> bool:
    return not variables(node)


# --------------------------------------------------------------------------- jets


class Jet2:
    """Value, gradient (gx, gy) and Hessian (hxx, hxy, hyy) of a scalar in (x, y).

    The Hessian is stored by its three independent entries, so it is symmetric
    by construction.  Components may be numpy arrays of a common shape.
    """

    __slots__ = ("v", "gx", "gy", "hxx", "hxy", "hyy")

    def __init__(self, v, gx=0.0, gy=0.0, hxx=0.0, hxy=0.0, hyy=0.0):
        self.v, self.gx, self.gy = v, gx, gy
        self.hxx, self.hxy, self.hyy = hxx, hxy, hyy

    @property
    def value(self):
        return self.v

    @property
    def grad(self):
        return np.array([self.gx, self.gy])

    @property
    def hess(self):
        return np.array([[self.hxx, self.hxy], [self.hxy, self.hyy]])

    def __repr__(self):
        return f"Jet2(value={self.v!r}, grad=({self.gx!r}, {self.gy!r}), hess=({self.hxx!r}, {self.hxy!r}, {self.hyy!r}))"

    # arithmetic -----------------------------------------------------------
    def __add__(self, o: "Jet2") -> "Jet2":
        return Jet2(self.v + o.v, self.gx + o.gx, self.gy + o.gy,
                    self.hxx + o.hxx, self.hxy + o.hxy, self.hyy + o.hyy)

    def __sub__(self, o: "Jet2") -> "Jet2":
        return Jet2(self.v - o.v, self.gx - o.gx, self.gy - o.gy,
                    self.hxx - o.hxx, self.hxy - o.hxy, self.hyy - o.hyy)

    def __neg__(self) -> "Jet2":
        return Jet2(-self.v, -self.gx, -self.gy, -self.hxx, -self.hxy, -self.hyy)

    def __mul__(self, o: "Jet2") -> "Jet2":
        a, b = self, o
        return Jet2(
            a.v * b.v,
            a.gx * b.v + a.v * b.gx,
            a.gy * b.v + a.v * b.gy,
            a.hxx * b.v + 2 * a.gx * b.gx + a.v * b.hxx,
            a.hxy * b.v + a.gx * b.gy + a.gy * b.gx + a.v * b.hxy,
            a.hyy * b.v + 2 * a.gy * b.gy + a.v * b.hyy,
        )

    def scale(self, c) -> "Jet2":
        return Jet2(c * self.v, c * self.gx, c * self.gy, c * self.hxx, c * self.hxy, c * self.hyy)

    def chain(self, f0, f1, f2) -> "Jet2":
        """Compose with a scalar function whose value and first two derivatives are f0, f1, f2."""
        gx, gy = self.gx, self.gy
        return Jet2(
            f0,
            f1 * gx,
            f1 * gy,
            f1 * self.hxx + f2 * gx * gx,
            f1 * self.hxy + f2 * gx * gy,
            f1 * self.hyy + f2 * gy * gy,
        )


def _fail_if(mask, message: str, node: Node):
    if np.any(mask):
        raise ExprDomainError(message, node.pos)


def eval_jet(ast: Node, x, y) -> Jet2:
    """Evaluate ``ast`` at (x, y) with exact first and second derivatives."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    zero = np.zeros(np.broadcast(x, y).shape)
    return _jet(ast, x + zero, y + zero, zero)


def _jet(node: Node, x, y, zero) -> Jet2:
    if isinstance(node, Const):
        return Jet2(zero + node.value, zero, zero, zero, zero, zero)
    if isinstance(node, Var):
        one = zero + 1.0
        if node.name == "x":
            return Jet2(x, one, zero, zero, zero, zero)
        return Jet2(y, zero, one, zero, zero, zero)
    if isinstance(node, Unary):
        a = _jet(node.arg, x, y, zero)
        v = a.v
        op = node.op
        if op == "neg":
            return -a
        if op == "exp":
            ev = np.exp(v)
            return a.chain(ev, ev, ev)
        if op == "sin":
            s, c = np.sin(v), np.cos(v)
            return a.chain(s, c, -s)
        if op == "cos":
            s, c = np.sin(v), np.cos(v)
            return a.chain(c, -s, -c)
        if op == "sqrt":
            _fail_if(v <= 0, "sqrt of non-positive value", node)
            r = np.sqrt(v)
            return a.chain(r, 0.5 / r, -0.25 / (r * v))
        if op == "log":
            _fail_if(v <= 0, "log of non-positive value", node)
            return a.chain(np.log(v), 1.0 / v, -1.0 / (v * v))
        raise ExprSyntaxError(f"unknown function {op!r}", node.pos)
    a = _jet(node.left, x, y, zero)
    op = node.op
    if op == "^" and is_constant(node.right):
        p = float(_jet(node.right, 0.0, 0.0, np.zeros(())).v)
        return _const_power(a, p, zero, node)
    b = _jet(node.right, x, y, zero)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        _fail_if(b.v == 0, "division by zero", node)
        inv = b.chain(1.0 / b.v, -1.0 / b.v ** 2, 2.0 / b.v ** 3)
        return a * inv
    # general power a^b = exp(b log a)
    _fail_if(a.v <= 0, "non-positive base with variable exponent", node)
    loga = a.chain(np.log(a.v), 1.0 / a.v, -1.0 / a.v ** 2)
    prod = b * loga
    ev = np.exp(prod.v)
    return prod.chain(ev, ev, ev)


def _const_power(a: Jet2, p: float, zero, node: Node) -> Jet2:
    v = a.v
    if p == 0.0:
        return Jet2(zero + 1.0, zero, zero, zero, zero, zero)
    if p == 1.0:
        return a
    if p == 2.0:
        return a * a
    if float(p).is_integer():
        if p < 0:
            _fail_if(v == 0, "zero raised to a negative power", node)
    else:
        _fail_if(v <= 0, "non-integer power of non-positive value", node)
    with np.errstate(divide="ignore", invalid="ignore"):
        f0 = v ** p
        f1 = p * v ** (p - 1)
        f2 = p * (p - 1) * v ** (p - 2)
    # v == 0 with 1 < p < 2 or p integer >= 3: limits are finite
    f1 = np.where(np.isfinite(f1), f1, 0.0)
    f2 = np.where(np.isfinite(f2), f2, 0.0)
    return a.chain(f0, f1, f2)


def eval_value(ast: Node, x, y):
    """Value only (cheaper than a full jet)."""
    return eval_jet(ast, x, y).v


class Expression:
    """A parsed expression bundled with its source text."""

    def __init__(self, src: str):
        self.src = src
        self.ast = parse(src)
        self._grad = None

    def __call__(self, x, y):
        return eval_jet(self.ast, x, y).v

    def jet(self, x, y) -> Jet2:
        return eval_jet(self.ast, x, y)

    def grad(self, x, y):
        """(value, gx, gy) through a compiled closure built on first use."""
        if self._grad is None:
            self._grad = compile_grad(self.ast)
        return self._grad(x, y)

    @property
    def constant(self) -> bool:
        return is_constant(self.ast)

    def __repr__(self):
        return f"Expression({self.src!r})"


def eval_grad(ast: Node, x, y):
    """Value and gradient only, as a tuple ``(v, gx, gy)``; the geodesic hot path."""
    return compile_grad(ast)(x, y)


def _const_value(node: Node) -> float:
    return float(_jet(node, 0.0, 0.0, np.zeros(())).v)


def compile_grad(ast: Node):
    """Turn ``ast`` into a function (x, y) -> (v, gx, gy).

    The tree is flattened into straight-line numpy source, one assignment per
    node.  Constant subtrees are folded, and derivatives known to vanish are
    tracked symbolically so that no work is spent on them.
    """
    lines: list[str] = []
    consts: dict[str, float] = {}
    checks: dict[str, tuple] = {}
    counter = [0]

    def fresh() -> str:
        counter[0] += 1
        return f"t{counter[0]}"

    def const(c: float):
        name = f"c{len(consts)}"
        consts[name] = c
        return (name, None, None)

    def emit(expr: str) -> str:
        name = fresh()
        lines.append(f"    {name} = {expr}")
        return name

    def times(a: str, b: str) -> str:
        if a == "one":
            return b
        if b == "one":
            return a
        return emit(f"{a} * {b}")

    def scale(f: str, g):
        return None if g is None else times(f, g)

    def check(cond: str, message: str, node: Node):
        key = f"k{len(checks)}"
        checks[key] = (message, node)
        lines.append(f"    if _any({cond}): _fail({key!r})")

    def gen(node: Node):
        if is_constant(node):
            return const(_const_value(node))
        if isinstance(node, Var):
            return ("x", "one", None) if node.name == "x" else ("y", None, "one")
        if isinstance(node, Unary):
            v, gx, gy = gen(node.arg)
            op = node.op
            if op == "neg":
                def negate(g):
                    if g is None:
                        return None
                    return "(-1.0)" if g == "one" else emit(f"-{g}")
                return emit(f"-{v}"), negate(gx), negate(gy)
            if op == "exp":
                f0 = emit(f"_np.exp({v})")
                return f0, scale(f0, gx), scale(f0, gy)
            if op == "sin":
                f1 = emit(f"_np.cos({v})")
                return emit(f"_np.sin({v})"), scale(f1, gx), scale(f1, gy)
            if op == "cos":
                f1 = emit(f"-_np.sin({v})")
                return emit(f"_np.cos({v})"), scale(f1, gx), scale(f1, gy)
            if op == "sqrt":
                check(f"{v} <= 0", "sqrt of non-positive value", node)
                f0 = emit(f"_np.sqrt({v})")
                f1 = emit(f"0.5 / {f0}")
                return f0, scale(f1, gx), scale(f1, gy)
            check(f"{v} <= 0", "log of non-positive value", node)
            f1 = emit(f"1.0 / {v}")
            return emit(f"_np.log({v})"), scale(f1, gx), scale(f1, gy)
        op = node.op
        av, ax, ay = gen(node.left)
        if op == "^" and is_constant(node.right):
            p = _const_value(node.right)
            if p == 0.0:
                return const(1.0)
            if p == 1.0:
                return av, ax, ay
            if p == 2.0:
                f1 = emit(f"2.0 * {av}")
                return emit(f"{av} * {av}"), scale(f1, ax), scale(f1, ay)
            if float(p).is_integer():
                if p < 0:
                    check(f"{av} == 0", "zero raised to a negative power", node)
                f1 = emit(f"{p!r} * {av} ** {p - 1!r}")
                return emit(f"{av} ** {p!r}"), scale(f1, ax), scale(f1, ay)
            check(f"{av} <= 0", "non-integer power of non-positive value", node)
            f0 = emit(f"{av} ** {p!r}")
            f1 = emit(f"{p!r} * {f0} / {av}")
            return f0, scale(f1, ax), scale(f1, ay)
        bv, bx, by = gen(node.right)

        def comb(a, b, sign):
            if a is None and b is None:
                return None
            if b is None:
                return a
            if a is None:
                if sign == "+":
                    return b
                return "(-1.0)" if b == "one" else emit(f"-{b}")
            return emit(f"{a} {sign} {b}")

        if op in "+-":
            return emit(f"{av} {op} {bv}"), comb(ax, bx, op), comb(ay, by, op)
        if op == "*":
            def prod(ga, gb):
                left = None if ga is None else times(ga, bv)
                right = None if gb is None else times(av, gb)
                return comb(left, right, "+")
            return emit(f"{av} * {bv}"), prod(ax, bx), prod(ay, by)
        if op == "/":
            check(f"{bv} == 0", "division by zero", node)
            q = emit(f"{av} / {bv}")

            def quot(ga, gb):
                right = None if gb is None else times(q, gb)
                num = comb(ga, right, "-")
                return None if num is None else emit(f"{num} / {bv}")
            return q, quot(ax, bx), quot(ay, by)
        check(f"{av} <= 0", "non-positive base with variable exponent", node)
        la = emit(f"_np.log({av})")
        ev = emit(f"_np.exp({bv} * {la})")

        def gp(ga, gb):
            left = None if gb is None else emit(f"{gb} * {la}")
            right = None if ga is None else emit(f"{bv} * {ga} / {av}")
            s_ = comb(left, right, "+")
            return None if s_ is None else emit(f"{ev} * {s_}")
        return ev, gp(ax, bx), gp(ay, by)

    v, gx, gy = gen(ast)
    body = "\n".join(lines)
    src = (f"def _f(x, y, zero, one):\n{body}\n"
           f"    return {v} + zero, {gx or 'zero'} + zero, {gy or 'zero'} + zero\n")

    def _fail(key):
        message, node = checks[key]
        raise ExprDomainError(message, node.pos)

    env = {"_np": np, "_any": np.any, "_fail": _fail, **consts}
    exec(compile(src, "<expression>", "exec"), env)
    f = env["_f"]

    def run(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape:
            x, y = np.broadcast_arrays(x, y)
        zero = np.zeros(x.shape)
        return f(x, y, zero, 1.0)

    run.source = src
    return run
