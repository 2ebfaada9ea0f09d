"""Arithmetic expression trees over exact rationals.

Parsing, evaluation, canonical forms, and the value-preserving rewrite
rules (commutation, reassociation, distribution, factoring) used to
permute a solving expression into equivalent alternatives. The grammar
is documented in docs/grammar.md.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Iterator, Literal, Union

# Exact arithmetic throughout: equality filters must never be fooled by
# floating-point rounding.
Rational = Fraction

DEFAULT_MAX_DEPTH = 16

OPS = ("+", "-", "*", "/")
_OP_ALIASES = {"×": "*", "÷": "/", "−": "-"}
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


class ExprError(ValueError):
    """Base class for expression construction and evaluation failures."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DepthExceeded(ExprError):
    pass


class DivisionByZero(ExprError):
    def __init__(self, path: tuple[int, ...] = ()):
        super().__init__(f"division by zero at node path {path}")
        self.path = path


@dataclass(frozen=True)
class Lit:
    """A literal leaf holding a finite rational value."""

    value: Fraction


@dataclass(frozen=True)
class Bin:
    """A binary node; `grouped` marks an explicit bracket in the source text."""

    op: str
    left: "Expr"
    right: "Expr"
    grouped: bool = False


Expr = Union[Lit, Bin]


def lit(value: int | Fraction) -> Lit:
    return Lit(Fraction(value))


def make_bin(op: str, left: Expr, right: Expr, grouped: bool = False) -> Bin:
    """Build a binary node, rejecting division by an exactly-zero divisor."""
    if op not in OPS:
        raise ExprError(f"unknown operator {op!r}")
    node = Bin(op, left, right, grouped)
    if op == "/" and eval_expr(right) == 0:
        raise DivisionByZero(())
    return node


def depth(e: Expr) -> int:
    if isinstance(e, Lit):
        return 1
    return 1 + max(depth(e.left), depth(e.right))


def eval_expr(e: Expr) -> Fraction:
    """Exact rational value of the tree; independent of grouping flags."""
    return _eval(e, ())


def _eval(e: Expr, path: tuple[int, ...]) -> Fraction:
    if isinstance(e, Lit):
        return e.value
    lv = _eval(e.left, path + (0,))
    rv = _eval(e.right, path + (1,))
    if e.op == "+":
        return lv + rv
    if e.op == "-":
        return lv - rv
    if e.op == "*":
        return lv * rv
    if rv == 0:
        raise DivisionByZero(path)
    return lv / rv


# --- Parsing ---

_NUMBER = re.compile(r"\d+(?:\.\d+)?|\.\d+")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens: list[tuple[str, str, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*/" or ch in _OP_ALIASES:
            tokens.append(("op", _OP_ALIASES.get(ch, ch), i))
            i += 1
            continue
        if ch == "(":
            tokens.append(("lparen", ch, i))
            i += 1
            continue
        if ch == ")":
            tokens.append(("rparen", ch, i))
            i += 1
            continue
        m = _NUMBER.match(text, i)
        if m:
            tokens.append(("number", m.group(), i))
            i = m.end()
            continue
        raise ExprSyntaxError(f"unexpected character {ch!r}", i)
    return tokens


class _Parser:
    def __init__(self, text: str, max_depth: int):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.max_depth = max_depth
        self.nesting = 0

    def peek(self) -> tuple[str, str, int] | None:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos]
        return None

    def take(self) -> tuple[str, str, int]:
        tok = self.peek()
        if tok is None:
            raise ExprSyntaxError("unexpected end of input", len(self.text))
        self.pos += 1
        return tok

    def expr(self) -> Expr:
        node = self.term()
        while True:
            tok = self.peek()
            if tok is None or tok[0] != "op" or tok[1] not in "+-":
                return node
            self.take()
            node = make_bin(tok[1], node, self.term())

    def term(self) -> Expr:
        node = self.factor()
        while True:
            tok = self.peek()
            if tok is None or tok[0] != "op" or tok[1] not in "*/":
                return node
            self.take()
            node = make_bin(tok[1], node, self.factor())

    def factor(self) -> Expr:
        kind, value, pos = self.take()
        if kind == "number":
            return Lit(Fraction(value))
        if kind == "lparen":
            self.nesting += 1
            if self.nesting > self.max_depth:
                raise DepthExceeded(f"bracket nesting exceeds {self.max_depth}")
            inner = self.expr()
            kind, _, pos = self.take()
            if kind != "rparen":
                raise ExprSyntaxError("expected ')'", pos)
            self.nesting -= 1
            if isinstance(inner, Bin):
                return replace(inner, grouped=True)
            return inner
        raise ExprSyntaxError(f"expected a number or '('", pos)


def parse_expr(text: str, max_depth: int = DEFAULT_MAX_DEPTH) -> Expr:
    """Parse integers/decimals joined by + - * / (aliases accepted) and brackets.

    Decimals become exact rationals. Raises ExprSyntaxError with the
    offending position, DepthExceeded past `max_depth`, or DivisionByZero
    when a divisor evaluates to exactly zero.
    """
    parser = _Parser(text, max_depth)
    node = parser.expr()
    tok = parser.peek()
    if tok is not None:
        raise ExprSyntaxError(f"unexpected trailing {tok[1]!r}", tok[2])
    if depth(node) > max_depth:
        raise DepthExceeded(f"tree depth exceeds {max_depth}")
    return node


# --- Rendering ---

Style = Literal["minimal_brackets", "step_brackets"]


def format_value(v: Fraction) -> str:
    """Render a rational as an integer, a terminating decimal, or num/den."""
    if v.denominator == 1:
        return str(v.numerator)
    digits = _decimal_digits(v.denominator)
    if digits is None:
        return f"{v.numerator}/{v.denominator}"
    scaled = abs(v.numerator) * 10**digits // v.denominator
    body = str(scaled).rjust(digits + 1, "0")
    sign = "-" if v.numerator < 0 else ""
    return f"{sign}{body[:-digits]}.{body[-digits:]}"


def _decimal_digits(den: int) -> int | None:
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    return max(twos, fives) if den == 1 else None


def to_text(e: Expr, style: Style = "minimal_brackets") -> str:
    """Render to a parseable string; re-parsing evaluates equal to `e`.

    step_brackets wraps every binary node in one bracket pair so each pair
    reads as one intended solution step; minimal_brackets emits only the
    brackets required by precedence.
    """
    if style == "step_brackets":
        return _render_steps(e)
    return _render_minimal(e, 0, "", False)


def _render_steps(e: Expr) -> str:
    if isinstance(e, Lit):
        return format_value(e.value)
    return f"({_render_steps(e.left)} {e.op} {_render_steps(e.right)})"


def _render_minimal(e: Expr, parent_prec: int, parent_op: str, is_right: bool) -> str:
    if isinstance(e, Lit):
        return format_value(e.value)
    prec = _PRECEDENCE[e.op]
    text = (
        f"{_render_minimal(e.left, prec, e.op, False)} {e.op} "
        f"{_render_minimal(e.right, prec, e.op, True)}"
    )
    needs = prec < parent_prec or (prec == parent_prec and is_right and parent_op in "-/")
    return f"({text})" if needs else text


# --- Canonical form ---


def canonical_form(e: Expr) -> Expr:
    """Deterministic normal form: associative chains flattened and rebuilt
    left-leaning, commutative operands sorted by (value, structure) key,
    grouping flags dropped."""
    if isinstance(e, Lit):
        return e
    if e.op in "+*":
        operands = sorted(
            (canonical_form(x) for x in _chain(e, e.op)), key=_sort_key
        )
        node = operands[0]
        for nxt in operands[1:]:
            node = Bin(e.op, node, nxt)
        return node
    return Bin(e.op, canonical_form(e.left), canonical_form(e.right))


def _chain(e: Expr, op: str) -> Iterator[Expr]:
    if isinstance(e, Bin) and e.op == op:
        yield from _chain(e.left, op)
        yield from _chain(e.right, op)
    else:
        yield e


def _sort_key(e: Expr):
    return (eval_expr(e), _struct_key(e))


def _struct_key(e: Expr):
    if isinstance(e, Lit):
        return (0, e.value)
    return (1, OPS.index(e.op), _struct_key(e.left), _struct_key(e.right))


def canonical_key(e: Expr) -> str:
    """Lexicographic ordering key for canonical forms."""
    return to_text(canonical_form(e))


# --- Rewrite rules ---


@dataclass(frozen=True)
class RewriteRule:
    """A value-preserving local transform with an applicability predicate."""

    rule_id: str
    applies: Callable[[Expr], bool]
    transform: Callable[[Expr], tuple[Expr, ...]]


def _is_op(e: Expr, ops: str) -> bool:
    return isinstance(e, Bin) and e.op in ops


def _commute_applies(op: str) -> Callable[[Expr], bool]:
    return lambda e: isinstance(e, Bin) and e.op == op


def _commute(e: Expr) -> tuple[Expr, ...]:
    assert isinstance(e, Bin)
    return (Bin(e.op, e.right, e.left),)


def _reassoc_applies(e: Expr) -> bool:
    return _is_op(e, "+*") and (
        _is_op(e.left, e.op) or _is_op(e.right, e.op)  # type: ignore[union-attr]
    )


def _reassoc(e: Expr) -> tuple[Expr, ...]:
    assert isinstance(e, Bin)
    out: list[Expr] = []
    if _is_op(e.left, e.op):
        out.append(Bin(e.op, e.left.left, Bin(e.op, e.left.right, e.right)))
    if _is_op(e.right, e.op):
        out.append(Bin(e.op, Bin(e.op, e.left, e.right.left), e.right.right))
    return tuple(out)


def _distribute_applies(e: Expr) -> bool:
    return isinstance(e, Bin) and e.op == "*" and (
        _is_op(e.left, "+-") or _is_op(e.right, "+-")
    )


def _distribute(e: Expr) -> tuple[Expr, ...]:
    assert isinstance(e, Bin)
    out: list[Expr] = []
    if _is_op(e.right, "+-"):
        inner = e.right
        out.append(
            Bin(inner.op, Bin("*", e.left, inner.left), Bin("*", e.left, inner.right))
        )
    if _is_op(e.left, "+-"):
        inner = e.left
        out.append(
            Bin(inner.op, Bin("*", inner.left, e.right), Bin("*", inner.right, e.right))
        )
    return tuple(out)


def _factor_applies(e: Expr) -> bool:
    return _is_op(e, "+-") and _is_op(e.left, "*") and _is_op(e.right, "*")  # type: ignore[union-attr]


def _factor(e: Expr) -> tuple[Expr, ...]:
    assert isinstance(e, Bin) and isinstance(e.left, Bin) and isinstance(e.right, Bin)
    a, b = e.left.left, e.left.right
    c, d = e.right.left, e.right.right
    ca, cb, cc, cd = (canonical_form(x) for x in (a, b, c, d))
    out: list[Expr] = []
    if ca == cc:
        out.append(Bin("*", a, Bin(e.op, b, d)))
    if ca == cd:
        out.append(Bin("*", a, Bin(e.op, b, c)))
    if cb == cc:
        out.append(Bin("*", Bin(e.op, a, d), b))
    if cb == cd:
        out.append(Bin("*", Bin(e.op, a, c), b))
    return tuple(out)


# Division nodes are never restructured by any rule; rewrites inside their
# children are reached through subtree traversal, which keeps every
# transform value-preserving.
REWRITE_RULES: tuple[RewriteRule, ...] = (
    RewriteRule("commute_add", _commute_applies("+"), _commute),
    RewriteRule("commute_mul", _commute_applies("*"), _commute),
    RewriteRule("reassociate", _reassoc_applies, _reassoc),
    RewriteRule("distribute", _distribute_applies, _distribute),
    RewriteRule("factor", _factor_applies, _factor),
)


def _subtree_paths(e: Expr, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Expr]]:
    yield path, e
    if isinstance(e, Bin):
        yield from _subtree_paths(e.left, path + (0,))
        yield from _subtree_paths(e.right, path + (1,))


def _replace_at(e: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    if not path:
        return new
    assert isinstance(e, Bin)
    if path[0] == 0:
        return Bin(e.op, _replace_at(e.left, path[1:], new), e.right, e.grouped)
    return Bin(e.op, e.left, _replace_at(e.right, path[1:], new), e.grouped)


def rewrite_neighbors(e: Expr) -> Iterator[Expr]:
    """All expressions reachable from `e` by exactly one rule application."""
    for path, sub in _subtree_paths(e):
        for rule in REWRITE_RULES:
            if rule.applies(sub):
                for out in rule.transform(sub):
                    yield _replace_at(e, path, out)


def enumerate_permutations(
    e: Expr,
    max_rewrites: int = 3,
    limit: int = 16,
    seed: int = 0,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> list[Expr]:
    """Breadth-first enumeration of equivalent expressions.

    Every output evaluates exactly equal to `e` and is reachable by at
    most `max_rewrites` rule applications. Outputs are distinct by
    canonical form; a member of `e`'s own class is admitted only with a
    different surface form. Within each breadth level candidates are put
    in canonical lexicographic order and then shuffled by `seed`, so the
    result is reproducible. Search stops once `limit` is reached.
    """
    if max_rewrites < 1:
        raise ValueError("max_rewrites must be >= 1")
    if limit < 1:
        raise ValueError("limit must be >= 1")
    target = eval_expr(e)
    rng = random.Random(seed)
    source_canon = canonical_form(e)
    expanded: set[Expr] = {source_canon}
    source_emitted = False
    results: list[Expr] = []
    frontier: list[Expr] = [e]
    for _ in range(max_rewrites):
        level: dict[Expr, Expr] = {}
        for node in frontier:
            for cand in rewrite_neighbors(node):
                if depth(cand) > max_depth:
                    continue
                if eval_expr(cand) != target:
                    continue
                canon = canonical_form(cand)
                if canon == source_canon:
                    if cand != e and not source_emitted and canon not in level:
                        level[canon] = cand
                    continue
                if canon in expanded or canon in level:
                    continue
                level[canon] = cand
        if not level:
            break
        ordered = sorted(level.items(), key=lambda kv: to_text(kv[0]))
        reps = [cand for _, cand in ordered]
        rng.shuffle(reps)
        results.extend(reps)
        source_emitted = source_emitted or source_canon in level
        frontier = [cand for canon, cand in ordered if canon != source_canon]
        expanded.update(canon for canon, _ in ordered)
        if len(results) >= limit:
            break
    return results[:limit]
