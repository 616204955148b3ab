"""Interpreter for the steering expression language.

Specializes one steering document into per-job concrete values. The
grammar and semantics are documented in docs/expression-language.md.
Evaluation is pure and sandboxed: the arithmetic evaluator is a closed
grammar over numeric and boolean literals, never host-language eval.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction


class DslError(Exception):
    pass


class UnknownFunction(DslError):
    pass


class UnknownVariable(DslError):
    pass


class RecursionLimit(DslError):
    pass


class EvalRejected(DslError):
    pass


class DivisionByZero(DslError):
    pass


class FormatError(DslError):
    pass


class EmptyList(DslError):
    pass


@dataclass
class EvalContext:
    """Per-job evaluation context.

    args must contain at least procnum (job index), dataset (dataset id)
    and nproc (job count). rng_seed drives $choice determinism.
    """

    args: dict[str, str]
    steering: dict[str, str] = field(default_factory=dict)
    system: dict[str, str] = field(default_factory=dict)
    rng_seed: int = 0
    max_depth: int = 20

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        for key in ("procnum", "dataset", "nproc"):
            if key not in self.args:
                raise ValueError("EvalContext.args requires %r" % key)


def job_context(dataset_id, job_index, job_count, steering=None, system=None, rng_seed=None):
    """Standard context for one job of a dataset."""
    return EvalContext(
        args={
            "procnum": str(job_index),
            "dataset": str(dataset_id),
            "nproc": str(job_count),
        },
        steering=dict(steering or {}),
        system=dict(system or {}),
        rng_seed=dataset_id if rng_seed is None else rng_seed,
    )


_FORM_NAMES = ("args", "steering", "system", "eval", "sprintf", "choice")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\(")


class _Evaluation:
    """One top-level evaluate() call: owns the $choice sequence counter."""

    def __init__(self, ctx: EvalContext):
        self.ctx = ctx
        self.choice_seq = 0

    # -- scanning --------------------------------------------------------

    def expand(self, text: str, depth: int) -> str:
        pieces = []
        i = 0
        n = len(text)
        while i < n:
            dollar = text.find("$", i)
            if dollar < 0:
                pieces.append(text[i:])
                break
            pieces.append(text[i:dollar])
            if dollar + 1 < n and text[dollar + 1] == "$":
                pieces.append("$")
                i = dollar + 2
                continue
            m = _NAME_RE.match(text, dollar + 1)
            if m is None:
                pieces.append("$")
                i = dollar + 1
                continue
            end = self._close_paren(text, m.end())
            if end is None:
                pieces.append(text[dollar:])
                break
            name = m.group(0)[:-1]
            if name not in _FORM_NAMES:
                raise UnknownFunction(name)
            if depth + 1 > self.ctx.max_depth:
                raise RecursionLimit(
                    "expression nesting exceeds max_depth=%d" % self.ctx.max_depth
                )
            pieces.append(self._form(name, text[m.end():end], depth + 1))
            i = end + 1
        return "".join(pieces)

    @staticmethod
    def _close_paren(text, start):
        level = 1
        quote = None
        for i in range(start, len(text)):
            c = text[i]
            if quote is not None:
                if c == quote:
                    quote = None
            elif c in ("'", '"'):
                quote = c
            elif c == "(":
                level += 1
            elif c == ")":
                level -= 1
                if level == 0:
                    return i
        return None

    @staticmethod
    def _split_commas(body):
        parts = []
        level = 0
        quote = None
        start = 0
        for i, c in enumerate(body):
            if quote is not None:
                if c == quote:
                    quote = None
            elif c in ("'", '"'):
                quote = c
            elif c == "(":
                level += 1
            elif c == ")":
                level -= 1
            elif c == "," and level == 0:
                parts.append(body[start:i])
                start = i + 1
        parts.append(body[start:])
        return parts

    # -- forms -----------------------------------------------------------

    def _form(self, name, body, depth):
        if name == "args" or name == "system":
            var = self.expand(body, depth).strip()
            table = self.ctx.args if name == "args" else self.ctx.system
            if var not in table:
                raise UnknownVariable("$%s(%s)" % (name, var))
            return table[var]
        if name == "steering":
            var = self.expand(body, depth).strip()
            if var not in self.ctx.steering:
                raise UnknownVariable("$steering(%s)" % var)
            return self.expand(self.ctx.steering[var], depth)
        if name == "eval":
            return render_value(eval_arith_exact(self.expand(body, depth)))
        if name == "sprintf":
            pieces = [self.expand(p, depth).strip() for p in self._split_commas(body)]
            return sprintf(_unquote(pieces[0]), [coerce_literal(p) for p in pieces[1:]])
        # choice
        if body.strip() == "":
            raise EmptyList("$choice with no items")
        items = [self.expand(p, depth).strip() for p in self._split_commas(body)]
        return self._choice(items)

    def _choice(self, items):
        seq = self.choice_seq
        self.choice_seq += 1
        return choice(items, self.ctx, seq)


def evaluate(expr_text: str, ctx: EvalContext) -> str:
    """Substitute all $-forms in expr_text; plain text passes unchanged."""
    return _Evaluation(ctx).expand(expr_text, 0)


def choice(items, ctx: EvalContext, sequence_index: int = 0) -> str:
    """Deterministic pick: sha256(rng_seed|dataset|procnum|seq) mod n."""
    if not items:
        raise EmptyList("choice over an empty list")
    key = "%s|%s|%s|%s" % (
        ctx.rng_seed,
        ctx.args.get("dataset", ""),
        ctx.args.get("procnum", ""),
        sequence_index,
    )
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return items[int.from_bytes(digest, "big") % len(items)]


# ---------------------------------------------------------------------------
# value handling

_INT_LIT = re.compile(r"[+-]?[0-9]+\Z")
_FLOAT_LIT = re.compile(r"[+-]?(?:[0-9]+\.[0-9]*|\.[0-9]+|[0-9]+)(?:[eE][+-]?[0-9]+)?\Z")


def _unquote(text):
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return text[1:-1]
    return text


def coerce_literal(text):
    """sprintf argument typing: quoted string, int, float, bool, else text."""
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return text[1:-1]
    if _INT_LIT.match(text):
        return int(text)
    if _FLOAT_LIT.match(text):
        return float(text)
    if text == "true":
        return True
    if text == "false":
        return False
    return text


def render_value(value) -> str:
    """Substituted values re-enter text: ints bare, floats shortest repr."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return str(value.numerator)
        value = _to_float(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EvalRejected("non-finite result")
        return repr(value)
    if isinstance(value, str):
        return value
    raise EvalRejected("unrenderable value %r" % (value,))


def _to_float(fraction):
    try:
        f = float(fraction)
    except OverflowError:
        raise EvalRejected("non-finite result")
    if not math.isfinite(f):
        raise EvalRejected("non-finite result")
    return f


# ---------------------------------------------------------------------------
# sprintf

_VERB = re.compile(r"%([-+ 0#]*)([0-9]*)(?:\.([0-9]+))?([%disfxoe])")


def sprintf(fmt: str, args: list) -> str:
    """C-style formatting; verb count must match argument count exactly."""
    out = []
    i = 0
    next_arg = 0
    while i < len(fmt):
        c = fmt[i]
        if c != "%":
            out.append(c)
            i += 1
            continue
        m = _VERB.match(fmt, i)
        if m is None:
            raise FormatError("malformed format verb at index %d in %r" % (i, fmt))
        flags, width, precision, conv = m.groups()
        if conv == "%":
            if flags or width or precision:
                raise FormatError("malformed %% escape")
            out.append("%")
            i = m.end()
            continue
        if next_arg >= len(args):
            raise FormatError("format %r expects more than %d arguments" % (fmt, len(args)))
        out.append(_format_verb(m.group(0), conv, args[next_arg]))
        next_arg += 1
        i = m.end()
    if next_arg != len(args):
        raise FormatError(
            "format %r consumed %d of %d arguments" % (fmt, next_arg, len(args))
        )
    return "".join(out)


def _format_verb(spec, conv, value):
    if conv in ("d", "i", "x", "o"):
        if isinstance(value, bool):
            value = int(value)
        if not isinstance(value, int):
            raise FormatError("%%%s requires an integer, got %r" % (conv, value))
        return spec % value
    if conv in ("f", "e"):
        if isinstance(value, bool):
            value = int(value)
        if not isinstance(value, (int, float)):
            raise FormatError("%%%s requires a number, got %r" % (conv, value))
        return spec % float(value)
    if isinstance(value, str):
        return spec % value
    return spec % render_value(value)


# ---------------------------------------------------------------------------
# arithmetic: closed-grammar tokenizer + recursive descent

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:[0-9]+\.[0-9]*|\.[0-9]+|[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|<=|>=|==|!=|[+\-*/%()<>])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"true", "false", "and", "or", "not"}
_MAX_POW_BITS = 332_000


def _tokenize(src):
    tokens = []
    i = 0
    while i < len(src):
        m = _TOKEN_RE.match(src, i)
        if m is None:
            raise EvalRejected("forbidden token %r in expression" % src[i])
        i = m.end()
        if m.lastgroup == "ws":
            continue
        if m.lastgroup == "word":
            word = m.group("word")
            if word not in _KEYWORDS:
                raise EvalRejected("forbidden token %r in expression" % word)
            tokens.append(("kw", word))
        elif m.lastgroup == "num":
            text = m.group("num")
            if re.fullmatch(r"[0-9]+", text):
                tokens.append(("num", int(text)))
            else:
                tokens.append(("num", float(text)))
        else:
            tokens.append(("op", m.group("op")))
    return tokens


class _Parser:
    """Builds a small expression tree; evaluation happens separately so
    and/or can short-circuit without skipping syntax checks."""

    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, value = self.take()
        if kind != "op" or value != op:
            raise EvalRejected("expected %r" % op)

    def parse(self):
        node = self.or_expr()
        if self.pos != len(self.tokens):
            raise EvalRejected("trailing tokens in expression")
        return node

    def or_expr(self):
        node = self.and_expr()
        while self.peek() == ("kw", "or"):
            self.take()
            node = ("or", node, self.and_expr())
        return node

    def and_expr(self):
        node = self.not_expr()
        while self.peek() == ("kw", "and"):
            self.take()
            node = ("and", node, self.not_expr())
        return node

    def not_expr(self):
        if self.peek() == ("kw", "not"):
            self.take()
            return ("not", self.not_expr())
        return self.comparison()

    _RELOPS = {"<", "<=", ">", ">=", "==", "!="}

    def comparison(self):
        left = self.sum()
        kind, value = self.peek()
        if kind == "op" and value in self._RELOPS:
            self.take()
            right = self.sum()
            nk, nv = self.peek()
            if nk == "op" and nv in self._RELOPS:
                raise EvalRejected("chained comparisons are not supported")
            return ("cmp", value, left, right)
        return left

    def sum(self):
        node = self.term()
        while True:
            kind, op = self.peek()
            if kind == "op" and op in ("+", "-"):
                self.take()
                node = ("bin", op, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, op = self.peek()
            if kind != "op" or op not in ("*", "/", "%"):
                return node
            self.take()
            node = ("bin", op, node, self.unary())

    def unary(self):
        kind, op = self.peek()
        if kind == "op" and op in ("+", "-"):
            self.take()
            return ("unary", op, self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        kind, op = self.peek()
        if kind == "op" and op == "**":
            self.take()
            return ("bin", "**", base, self.unary())  # right assoc, unary binds right
        return base

    def atom(self):
        kind, value = self.take()
        if kind == "num":
            return ("lit", value)
        if kind == "kw" and value in ("true", "false"):
            return ("lit", value == "true")
        if kind == "op" and value == "(":
            inner = self.or_expr()
            self.expect_op(")")
            return inner
        raise EvalRejected("unexpected token %r" % (value,))


def _eval_node(node):
    tag = node[0]
    if tag == "lit":
        return node[1]
    if tag == "or":
        left = _eval_node(node[1])
        return left if bool(left) else _eval_node(node[2])
    if tag == "and":
        left = _eval_node(node[1])
        return _eval_node(node[2]) if bool(left) else left
    if tag == "not":
        return not bool(_eval_node(node[1]))
    if tag == "cmp":
        _, op, ln, rn = node
        left = _eval_node(ln)
        right = _eval_node(rn)
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        if op == ">=":
            return left >= right
        if op == "==":
            return left == right
        return left != right
    if tag == "unary":
        _, op, operand = node
        value = _eval_node(operand)
        return _finite(-value if op == "-" else +value)
    # bin
    _, op, ln, rn = node
    left = _eval_node(ln)
    right = _eval_node(rn)
    if op == "+":
        return _finite(left + right)
    if op == "-":
        return _finite(left - right)
    if op == "*":
        return _finite(left * right)
    if op == "/":
        return _divide(left, right)
    if op == "%":
        return _modulo(left, right)
    return _power(left, right)


def _finite(value):
    if isinstance(value, float) and not math.isfinite(value):
        raise EvalRejected("non-finite result")
    return value


def _divide(left, right):
    l = int(left) if isinstance(left, bool) else left
    r = int(right) if isinstance(right, bool) else right
    try:
        if isinstance(l, int) and isinstance(r, int):
            return Fraction(l, r)
        return _finite(l / r)
    except ZeroDivisionError:
        raise DivisionByZero("division by zero")


def _modulo(left, right):
    try:
        return _finite(left % right)
    except ZeroDivisionError:
        raise DivisionByZero("modulo by zero")


def _power(base, exponent):
    e = int(exponent) if isinstance(exponent, bool) else exponent
    if isinstance(e, Fraction) and e.denominator == 1:
        e = int(e)
    if isinstance(e, int):
        if abs(e) > 9999:
            raise EvalRejected("exponent too large")
        b = int(base) if isinstance(base, bool) else base
        if e > 1:
            if isinstance(b, int) and abs(b) > 1 and b.bit_length() * e > _MAX_POW_BITS:
                raise EvalRejected("power result too large")
            if isinstance(b, Fraction):
                bits = max(b.numerator.bit_length(), b.denominator.bit_length())
                if bits > 1 and bits * e > _MAX_POW_BITS:
                    raise EvalRejected("power result too large")
    try:
        value = base ** exponent
    except ZeroDivisionError:
        raise DivisionByZero("zero to a negative power")
    except (OverflowError, ValueError):
        raise EvalRejected("power not representable")
    if isinstance(value, complex):
        raise EvalRejected("complex result")
    return _finite(value)


def eval_arith_exact(expr: str):
    """Evaluate; int/int division stays an exact rational internally."""
    return _eval_node(_Parser(_tokenize(expr)).parse())


def eval_arith(expr: str):
    """Public arithmetic entry point: returns int, float, or bool."""
    value = eval_arith_exact(expr)
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return int(value)
        return _to_float(value)
    return value
