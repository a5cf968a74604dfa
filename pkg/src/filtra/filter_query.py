"""Filter expressions: text grammar, AST, postfix compiler, stack evaluator.

Grammar (OR binds tighter than AND, NOT tightest)::

    expr    := or_term (AND or_term)*
    or_term := factor (OR factor)*
    factor  := [NOT] (leaf | '(' expr ')')
    leaf    := name '=' value

so the canonical shape ``a = 1 OR a = 2 AND b = 3`` parses as
``(a=1 OR a=2) AND b=3``. Feature names resolve through a vocabulary built
from the catalog schema; quoted string values resolve through the sidecar
dictionary; bare integers on either side are taken literally.

Compilation lowers the AST to a postfix operation array evaluated by a small
stack machine over packed bit masks: a leaf pushes its bloom-plane AND, the
boolean operators combine the top of the stack word-wise, NOT complements
within the validity mask.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import bitset
from .bloom import BloomIndex, BloomParams, FilterStats, QueryBloom, bloom_eval_leaf, hash_positions
from .errors import FilterSyntaxError, UnknownFeature, UnknownValue

# --- AST --------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    feature_id: int
    value: int


@dataclass(frozen=True)
class And:
    children: tuple


@dataclass(frozen=True)
class Or:
    children: tuple


@dataclass(frozen=True)
class Not:
    child: object


FilterExpr = object  # Leaf | And | Or | Not


@dataclass(frozen=True)
class Vocabulary:
    """Name and string-value dictionaries used to resolve leaf text."""

    feature_ids: dict[str, int] = field(default_factory=dict)
    values: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_schema(cls, feature_schema: dict[int, str],
                    values: dict[str, int] | None = None) -> "Vocabulary":
        return cls(feature_ids={name: fid for fid, name in feature_schema.items()},
                   values=dict(values or {}))

    def feature_name(self, fid: int) -> str | None:
        for name, v in self.feature_ids.items():
            if v == fid:
                return name
        return None


# --- parser -----------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<lpar>\()
  | (?P<rpar>\))
  | (?P<eq>=)
  | (?P<string>"[^"]*")
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
""", re.VERBOSE)

_KEYWORDS = {"AND", "OR", "NOT"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FilterSyntaxError(pos, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "ident" and value.upper() in _KEYWORDS:
                kind = value.upper()
            tokens.append((kind, value, pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, vocab: Vocabulary):
        self.tokens = tokens
        self.i = 0
        self.vocab = vocab

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str):
        tok = self.advance()
        if tok[0] != kind:
            raise FilterSyntaxError(tok[2], f"expected {kind}, found {tok[1]!r}")
        return tok

    def parse_expr(self):
        terms = [self.parse_or_term()]
        while self.peek()[0] == "AND":
            self.advance()
            terms.append(self.parse_or_term())
        return terms[0] if len(terms) == 1 else And(tuple(terms))

    def parse_or_term(self):
        factors = [self.parse_factor()]
        while self.peek()[0] == "OR":
            self.advance()
            factors.append(self.parse_factor())
        return factors[0] if len(factors) == 1 else Or(tuple(factors))

    def parse_factor(self):
        if self.peek()[0] == "NOT":
            self.advance()
            return Not(self.parse_factor())
        if self.peek()[0] == "lpar":
            self.advance()
            inner = self.parse_expr()
            self.expect("rpar")
            return inner
        return self.parse_leaf()

    def parse_leaf(self):
        kind, text, pos = self.advance()
        if kind == "ident":
            if text not in self.vocab.feature_ids:
                raise UnknownFeature(text)
            fid = self.vocab.feature_ids[text]
        elif kind == "int":
            fid = int(text)
        else:
            raise FilterSyntaxError(pos, f"expected feature name, found {text!r}")
        self.expect("eq")
        kind, text, pos = self.advance()
        if kind == "string":
            literal = text[1:-1]
            if literal not in self.vocab.values:
                raise UnknownValue(literal)
            value = self.vocab.values[literal]
        elif kind == "int":
            value = int(text)
        else:
            raise FilterSyntaxError(pos, f"expected value, found {text!r}")
        return Leaf(feature_id=fid, value=value)


def parse_filter(text: str, vocab: Vocabulary | None = None) -> FilterExpr:
    """Parse query text into an AST, resolving names through ``vocab``."""
    parser = _Parser(_tokenize(text), vocab or Vocabulary())
    expr = parser.parse_expr()
    tok = parser.peek()
    if tok[0] != "eof":
        raise FilterSyntaxError(tok[2], f"trailing input {tok[1]!r}")
    return expr


def format_filter(expr: FilterExpr, vocab: Vocabulary | None = None) -> str:
    """Render an AST back to parseable query text (inverse of parse_filter)."""
    vocab = vocab or Vocabulary()
    rev_values = {v: s for s, v in vocab.values.items()}

    def leaf_text(leaf: Leaf) -> str:
        name = vocab.feature_name(leaf.feature_id)
        lhs = name if name is not None else str(leaf.feature_id)
        rhs = f'"{rev_values[leaf.value]}"' if leaf.value in rev_values else str(leaf.value)
        return f"{lhs} = {rhs}"

    def fmt(node, parent: str) -> str:
        if isinstance(node, Leaf):
            return leaf_text(node)
        if isinstance(node, Not):
            inner = fmt(node.child, "not")
            if not isinstance(node.child, Leaf):
                inner = f"({inner})"
            return f"NOT {inner}"
        if isinstance(node, Or):
            body = " OR ".join(fmt(c, "or") for c in node.children)
            # an OR chain is a valid or_term under AND, but needs parens as a factor
            return f"({body})" if parent in ("or", "not") else body
        if isinstance(node, And):
            body = " AND ".join(fmt(c, "and") for c in node.children)
            return f"({body})" if parent != "top" else body
        raise TypeError(f"not a filter node: {node!r}")

    return fmt(expr, "top")


def expr_leaves(expr: FilterExpr) -> list[Leaf]:
    """All leaves in post-order (duplicates preserved)."""
    out: list[Leaf] = []

    def walk(node):
        if isinstance(node, Leaf):
            out.append(node)
        elif isinstance(node, Not):
            walk(node.child)
        elif isinstance(node, (And, Or)):
            for c in node.children:
                walk(c)
        else:
            raise TypeError(f"not a filter node: {node!r}")

    walk(expr)
    return out


def expr_has_not(expr: FilterExpr) -> bool:
    if isinstance(expr, Not):
        return True
    if isinstance(expr, (And, Or)):
        return any(expr_has_not(c) for c in expr.children)
    return False


# --- compiled form ----------------------------------------------------------


class OpCode(IntEnum):
    PUSH_LEAF = 0
    AND = 1
    OR = 2
    NOT = 3


@dataclass(frozen=True)
class CompiledFilter:
    """Postfix operation array plus one pre-hashed bloom query per leaf."""

    ops: tuple[tuple[OpCode, int], ...]
    leaves: tuple[tuple[int, int, QueryBloom], ...]

    def max_stack_depth(self) -> int:
        depth = peak = 0
        for op, _ in self.ops:
            if op == OpCode.PUSH_LEAF:
                depth += 1
            elif op in (OpCode.AND, OpCode.OR):
                depth -= 1
            peak = max(peak, depth)
        if depth != 1:
            raise ValueError(f"unbalanced operation array (net depth {depth})")
        return peak


def compile_filter(expr: FilterExpr, params: BloomParams) -> CompiledFilter:
    """Lower an AST to postfix ops; distinct leaves share one hashed query."""
    leaf_index: dict[tuple[int, int], int] = {}
    leaves: list[tuple[int, int, QueryBloom]] = []
    ops: list[tuple[OpCode, int]] = []

    def emit(node):
        if isinstance(node, Leaf):
            key = (node.feature_id, node.value)
            idx = leaf_index.get(key)
            if idx is None:
                idx = len(leaves)
                leaf_index[key] = idx
                leaves.append((node.feature_id, node.value,
                               hash_positions(node.feature_id, node.value, params)))
            ops.append((OpCode.PUSH_LEAF, idx))
        elif isinstance(node, Not):
            emit(node.child)
            ops.append((OpCode.NOT, 0))
        elif isinstance(node, (And, Or)):
            code = OpCode.AND if isinstance(node, And) else OpCode.OR
            emit(node.children[0])
            for child in node.children[1:]:
                emit(child)
                ops.append((code, 0))
        else:
            raise TypeError(f"not a filter node: {node!r}")

    emit(expr)
    cf = CompiledFilter(ops=tuple(ops), leaves=tuple(leaves))
    cf.max_stack_depth()  # validates balance
    return cf


def eval_compiled(cf: CompiledFilter, index: BloomIndex, valid: np.ndarray,
                  slot_range: tuple[int, int] | None = None,
                  stats: FilterStats | None = None) -> np.ndarray:
    """Run the stack machine over packed masks; returns bits over the range.

    ``slot_range`` must be 64-aligned at its start (cluster ranges are by
    construction). NOT complements the approximate child mask within
    ``valid``, so NOT queries may drop items the child falsely admitted; the
    final mask is always ANDed with validity. Restricting to a range yields
    exactly the restriction of the full evaluation.
    """
    if slot_range is None:
        w0, w1 = 0, index.planes.shape[1]
    else:
        s0, s1 = slot_range
        if s0 % bitset.WORD_BITS:
            raise ValueError(f"slot range start {s0} not 64-aligned")
        w0 = s0 >> 6
        w1 = (s1 + bitset.WORD_BITS - 1) >> 6
    if stats is not None:
        stats.slots_evaluated += (w1 - w0) * bitset.WORD_BITS
    valid_slice = valid[w0:w1]
    stack: list[np.ndarray] = []
    for op, arg in cf.ops:
        if op == OpCode.PUSH_LEAF:
            stack.append(bloom_eval_leaf(index, cf.leaves[arg][2],
                                         word_range=(w0, w1), stats=stats))
        elif op == OpCode.NOT:
            top = stack[-1]
            np.bitwise_not(top, out=top)
            np.bitwise_and(top, valid_slice, out=top)
        else:
            rhs = stack.pop()
            lhs = stack[-1]
            if op == OpCode.AND:
                np.bitwise_and(lhs, rhs, out=lhs)
            else:
                np.bitwise_or(lhs, rhs, out=lhs)
    if len(stack) != 1:
        raise ValueError("unbalanced operation array")
    result = stack[0]
    np.bitwise_and(result, valid_slice, out=result)
    return result
