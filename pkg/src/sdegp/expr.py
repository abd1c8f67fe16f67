"""Symbolic expression trees over {+, *, variables, constants}.

Trees are the representation unit of the genetic search: immutable,
stored as flat preorder arrays for cheap vectorized evaluation over
long observation series and cheap subtree slicing during crossover.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

ADD = 0
MUL = 1
VAR = 2
CONST = 3

_ARITY = (2, 2, 0, 0)
_KIND_NAMES = ("add", "mul", "var", "const")
_KIND_BY_NAME = {n: k for k, n in enumerate(_KIND_NAMES)}

# Expansion guard for canonical_polynomial; exceeding it is a structure
# mismatch signal, not a crash.
DEFAULT_TERM_CAP = 2048


class ParseError(ValueError):
    """Malformed expression text; carries the offending position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class PolynomialTooLarge(Exception):
    """Expansion exceeded the term-count cap."""


@dataclass(frozen=True)
class ExprTree:
    """Immutable parse tree in preorder.

    kinds[i] is one of ADD/MUL/VAR/CONST; values[i] holds the variable
    index (VAR) or the constant value (CONST), 0.0 for operators.
    """

    kinds: tuple
    values: tuple
    depth: int = field(default=0)

    def __post_init__(self):
        if self.depth == 0:
            object.__setattr__(self, "depth", _compute_depth(self.kinds))

    @property
    def size(self):
        return len(self.kinds)

    # -- constructors ------------------------------------------------
    @staticmethod
    def constant(value):
        return ExprTree((CONST,), (float(value),))

    @staticmethod
    def variable(index):
        if index < 0:
            raise ValueError("variable index must be non-negative")
        return ExprTree((VAR,), (float(index),))

    @staticmethod
    def combine(op, left, right):
        if op not in (ADD, MUL):
            raise ValueError("op must be ADD or MUL")
        return ExprTree(
            (op,) + left.kinds + right.kinds,
            (0.0,) + left.values + right.values,
        )

    @staticmethod
    def add(left, right):
        return ExprTree.combine(ADD, left, right)

    @staticmethod
    def mul(left, right):
        return ExprTree.combine(MUL, left, right)

    # -- structure helpers -------------------------------------------
    def subtree_span(self, start):
        """Half-open [start, end) index range of the subtree rooted at start."""
        need = 1
        j = start
        n = len(self.kinds)
        while need:
            if j >= n:
                raise ValueError("truncated preorder array")
            need += _ARITY[self.kinds[j]] - 1
            j += 1
        return start, j

    def subtree(self, start):
        a, b = self.subtree_span(start)
        return ExprTree(self.kinds[a:b], self.values[a:b])

    def replace_subtree(self, start, repl):
        a, b = self.subtree_span(start)
        return ExprTree(
            self.kinds[:a] + repl.kinds + self.kinds[b:],
            self.values[:a] + repl.values + self.values[b:],
        )

    def constant_positions(self):
        return [i for i, k in enumerate(self.kinds) if k == CONST]

    def with_constants(self, consts):
        """New tree with constant leaves replaced, in preorder order."""
        consts = list(consts)
        values = list(self.values)
        j = 0
        for i, k in enumerate(self.kinds):
            if k == CONST:
                values[i] = float(consts[j])
                j += 1
        if j != len(consts):
            raise ValueError("constant count mismatch")
        return ExprTree(self.kinds, tuple(values), self.depth)

    def max_var_index(self):
        idx = [int(v) for k, v in zip(self.kinds, self.values) if k == VAR]
        return max(idx) if idx else -1

    # -- serialization -----------------------------------------------
    def to_json_obj(self):
        nodes = []
        for k, v in zip(self.kinds, self.values):
            if k == VAR:
                nodes.append(["var", int(v)])
            elif k == CONST:
                nodes.append(["const", v])
            else:
                nodes.append([_KIND_NAMES[k]])
        return nodes

    @staticmethod
    def from_json_obj(nodes):
        kinds, values = [], []
        for node in nodes:
            k = _KIND_BY_NAME[node[0]]
            kinds.append(k)
            values.append(float(node[1]) if len(node) > 1 else 0.0)
        tree = ExprTree(tuple(kinds), tuple(values))
        tree.subtree_span(0)  # validate arity structure
        return tree

    def to_json(self):
        return json.dumps(self.to_json_obj())

    @staticmethod
    def from_json(text):
        return ExprTree.from_json_obj(json.loads(text))


def _compute_depth(kinds):
    stack = []
    for k in reversed(kinds):
        if _ARITY[k] == 0:
            stack.append(1)
        else:
            a = stack.pop()
            b = stack.pop()
            stack.append(1 + max(a, b))
    if len(stack) != 1:
        raise ValueError("invalid preorder array")
    return stack[0]


def eval_tree(tree, features):
    """Evaluate a tree on a feature vector or an (n, F) feature matrix.

    Pure: identical arguments give bit-identical results.
    """
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    stack = []
    for k, v in zip(reversed(tree.kinds), reversed(tree.values)):
        if k == VAR:
            i = int(v)
            if i >= X.shape[1]:
                raise IndexError(
                    f"tree references variable {i} but only "
                    f"{X.shape[1]} features supplied"
                )
            stack.append(X[:, i])
        elif k == CONST:
            stack.append(np.full(X.shape[0], v))
        elif k == ADD:
            stack.append(stack.pop() + stack.pop())
        else:
            stack.append(stack.pop() * stack.pop())
    out = stack.pop()
    return float(out[0]) if single else out


def sample_tree(rng, max_depth, feature_count, method="grow", const_prob=0.4):
    """Random tree of depth <= max_depth (a bare leaf has depth 1).

    method "grow" mixes operators and leaves below the depth cap;
    "full" places operators on every level above the cap. Constants
    are drawn uniform on [-1, 1].
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")

    def leaf():
        if feature_count == 0 or rng.random() < const_prob:
            return ExprTree.constant(rng.uniform(-1.0, 1.0))
        return ExprTree.variable(int(rng.integers(feature_count)))

    def build(depth_left):
        if depth_left <= 1:
            return leaf()
        if method == "grow" and rng.random() < 0.4:
            return leaf()
        op = ADD if rng.random() < 0.5 else MUL
        return ExprTree.combine(op, build(depth_left - 1), build(depth_left - 1))

    return build(max_depth)


# ---------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------

_DEFAULT_NAME_TABLE = {"x": 0, "y": 1, "z": 2}
_VAR_PATTERN = re.compile(r"^x(\d+)$")


def default_names(count):
    return [f"x{i}" for i in range(count)]


def _format_const(v, precision):
    if precision is None:
        return repr(float(v)) if v >= 0 else f"({float(v)!r})"
    s = f"{v:.{precision}f}"
    return s if v >= 0 else f"({s})"


def to_string(tree, names=None, precision=None):
    """Raw infix rendering. Full-precision constants by default so that
    parse(to_string(t)) is evaluation-equivalent to t; pass precision=3
    for paper-table style output.
    """

    def name(i):
        if names is not None:
            return names[i]
        return f"x{i}"

    def render(pos):
        k = tree.kinds[pos]
        if k == VAR:
            return name(int(tree.values[pos])), 2
        if k == CONST:
            return _format_const(tree.values[pos], precision), 2
        _, lend = tree.subtree_span(pos + 1)
        ltext, lprec = render(pos + 1)
        rtext, rprec = render(lend)
        if k == ADD:
            return f"{ltext} + {rtext}", 0
        if lprec < 1:
            ltext = f"({ltext})"
        if rprec < 1:
            rtext = f"({rtext})"
        return f"{ltext}*{rtext}", 1

    return render(0)[0]


class _Tokenizer:
    _NUM = re.compile(r"\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?")
    _IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.tokens = []
        self._scan()
        self.index = 0

    def _scan(self):
        text = self.text
        i = 0
        while i < len(text):
            c = text[i]
            if c.isspace():
                i += 1
                continue
            if c in "+()":
                self.tokens.append((c, c, i))
                i += 1
                continue
            if c in "-−":  # ASCII or unicode minus
                self.tokens.append(("-", "-", i))
                i += 1
                continue
            if c in "*×⋅·":  # *, ×, ⋅, ·
                self.tokens.append(("*", "*", i))
                i += 1
                continue
            m = self._NUM.match(text, i)
            if m:
                self.tokens.append(("num", m.group(), i))
                i = m.end()
                continue
            m = self._IDENT.match(text, i)
            if m:
                self.tokens.append(("ident", m.group(), i))
                i = m.end()
                continue
            raise ParseError(f"unexpected character {c!r}", i)
        self.tokens.append(("end", "", len(text)))

    def peek(self):
        return self.tokens[self.index]

    def next(self):
        tok = self.tokens[self.index]
        self.index += 1
        return tok


def parse(text, names=None):
    """Parse infix text into an ExprTree.

    Accepts +, -, * (also × and ·), parentheses, decimal constants and
    variable names. Subtraction a - b is encoded as a + (-1)*b and unary
    minus as (-1)*expr (constants fold the sign directly). If names is
    None, variables 'x0', 'x1', ... are accepted plus x/y/z as 0/1/2.
    """
    if names is not None:
        table = {n: i for i, n in enumerate(names)}
    else:
        table = None
    tok = _Tokenizer(text)

    def lookup(name, pos):
        if table is not None:
            if name not in table:
                raise ParseError(f"unknown variable {name!r}", pos)
            return table[name]
        m = _VAR_PATTERN.match(name)
        if m:
            return int(m.group(1))
        if name in _DEFAULT_NAME_TABLE:
            return _DEFAULT_NAME_TABLE[name]
        raise ParseError(f"unknown variable {name!r}", pos)

    def negate(node):
        if node.size == 1 and node.kinds[0] == CONST:
            return ExprTree.constant(-node.values[0])
        return ExprTree.mul(ExprTree.constant(-1.0), node)

    def parse_expr():
        node = parse_term()
        while tok.peek()[0] in ("+", "-"):
            op, _, _ = tok.next()
            rhs = parse_term()
            node = ExprTree.add(node, negate(rhs) if op == "-" else rhs)
        return node

    def parse_term():
        node = parse_factor()
        while tok.peek()[0] == "*":
            tok.next()
            node = ExprTree.mul(node, parse_factor())
        return node

    def parse_factor():
        kind, _, _ = tok.peek()
        if kind == "-":
            tok.next()
            return negate(parse_factor())
        return parse_atom()

    def parse_atom():
        kind, value, pos = tok.next()
        if kind == "num":
            return ExprTree.constant(float(value))
        if kind == "ident":
            return ExprTree.variable(lookup(value, pos))
        if kind == "(":
            node = parse_expr()
            k, _, p = tok.next()
            if k != ")":
                raise ParseError("expected ')'", p)
            return node
        raise ParseError(f"unexpected token {value!r}", pos)

    node = parse_expr()
    kind, value, pos = tok.peek()
    if kind != "end":
        raise ParseError(f"unexpected trailing token {value!r}", pos)
    return node


# ---------------------------------------------------------------------
# polynomial expansion
# ---------------------------------------------------------------------

def canonical_polynomial(tree, tol=0.0, term_cap=DEFAULT_TERM_CAP):
    """Fully expanded polynomial form of a tree.

    Returns a dict mapping monomial keys to merged coefficients. A key
    is a sorted tuple of (variable index, exponent) pairs; the empty
    tuple keys the constant term. Terms with |coefficient| <= tol are
    dropped. Raises PolynomialTooLarge when expansion exceeds term_cap.
    """
    stack = []
    for k, v in zip(reversed(tree.kinds), reversed(tree.values)):
        if k == VAR:
            stack.append({((int(v), 1),): 1.0})
        elif k == CONST:
            stack.append({(): float(v)})
        elif k == ADD:
            a = stack.pop()
            b = stack.pop()
            for key, coef in b.items():
                a[key] = a.get(key, 0.0) + coef
            if len(a) > term_cap:
                raise PolynomialTooLarge(len(a))
            stack.append(a)
        else:
            a = stack.pop()
            b = stack.pop()
            out = {}
            for ka, ca in a.items():
                for kb, cb in b.items():
                    key = _merge_monomials(ka, kb)
                    out[key] = out.get(key, 0.0) + ca * cb
                    if len(out) > term_cap:
                        raise PolynomialTooLarge(len(out))
            stack.append(out)
    poly = stack.pop()
    return {k: c for k, c in poly.items() if abs(c) > tol}


def _merge_monomials(a, b):
    exps = {}
    for i, e in a:
        exps[i] = exps.get(i, 0) + e
    for i, e in b:
        exps[i] = exps.get(i, 0) + e
    return tuple(sorted(exps.items()))


def _monomial_sort_key(item):
    key, _ = item
    degree = sum(e for _, e in key)
    return (degree, key)


def polynomial_string(tree, names=None, precision=3, tol=0.0):
    """Merged-monomial rendering for report output, e.g. 'x*z - 5.670*z + 0.188'."""
    poly = canonical_polynomial(tree, tol=tol)
    if not poly:
        return "0"
    items = sorted(poly.items(), key=_monomial_sort_key, reverse=True)

    def var_name(i):
        return names[i] if names is not None else f"x{i}"

    parts = []
    for key, coef in items:
        factors = []
        for i, e in key:
            factors.extend([var_name(i)] * e)
        mono = "*".join(factors)
        mag = abs(coef)
        mag_s = f"{mag:.{precision}f}"
        if mono and abs(mag - 1.0) < 0.5 * 10 ** (-precision):
            body = mono
        elif mono:
            body = f"{mag_s}*{mono}"
        else:
            body = mag_s
        sign = "-" if coef < 0 else "+"
        parts.append((sign, body))
    first_sign, first_body = parts[0]
    text = first_body if first_sign == "+" else f"-{first_body}"
    for sign, body in parts[1:]:
        text += f" {sign} {body}"
    return text


def monomial_support(poly):
    """Set of monomial keys of a canonical polynomial map."""
    return frozenset(poly.keys())
