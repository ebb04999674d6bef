"""Prefix-encoded expression trees for the two evolved rules.

A tree is an immutable tuple of tokens in prefix order. Function and
terminal tokens are strings; ephemeral constants are floats. Trees compile
to a postfix program (``ops``/``consts`` arrays) that both evaluation
kernels execute with identical double-precision semantics.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np

Token = Union[str, float]

ORDERING = "ordering"
GROUP = "group"

FUNCTIONS: dict[str, int] = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "min": 2,
    "max": 2,
    "neg": 1,
}

ORDERING_TERMINALS = (
    "exp_dur",
    "opt_dur",
    "pes_dur",
    "dmd_max",
    "dmd_mean",
    "succ_count",
    "succ_work",
    "cp_end",
    "n_elig",
    "util",
    "time_now",
)

GROUP_TERMINALS = (
    "g_size",
    "g_sum_dur",
    "g_max_dur",
    "g_dmd",
    "g_succ",
    "g_slack",
)

TERMINALS = {ORDERING: ORDERING_TERMINALS, GROUP: GROUP_TERMINALS}

# Postfix opcodes: values >= 0 index the attribute row.
OP_CONST = -1
OP_ADD = -2
OP_SUB = -3
OP_MUL = -4
OP_DIV = -5
OP_MIN = -6
OP_MAX = -7
OP_NEG = -8
OPCODES = {
    "add": OP_ADD,
    "sub": OP_SUB,
    "mul": OP_MUL,
    "div": OP_DIV,
    "min": OP_MIN,
    "max": OP_MAX,
    "neg": OP_NEG,
}
try:
    from ._ckernels import compile_tokens as _compile_tokens
except ImportError:  # pragma: no cover - depends on the build
    _compile_tokens = None

_CODES = {role: {**{t: i for i, t in enumerate(terms)}, **OPCODES}
          for role, terms in TERMINALS.items()}

DIV_EPS = 1e-9
INF = math.inf


def pdiv(a: float, b: float) -> float:
    return a / b if abs(b) > DIV_EPS else 1.0


def pmin(a: float, b: float) -> float:
    return a if a < b else b


def pmax(a: float, b: float) -> float:
    return a if a > b else b


def finite_or_inf(x: float) -> float:
    return x if math.isfinite(x) else INF


class TreeSyntaxError(ValueError):
    pass


@dataclass(frozen=True)
class ExpressionTree:
    tokens: tuple[Token, ...]
    role: str = ORDERING

    def __post_init__(self) -> None:
        if self.role not in TERMINALS:
            raise ValueError(f"unknown role {self.role!r}")
        terms = TERMINALS[self.role]
        need = 1
        for tok in self.tokens:
            if need <= 0:
                raise TreeSyntaxError("trailing tokens after a complete tree")
            if isinstance(tok, str):
                if tok in FUNCTIONS:
                    need += FUNCTIONS[tok] - 1
                elif tok in terms:
                    need -= 1
                else:
                    raise TreeSyntaxError(f"token {tok!r} is not valid for a {self.role} tree")
            else:
                need -= 1
        if need != 0:
            raise TreeSyntaxError("incomplete tree")

    def __reduce__(self):
        return (ExpressionTree, (self.tokens, self.role))

    def __len__(self) -> int:
        return len(self.tokens)

    def __str__(self) -> str:
        return to_sexpr(self)

    @cached_property
    def depth(self) -> int:
        """Edges on the longest root-to-leaf path (a lone terminal has depth 0)."""
        best, stack = 0, []
        for tok in self.tokens:
            d = stack.pop() if stack else 0
            best = max(best, d)
            if isinstance(tok, str) and tok in FUNCTIONS:
                stack.extend([d + 1] * FUNCTIONS[tok])
        return best

    def subtree_end(self, begin: int) -> int:
        """Index one past the subtree rooted at ``begin``."""
        need, end = 1, begin
        while need:
            tok = self.tokens[end]
            need += FUNCTIONS.get(tok, 0) - 1 if isinstance(tok, str) else -1
            end += 1
        return end

    def node_depths(self) -> list[int]:
        depths, stack = [], []
        for tok in self.tokens:
            d = stack.pop() if stack else 0
            depths.append(d)
            if isinstance(tok, str) and tok in FUNCTIONS:
                stack.extend([d + 1] * FUNCTIONS[tok])
        return depths

    def replace(self, begin: int, end: int, sub: Sequence[Token]) -> "ExpressionTree":
        return ExpressionTree(self.tokens[:begin] + tuple(sub) + self.tokens[end:], self.role)

    @cached_property
    def program(self) -> tuple[np.ndarray, np.ndarray]:
        return compile_program(self)

    @cached_property
    def function(self) -> Callable[[Sequence[float]], float]:
        return compile_python(self)

    def evaluate(self, row: Sequence[float]) -> float:
        """Priority for one attribute row; non-finite results map to +inf."""
        return finite_or_inf(self.function(row))


def compile_program(tree: ExpressionTree) -> tuple[np.ndarray, np.ndarray]:
    """Stack program over the tokens in reverse (prefix read right to left).

    Terminals push their attribute column (``op >= 0``) or a constant;
    operators pop their first argument from the top of the stack.
    """
    codes = _CODES[tree.role]
    if _compile_tokens is not None:
        return _compile_tokens(tree.tokens, codes)
    return compile_program_py(tree.tokens, codes)


def compile_program_py(tokens: Sequence[Token], codes: dict) -> tuple[np.ndarray, np.ndarray]:
    rev = tokens[::-1]
    ops = np.array([codes[t] if type(t) is str else OP_CONST for t in rev], dtype=np.int32)
    consts = np.array([0.0 if type(t) is str else t for t in rev], dtype=np.float64)
    return ops, consts


def compile_python(tree: ExpressionTree) -> Callable[[Sequence[float]], float]:
    """Compile to a Python closure over an attribute row (pure-Python path)."""
    terms = TERMINALS[tree.role]
    pos = 0

    def build() -> str:
        nonlocal pos
        tok = tree.tokens[pos]
        pos += 1
        if isinstance(tok, str) and tok in FUNCTIONS:
            args = [build() for _ in range(FUNCTIONS[tok])]
            if tok == "add":
                return f"({args[0]} + {args[1]})"
            if tok == "sub":
                return f"({args[0]} - {args[1]})"
            if tok == "mul":
                return f"({args[0]} * {args[1]})"
            if tok == "neg":
                return f"(-{args[0]})"
            return f"_{tok}({args[0]}, {args[1]})"
        if isinstance(tok, str):
            return f"r[{terms.index(tok)}]"
        return repr(float(tok))

    src = f"lambda r: {build()}"
    env = {"_div": pdiv, "_min": pmin, "_max": pmax, "inf": INF, "nan": math.nan}
    return eval(src, env)  # noqa: S307 - source is generated from validated tokens


def _fmt_const(c: float) -> str:
    if math.isfinite(c) and c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(float(c))


def to_sexpr(tree: ExpressionTree) -> str:
    pos = 0

    def build() -> str:
        nonlocal pos
        tok = tree.tokens[pos]
        pos += 1
        if isinstance(tok, str) and tok in FUNCTIONS:
            args = [build() for _ in range(FUNCTIONS[tok])]
            return f"({tok} {' '.join(args)})"
        if isinstance(tok, str):
            return tok
        return _fmt_const(tok)

    return build()


_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def parse(text: str, role: str = ORDERING) -> ExpressionTree:
    """Parse a prefix S-expression such as ``(div exp_dur (add 1 succ_count))``."""
    toks = _TOKEN_RE.findall(text)
    pos = 0
    out: list[Token] = []

    def atom(t: str) -> Token:
        if t in FUNCTIONS:
            raise TreeSyntaxError(f"function {t!r} used without arguments")
        if t in TERMINALS[role]:
            return t
        try:
            return float(t)
        except ValueError:
            raise TreeSyntaxError(f"unknown symbol {t!r} for a {role} tree") from None

    def expr() -> None:
        nonlocal pos
        if pos >= len(toks):
            raise TreeSyntaxError("unexpected end of input")
        t = toks[pos]
        pos += 1
        if t == ")":
            raise TreeSyntaxError("unexpected ')'")
        if t != "(":
            out.append(atom(t))
            return
        if pos >= len(toks) or toks[pos] not in FUNCTIONS:
            raise TreeSyntaxError(f"expected a function name at token {pos}")
        name = toks[pos]
        pos += 1
        out.append(name)
        for _ in range(FUNCTIONS[name]):
            expr()
        if pos >= len(toks) or toks[pos] != ")":
            raise TreeSyntaxError(f"{name!r} expects {FUNCTIONS[name]} argument(s)")
        pos += 1

    expr()
    if pos != len(toks):
        raise TreeSyntaxError("trailing input after expression")
    return ExpressionTree(tuple(out), role)


def _random_terminal(rng: np.random.Generator, role: str) -> Token:
    terms = TERMINALS[role]
    i = int(rng.integers(len(terms) + 1))
    if i == len(terms):
        return round(float(rng.uniform(-1.0, 1.0)), 3)
    return terms[i]


_FUNC_NAMES = tuple(FUNCTIONS)


def generate(rng: np.random.Generator, role: str, min_depth: int, max_depth: int,
             method: str = "grow") -> ExpressionTree:
    """Grow or full generation with a depth drawn from [min_depth, max_depth]."""
    height = int(rng.integers(min_depth, max_depth + 1))
    n_terms = len(TERMINALS[role]) + 1
    term_ratio = n_terms / (n_terms + len(_FUNC_NAMES))
    tokens: list[Token] = []
    stack = [0]
    while stack:
        depth = stack.pop()
        leaf = depth == height or (
            method == "grow" and depth >= min_depth and rng.random() < term_ratio)
        if leaf:
            tokens.append(_random_terminal(rng, role))
        else:
            name = _FUNC_NAMES[int(rng.integers(len(_FUNC_NAMES)))]
            tokens.append(name)
            stack.extend([depth + 1] * FUNCTIONS[name])
    return ExpressionTree(tuple(tokens), role)


def ramped_half_and_half(rng: np.random.Generator, role: str, min_depth: int = 2,
                         max_depth: int = 6) -> ExpressionTree:
    method = "grow" if rng.random() < 0.5 else "full"
    return generate(rng, role, min_depth, max_depth, method)
