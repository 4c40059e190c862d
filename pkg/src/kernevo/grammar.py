"""Typed expression trees for covariance kernels.

Every node produces a scalar covariance expression, so the type system has a
single semantic type; arity is the only structural constraint.  Terminals that
carry learnable hyperparameters expose them as *slots*, enumerated in
depth-first pre-order so that a flat hyperparameter vector can be bound to a
tree.

Textual grammar (EBNF)::

    expr     = terminal | unary "(" expr ")" | binary "(" expr "," expr ")" ;
    terminal = "r" | "s" | "hp" | "wn" | "1" ;
    unary    = "expneg" | "square" | "sqrt" | "sin" ;
    binary   = "add" | "mul" ;

Whitespace is insignificant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional

import numpy as np

SCALAR = "ScalarExpr"

# terminal name -> roles of the slots it carries
TERMINALS: dict[str, tuple[str, ...]] = {
    "r": ("lengthscale",),
    "s": ("lengthscale", "shift"),
    "hp": ("constant",),
    "wn": ("noise",),
    "1": (),
}

OPERATORS: dict[str, int] = {
    "add": 2,
    "mul": 2,
    "expneg": 1,
    "square": 1,
    "sqrt": 1,
    "sin": 1,
}

# input types of every operator; all produce SCALAR
SIGNATURES: dict[str, tuple[str, ...]] = {
    name: (SCALAR,) * arity for name, arity in OPERATORS.items()
}


class ParseError(ValueError):
    """Malformed kernel expression text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class Node:
    """One node of a kernel expression; immutable and hashable."""

    name: str
    children: tuple["Node", ...] = ()

    @property
    def is_terminal(self) -> bool:
        return self.name in TERMINALS

    @property
    def arity(self) -> int:
        return len(self.children)

    def __str__(self) -> str:
        return serialize(self)


@dataclass(frozen=True)
class SlotDescriptor:
    kind: str  # terminal name owning the slot
    role: str  # lengthscale, shift, constant or noise
    path: tuple[int, ...]  # child-index path from the root to the owning node


@dataclass
class GrammarConfig:
    max_depth: int = 8
    terminal_weights: Mapping[str, float] = field(
        default_factory=lambda: {name: 1.0 for name in TERMINALS}
    )
    operator_weights: Mapping[str, float] = field(
        default_factory=lambda: {name: 1.0 for name in OPERATORS}
    )
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        unknown = set(self.terminal_weights) - set(TERMINALS)
        unknown |= set(self.operator_weights) - set(OPERATORS)
        if unknown:
            raise ValueError(f"unknown primitives: {sorted(unknown)}")
        weights = list(self.terminal_weights.values()) + list(
            self.operator_weights.values()
        )
        if any(w < 0 for w in weights):
            raise ValueError("primitive weights must be nonnegative")
        if not any(w > 0 for w in self.terminal_weights.values()):
            raise ValueError("at least one terminal needs a positive weight")


# ----------------------------------------------------------------------------
# construction helpers

def terminal(name: str) -> Node:
    if name not in TERMINALS:
        raise ValueError(f"unknown terminal {name!r}")
    return Node(name)


def op(name: str, *children: Node) -> Node:
    if OPERATORS.get(name) != len(children):
        raise ValueError(f"operator {name!r} does not take {len(children)} inputs")
    return Node(name, tuple(children))


def depth(node: Node) -> int:
    """Depth of the tree; a lone terminal has depth 0."""
    if not node.children:
        return 0
    return 1 + max(depth(c) for c in node.children)


def size(node: Node) -> int:
    return 1 + sum(size(c) for c in node.children)


def type_check(node: Node) -> bool:
    """True when every node is a known primitive with a matching arity."""
    if node.name in TERMINALS:
        return not node.children
    signature = SIGNATURES.get(node.name)
    if signature is None or len(signature) != len(node.children):
        return False
    return all(type_check(c) for c in node.children)


def iter_nodes(node: Node, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Node]]:
    """Pre-order walk yielding ``(path, node)`` pairs."""
    yield path, node
    for i, child in enumerate(node.children):
        yield from iter_nodes(child, path + (i,))


def subtree(node: Node, path: tuple[int, ...]) -> Node:
    for i in path:
        node = node.children[i]
    return node


def replace(node: Node, path: tuple[int, ...], new: Node) -> Node:
    """Return a copy of ``node`` with the subtree at ``path`` swapped for ``new``."""
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(node.children)
    children[head] = replace(children[head], rest, new)
    return Node(node.name, tuple(children))


def hyperparam_slots(node: Node) -> list[SlotDescriptor]:
    return [
        SlotDescriptor(n.name, role, path)
        for path, n in iter_nodes(node)
        if n.is_terminal
        for role in TERMINALS[n.name]
    ]


def n_slots(node: Node) -> int:
    if not node.children:
        return len(TERMINALS.get(node.name, ()))
    return sum(n_slots(c) for c in node.children)


# ----------------------------------------------------------------------------
# random generation

def _pick(rng: np.random.Generator, weights: Mapping[str, float]) -> str:
    names = [k for k, w in weights.items() if w > 0]
    w = np.array([weights[k] for k in names], dtype=float)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def random_terminal(cfg: GrammarConfig, rng: np.random.Generator) -> Node:
    return Node(_pick(rng, cfg.terminal_weights))


def gen_random_tree(
    cfg: GrammarConfig, rng: np.random.Generator, max_depth: Optional[int] = None
) -> Node:
    """Grow a random tree.

    Each node is drawn from the union of terminals and operators according to
    their weights; once the depth budget is spent only terminals are allowed.
    ``max_depth`` overrides ``cfg.max_depth`` (used when growing replacement
    subtrees below an existing node).
    """
    budget = cfg.max_depth if max_depth is None else max_depth
    pool = {**cfg.terminal_weights, **cfg.operator_weights}

    def grow(remaining: int) -> Node:
        if remaining <= 0:
            return random_terminal(cfg, rng)
        name = _pick(rng, pool)
        if name in TERMINALS:
            return Node(name)
        return Node(name, tuple(grow(remaining - 1) for _ in range(OPERATORS[name])))

    return grow(budget)


# ----------------------------------------------------------------------------
# text form

def serialize(node: Node) -> str:
    if not node.children:
        return node.name
    return f"{node.name}({', '.join(serialize(c) for c in node.children)})"


def parse(text: str) -> Node:
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    def expect(ch: str):
        nonlocal pos
        skip_ws()
        if pos >= n:
            raise ParseError(f"expected {ch!r} but reached end of input", pos)
        if text[pos] != ch:
            raise ParseError(f"expected {ch!r}, found {text[pos]!r}", pos)
        pos += 1

    def name() -> tuple[str, int]:
        nonlocal pos
        skip_ws()
        start = pos
        while pos < n and (text[pos].isalnum() or text[pos] == "_"):
            pos += 1
        if start == pos:
            if pos >= n:
                raise ParseError("expected a primitive but reached end of input", pos)
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        return text[start:pos], start

    def expr() -> Node:
        token, start = name()
        if token in TERMINALS:
            return Node(token)
        if token not in OPERATORS:
            raise ParseError(f"unknown primitive {token!r}", start)
        expect("(")
        children = [expr()]
        for _ in range(OPERATORS[token] - 1):
            expect(",")
            children.append(expr())
        expect(")")
        return Node(token, tuple(children))

    root = expr()
    skip_ws()
    if pos != n:
        raise ParseError(f"trailing input {text[pos:]!r}", pos)
    return root
