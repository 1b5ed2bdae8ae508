"""Production system for SQL abstract syntax trees.

A query is a tree of productions; flattening the tree in pre-order
(node first, children left to right) gives an action sequence that
determines the tree uniquely. The decoder emits such sequences one
production at a time, restricted to the rules whose left-hand side is
the current frontier nonterminal.

Rules come in two groups: a fixed schema-agnostic set, and per-database
Col/Tab rules instantiated from the schema.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "NonTerminal",
    "Production",
    "AST",
    "Grammar",
    "GrammarOptions",
    "GrammarError",
    "StructureError",
    "DerivationError",
    "IncompleteSequenceError",
    "SequenceLengthError",
    "Derivation",
    "build_grammar",
    "agnostic_productions",
    "ast_to_actions",
    "actions_to_ast",
    "legal_actions",
    "extract_subtrees",
    "sample_ast",
    "format_actions",
    "AGG_FUNCTIONS",
    "COMPARISON_OPS",
]


class GrammarError(Exception):
    """Base class for grammar-level failures."""


class StructureError(GrammarError):
    """An AST violates the production system's shape constraints."""


class DerivationError(GrammarError):
    """An action cannot be applied at its position in the derivation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class IncompleteSequenceError(GrammarError):
    """The action sequence ended with frontier nonterminals unexpanded."""


class SequenceLengthError(GrammarError):
    """Actions remain after the derivation completed."""


class NonTerminal(enum.Enum):
    START = "Start"
    ROOT = "Root"
    SELECT = "Select"
    AGG = "Agg"
    ORDER = "Order"
    FILTER = "Filter"
    COL = "Col"
    TAB = "Tab"
    VALUE = "Value"

    def __str__(self) -> str:
        return self.value


Symbol = Union[NonTerminal, str]

AGG_FUNCTIONS = ("none", "max", "min", "count", "sum", "avg")
COMPARISON_OPS = ("=", "!=", ">", "<", ">=", "<=", "like")


@dataclass(frozen=True)
class Production:
    """One grammar rule; also the unit the decoder emits (an action)."""

    lhs: NonTerminal
    rhs: tuple[Symbol, ...]

    @property
    def schema_specific(self) -> bool:
        return self.lhs in (NonTerminal.COL, NonTerminal.TAB)

    def rhs_nonterminals(self) -> tuple[NonTerminal, ...]:
        return tuple(s for s in self.rhs if isinstance(s, NonTerminal))

    def __str__(self) -> str:
        return f"{self.lhs} -> {' '.join(str(s) for s in self.rhs)}"


Action = Production


def format_actions(actions: Sequence[Production]) -> str:
    """One action per line, in the grammar-dump notation."""
    return "\n".join(str(a) for a in actions)


@dataclass(frozen=True)
class AST:
    """A production application plus one subtree per rhs nonterminal."""

    production: Production
    children: tuple["AST", ...] = ()

    def __post_init__(self):
        expected = self.production.rhs_nonterminals()
        if len(self.children) != len(expected):
            raise StructureError(
                f"{self.production}: expected {len(expected)} children, got {len(self.children)}")
        for child, nt in zip(self.children, expected):
            if child.production.lhs is not nt:
                raise StructureError(
                    f"{self.production}: child rooted at {child.production.lhs}, expected {nt}")

    @property
    def lhs(self) -> NonTerminal:
        return self.production.lhs

    def terminals(self) -> tuple[str, ...]:
        return tuple(s for s in self.production.rhs if isinstance(s, str))

    def node_count(self) -> int:
        return 1 + sum(c.node_count() for c in self.children)


@dataclass(frozen=True)
class GrammarOptions:
    """Toggles for optional grammar extensions."""

    subqueries: bool = False


def agnostic_productions(options: GrammarOptions | None = None) -> list[Production]:
    """The fixed schema-agnostic rule set, in stable order."""
    options = options or GrammarOptions()
    nt = NonTerminal
    rules = [
        Production(nt.START, (nt.ROOT,)),
        Production(nt.ROOT, (nt.SELECT,)),
        Production(nt.ROOT, (nt.SELECT, nt.FILTER)),
        Production(nt.ROOT, (nt.SELECT, nt.ORDER)),
        Production(nt.ROOT, (nt.SELECT, nt.FILTER, nt.ORDER)),
        Production(nt.SELECT, (nt.AGG,)),
        Production(nt.SELECT, (nt.AGG, nt.AGG)),
        Production(nt.SELECT, (nt.AGG, nt.AGG, nt.AGG)),
    ]
    rules += [Production(nt.AGG, (f, nt.COL, nt.TAB)) for f in AGG_FUNCTIONS]
    rules += [
        Production(nt.ORDER, ("asc", nt.AGG)),
        Production(nt.ORDER, ("desc", nt.AGG)),
        Production(nt.ORDER, ("asc", "limit", nt.AGG)),
        Production(nt.ORDER, ("desc", "limit", nt.AGG)),
        Production(nt.FILTER, ("and", nt.FILTER, nt.FILTER)),
        Production(nt.FILTER, ("or", nt.FILTER, nt.FILTER)),
    ]
    rules += [Production(nt.FILTER, (op, nt.AGG, nt.VALUE)) for op in COMPARISON_OPS]
    rules.append(Production(nt.FILTER, ("between", nt.AGG, nt.VALUE, nt.VALUE)))
    if options.subqueries:
        rules.append(Production(nt.FILTER, ("in", nt.AGG, nt.ROOT)))
        rules.append(Production(nt.FILTER, ("not_in", nt.AGG, nt.ROOT)))
    rules.append(Production(nt.VALUE, ("value",)))
    return rules


class Grammar:
    """An indexed production set bound to one database schema."""

    def __init__(self, productions: list[Production], schema):
        self.productions = list(productions)
        self.schema = schema
        self.index: dict[Production, int] = {p: k for k, p in enumerate(self.productions)}
        if len(self.index) != len(self.productions):
            raise GrammarError("duplicate productions")
        self.by_lhs: dict[NonTerminal, list[Production]] = {nt: [] for nt in NonTerminal}
        for p in self.productions:
            self.by_lhs[p.lhs].append(p)

    def __len__(self) -> int:
        return len(self.productions)

    def __contains__(self, production: Production) -> bool:
        return production in self.index

    def expansions(self, nt: NonTerminal) -> list[Production]:
        return self.by_lhs[nt]

    def dump(self) -> str:
        """One production per line; schema-specific rules last."""
        return "\n".join(str(p) for p in self.productions) + "\n"


def build_grammar(schema, options: GrammarOptions | None = None) -> Grammar:
    """Instantiate the grammar for one database.

    Col rules are deduplicated by column name across tables (the rule
    carries only the name); Tab rules follow, one per table. Ordering
    follows the schema file, so indices are stable per schema.
    """
    if not schema.tables or any(not t.columns for t in schema.tables):
        raise GrammarError(f"schema {schema.db_id!r} needs at least one table with columns")
    rules = agnostic_productions(options)
    seen: set[str] = set()
    for table in schema.tables:
        for column in table.columns:
            key = column.name.lower()
            if key not in seen:
                seen.add(key)
                rules.append(Production(NonTerminal.COL, (column.name,)))
    for table in schema.tables:
        rules.append(Production(NonTerminal.TAB, (table.name,)))
    return Grammar(rules, schema)


# ---------------------------------------------------------------------------
# tree <-> sequence


def ast_to_actions(ast: AST) -> list[Production]:
    """Pre-order flattening; inverse of :func:`actions_to_ast`."""
    if ast.lhs is not NonTerminal.START:
        raise StructureError(f"tree must be rooted at Start, got {ast.lhs}")
    out: list[Production] = []

    def walk(node: AST) -> None:
        out.append(node.production)
        for child in node.children:
            walk(child)

    walk(ast)
    return out


def actions_to_ast(actions: Sequence[Production], grammar: Grammar | None = None) -> AST:
    """Rebuild the unique tree a pre-order action sequence denotes."""
    if not actions:
        raise IncompleteSequenceError("empty action sequence")

    def build(pos: int, expect: NonTerminal) -> tuple[AST, int]:
        if pos >= len(actions):
            raise IncompleteSequenceError(
                f"sequence ended while expanding {expect} at step {pos}")
        prod = actions[pos]
        if prod.lhs is not expect:
            raise DerivationError(f"expected a {expect} production, got {prod}", step=pos)
        if grammar is not None and prod not in grammar:
            raise DerivationError(f"production not in grammar: {prod}", step=pos)
        children = []
        next_pos = pos + 1
        for sym in prod.rhs:
            if isinstance(sym, NonTerminal):
                child, next_pos = build(next_pos, sym)
                children.append(child)
        return AST(prod, tuple(children)), next_pos

    tree, end = build(0, NonTerminal.START)
    if end != len(actions):
        raise SequenceLengthError(f"{len(actions) - end} actions left after derivation completed")
    return tree


class Derivation:
    """Incremental left-to-right depth-first derivation state."""

    def __init__(self, grammar: Grammar):
        self.grammar = grammar
        self.actions: list[Production] = []
        self._stack: list[NonTerminal] = [NonTerminal.START]

    @property
    def is_complete(self) -> bool:
        return not self._stack

    def frontier(self) -> NonTerminal | None:
        return self._stack[-1] if self._stack else None

    def legal(self) -> list[Production]:
        """Productions applicable now; empty iff the derivation is done."""
        if not self._stack:
            return []
        return self.grammar.expansions(self._stack[-1])

    def apply(self, action: Production) -> None:
        if not self._stack:
            raise DerivationError("derivation already complete", step=len(self.actions))
        if action.lhs is not self._stack[-1]:
            raise DerivationError(
                f"frontier is {self._stack[-1]}, action expands {action.lhs}",
                step=len(self.actions))
        if action not in self.grammar:
            raise DerivationError(f"production not in grammar: {action}",
                                  step=len(self.actions))
        self._stack.pop()
        for sym in reversed(action.rhs):
            if isinstance(sym, NonTerminal):
                self._stack.append(sym)
        self.actions.append(action)

    def apply_sequence(self, actions: Iterable[Production]) -> None:
        for a in actions:
            self.apply(a)

    def to_ast(self) -> AST:
        if not self.is_complete:
            raise IncompleteSequenceError("derivation not complete")
        return actions_to_ast(self.actions, self.grammar)


def legal_actions(partial: Sequence[Production], grammar: Grammar) -> list[Production]:
    """Expansions of the frontier after applying a valid prefix."""
    d = Derivation(grammar)
    d.apply_sequence(partial)
    return d.legal()


# ---------------------------------------------------------------------------
# subtrees

_SUBTREE_ROOTS = (NonTerminal.SELECT, NonTerminal.FILTER, NonTerminal.ORDER, NonTerminal.AGG)


def extract_subtrees(actions: Sequence[Production]) -> list[tuple[NonTerminal, tuple[Production, ...]]]:
    """Pre-order subsequences rooted at Select/Filter/Order/Agg nodes.

    Duplicates (by sequence equality) are dropped; first occurrence
    order is kept.
    """
    actions_to_ast(actions)  # validates the sequence

    spans: list[tuple[int, int]] = []

    def consume(pos: int) -> int:
        prod = actions[pos]
        start = pos
        pos += 1
        for sym in prod.rhs:
            if isinstance(sym, NonTerminal):
                pos = consume(pos)
        if prod.lhs in _SUBTREE_ROOTS:
            spans.append((start, pos))
        return pos

    consume(0)
    spans.sort()
    out: list[tuple[NonTerminal, tuple[Production, ...]]] = []
    seen: set[tuple[Production, ...]] = set()
    for lo, hi in spans:
        seq = tuple(actions[lo:hi])
        if seq not in seen:
            seen.add(seq)
            out.append((seq[0].lhs, seq))
    return out


# ---------------------------------------------------------------------------
# sampling

_RECURSIVE = (NonTerminal.FILTER, NonTerminal.ROOT)


def sample_ast(grammar: Grammar, rng: np.random.Generator, max_depth: int = 6) -> AST:
    """Draw a random schema-consistent tree.

    Filter/subquery recursion depth is bounded, and each sampled column
    is paired with a table that actually declares it.
    """
    schema = grammar.schema

    def sample_agg(prod: Production) -> AST:
        col_rules = grammar.expansions(NonTerminal.COL)
        col = col_rules[int(rng.integers(len(col_rules)))]
        owners = schema.tables_with_column(col.rhs[0])
        table = owners[int(rng.integers(len(owners)))]
        tab = Production(NonTerminal.TAB, (table.name,))
        return AST(prod, (AST(col), AST(tab)))

    def sample(nt: NonTerminal, depth: int) -> AST:
        choices = grammar.expansions(nt)
        if depth >= max_depth:
            capped = [p for p in choices
                      if not any(s in _RECURSIVE for s in p.rhs_nonterminals())]
            if capped:
                choices = capped
        prod = choices[int(rng.integers(len(choices)))]
        if nt is NonTerminal.AGG:
            return sample_agg(prod)
        children = tuple(sample(c, depth + 1) for c in prod.rhs_nonterminals())
        return AST(prod, children)

    return sample(NonTerminal.START, 0)
