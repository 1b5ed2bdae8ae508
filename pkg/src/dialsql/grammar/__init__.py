"""SQL grammar: productions, trees, action sequences, SQL text."""

from .rules import (
    AGG_FUNCTIONS,
    AST,
    COMPARISON_OPS,
    Derivation,
    DerivationError,
    Grammar,
    GrammarError,
    GrammarOptions,
    IncompleteSequenceError,
    NonTerminal,
    Production,
    SequenceLengthError,
    StructureError,
    actions_to_ast,
    agnostic_productions,
    ast_to_actions,
    build_grammar,
    extract_subtrees,
    format_actions,
    legal_actions,
    sample_ast,
)
from .sql import (
    JoinPathError,
    UnsupportedSQLError,
    ast_to_sql,
    canonicalize,
    sql_to_ast,
    subtree_actions,
)

__all__ = [
    "AGG_FUNCTIONS",
    "AST",
    "COMPARISON_OPS",
    "Derivation",
    "DerivationError",
    "Grammar",
    "GrammarError",
    "GrammarOptions",
    "IncompleteSequenceError",
    "NonTerminal",
    "Production",
    "SequenceLengthError",
    "StructureError",
    "actions_to_ast",
    "agnostic_productions",
    "ast_to_actions",
    "build_grammar",
    "extract_subtrees",
    "format_actions",
    "legal_actions",
    "sample_ast",
    "JoinPathError",
    "UnsupportedSQLError",
    "ast_to_sql",
    "canonicalize",
    "sql_to_ast",
    "subtree_actions",
]
