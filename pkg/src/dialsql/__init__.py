"""Grammar-based semantic parsing for context-dependent text-to-SQL.

The package couples a deterministic SQL grammar layer (ASTs, action
sequences, canonicalized set matching) with an LSTM encoder-decoder
whose output distribution is constrained to legal productions, plus a
family of pluggable dialogue-context methods.
"""

__version__ = "0.1.0"

__all__ = ["SqlParser", "__version__"]


def __getattr__(name):
    # Deferred so that subpackages stay importable on their own.
    if name == "SqlParser":
        from .estimator import SqlParser
        return SqlParser
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
